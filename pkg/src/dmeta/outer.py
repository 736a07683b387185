"""Outer loop: value-weighted Reptile meta-steps and every pretraining mode."""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from dmeta import data as D
from dmeta import model
from dmeta import rng as rngs
from dmeta.errors import InvalidArgumentError, SkipIteration
from dmeta.inner import InnerLoopConfig, run_inner, train_on_labels

log = logging.getLogger(__name__)

MODES = (
    "divergent-qd",
    "divergent-only",
    "supervised",
    "umtra-low-aug",
    "fixed-random-labels",
    "random-search",
    "none",
)


@dataclass
class MetaConfig:
    mode: str = "divergent-qd"
    meta_iterations: int = 100
    tasks_per_meta_step: int = 5
    meta_step_initial: float = 1.0
    meta_step_final: float = 0.0
    seed: int = 0
    way: int = 5
    shots: int = 5
    ambiguous_batch_size: int = 90
    augmentations_per_image: int = 5
    workers: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgumentError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.tasks_per_meta_step < 1:
            raise InvalidArgumentError("tasks_per_meta_step must be >= 1")
        for v in (self.meta_step_initial, self.meta_step_final):
            if not 0.0 <= v <= 1.0:
                raise InvalidArgumentError("meta step sizes must lie in [0, 1]")

    def step_size(self, iteration):
        """Linear anneal from ``meta_step_initial`` to ``meta_step_final``."""
        frac = iteration / max(self.meta_iterations, 1)
        return frac * self.meta_step_final + (1.0 - frac) * self.meta_step_initial


@dataclass
class MetaState:
    params: model.ParameterSet
    iteration: int = 0
    accepted: int = 0
    discarded: int = 0
    history: list = field(default_factory=list)


def meta_step(state, learners, values, step_size):
    """Move ``state.params`` toward the value-weighted mean of ``learners``.

    Values are normalized to unit sum; raises :class:`SkipIteration` when
    there is nothing to aggregate.
    """
    if not learners:
        raise SkipIteration("no learners this iteration")
    v = np.asarray(values, dtype=np.float64)
    if len(v) != len(learners) or np.any(v <= 0):
        raise InvalidArgumentError("meta_step needs one strictly positive value per learner")
    target = model.weighted_mean(learners, v / v.sum())
    state.params = model.interpolate(state.params, target, step_size)
    return state


# -- per-task work (module level so worker processes can pickle it) ---------


@dataclass
class _TaskJob:
    mode: str
    params: model.ParameterSet
    images: np.ndarray
    labels: np.ndarray
    inner: InnerLoopConfig
    seed: int


def _run_job(job):
    if job.mode in ("divergent-qd", "divergent-only"):
        res = run_inner(job.params, job.images, job.inner, job.seed, accept_all=job.mode == "divergent-only")
        return res.learner, res.record
    learner = train_on_labels(job.params, job.images, job.labels, job.inner.learner_steps, job.inner.learner_lr,
                              job.inner.learner_batch_size, rngs.stream(job.seed, "learner"),
                              job.inner.transductive)
    return learner, None


class _Sampler:
    """Draws the n task batches of one meta-iteration for a given mode."""

    def __init__(self, config, dataset):
        self.config = config
        self.dataset = dataset
        self.fixed_labels = None
        if config.mode == "fixed-random-labels":
            self.fixed_labels = D.fixed_random_labels(dataset, config.way, rngs.stream(config.seed, "fixed-labels"))

    def draw(self, iteration, task):
        cfg, ds = self.config, self.dataset
        r = rngs.stream(cfg.seed, f"task/{iteration}/{task}")
        size = cfg.way * cfg.shots
        if cfg.mode in ("divergent-qd", "divergent-only"):
            return D.sample_ambiguous_batch(ds, cfg.ambiguous_batch_size, r)
        if cfg.mode == "supervised":
            return D.sample_supervised_task(ds, cfg.way, cfg.shots, r)
        if cfg.mode == "umtra-low-aug":
            return D.sample_umtra_task(ds, cfg.way, cfg.augmentations_per_image, r)
        if cfg.mode == "fixed-random-labels":
            return D.sample_fixed_label_task(ds, self.fixed_labels, size, r)
        if cfg.mode == "random-search":
            return D.sample_random_label_task(ds, cfg.way, size, r)
        raise InvalidArgumentError(f"mode {cfg.mode!r} draws no tasks")


def _map(jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            return list(pool.map(_run_job, jobs))
    return [_run_job(j) for j in jobs]


def run_pretraining(config, dataset, inner_config, init=None, metrics_path=None, inner_log_path=None,
                    checkpoint_dir=None, callback=None):
    """Pretrain from ``init`` (or a seeded initialization) with ``config.mode``.

    Returns the final :class:`MetaState`. One metrics row per meta-iteration
    is appended to ``state.history`` and, if given, to ``metrics_path``.
    """
    if config.mode not in MODES:
        raise InvalidArgumentError(f"unknown mode {config.mode!r}")
    if init is None:
        init = model.init_params(model.NetworkSpec.omniglot(config.way), rngs.stream(config.seed, "init"))
    state = MetaState(init.copy())
    if config.mode == "none":
        return state
    sampler = _Sampler(config, dataset)
    metrics_fh = open(metrics_path, "a") if metrics_path else None
    inner_fh = open(inner_log_path, "a") if inner_log_path else None
    try:
        for it in range(config.meta_iterations):
            t0 = time.perf_counter()
            jobs = []
            for k in range(config.tasks_per_meta_step):
                batch = sampler.draw(it, k)
                jobs.append(_TaskJob(config.mode, state.params, batch.images, batch.labels, inner_config,
                                     rngs.child_seed(config.seed, f"inner/{it}/{k}")))
            results = _map(jobs, config.workers)
            learners, values, records = [], [], []
            for learner, rec in results:
                if rec is not None:
                    records.append(rec)
                    if inner_fh:
                        inner_fh.write(json.dumps({"iteration": it, **rec.log_row()}) + "\n")
                if learner is None:
                    continue
                learners.append(learner)
                # only divergent-qd weights by behavior value; other modes average uniformly
                values.append(rec.value if config.mode == "divergent-qd" else 1.0)
            state.accepted += len(learners)
            state.discarded += len(results) - len(learners)
            try:
                meta_step(state, learners, values, config.step_size(it))
            except SkipIteration:
                log.debug("iteration %d: no accepted behaviors", it)
            state.iteration = it + 1
            vs = [r.value for r in records if not r.degenerate]
            row = {
                "iteration": it,
                "mode": config.mode,
                "accepted_count": len(learners),
                "mean_V": float(np.mean(vs)) if vs else None,
                "wall_ms": round(1000 * (time.perf_counter() - t0), 3),
            }
            state.history.append(row)
            if metrics_fh:
                metrics_fh.write(json.dumps(row) + "\n")
                metrics_fh.flush()
            if checkpoint_dir and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                model.save_checkpoint(state.params, os.path.join(checkpoint_dir, f"checkpoint_{it + 1:06d}.dmeta"))
            if callback:
                callback(state, row)
    finally:
        if metrics_fh:
            metrics_fh.close()
        if inner_fh:
            inner_fh.close()
    return state
