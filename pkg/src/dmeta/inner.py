"""One divergent-search inner loop.

The meta parameters double as an archive of past behaviors: its body is
frozen and its head is re-fit (the "index") to match a mutated teacher, while
the teacher is pushed away from whatever the index can reproduce. A full copy
trained on dropout-noised teacher labels measures how robust the behavior is.
Behaviors whose robustness exceeds their reachability are kept and a learner
is trained on them.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from dmeta import model
from dmeta import rng as rngs
from dmeta.errors import DegenerateMutation, InvalidArgumentError, NumericError
from dmeta.tensor import ops
from dmeta.tensor.optim import AdamState, adam_step
from dmeta.tensor.tape import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class InnerLoopConfig:
    joint_steps: int = 20
    learner_steps: int = 10
    learner_batch_size: int = 30
    teacher_lr: float = 1e-3
    teacher_beta1: float = 0.9
    index_lr: float = 1e-3
    robust_lr: float = 1e-3
    learner_lr: float = 1e-3
    sigma_init: float = 1e-3
    sigma_growth: float = 2.0
    sigma_cap: float = 1.0
    dropout_rate: float = 0.5
    scale_epsilon: float = 1e-6
    scale_samples: int = 0  # 0 = every image in the batch
    transductive: bool = True

    def __post_init__(self):
        if self.joint_steps < 1:
            raise InvalidArgumentError("joint_steps must be >= 1")
        if self.sigma_init <= 0:
            raise InvalidArgumentError("sigma_init must be > 0")
        if self.sigma_growth <= 1:
            raise InvalidArgumentError("sigma_growth must be > 1")


@dataclass
class BehaviorRecord:
    teacher_predictions: np.ndarray
    a_novelty: float
    a_robustness: float
    sigma: float
    seed: int = 0
    degenerate: bool = False

    @property
    def value(self):
        return self.a_robustness - self.a_novelty

    @property
    def accepted(self):
        return bool(self.value > 0)

    def log_row(self):
        return {
            "seed": self.seed,
            "sigma_final": self.sigma,
            "a_novelty": self.a_novelty,
            "a_robustness": self.a_robustness,
            "V": self.value,
            "accepted": self.accepted,
        }

    def to_json(self):
        return json.dumps(self.log_row())


def accuracy(pred, target):
    """Fraction of positions where two prediction vectors agree."""
    return float(np.mean(np.asarray(pred) == np.asarray(target)))


def _finite(loss, what, round_index=None):
    if not np.isfinite(loss):
        where = f" at round {round_index}" if round_index is not None else ""
        raise NumericError(f"non-finite {what} loss{where}")


# -- mutation ----------------------------------------------------------------


def safe_mutation_scales(params, images, epsilon=1e-6, max_samples=0):
    """Per-weight noise scales ``1 / (epsilon + g)``.

    ``g`` is the mean over images and output logits of |d logit / d weight|.
    Batchnorm statistics are frozen at the batch values so each image's
    gradient is well defined on its own. Running buffers get no scale.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise InvalidArgumentError("safe_mutation_scales needs a non-empty batch")
    frozen = model.with_batch_stats(params, images)
    if max_samples and len(images) > max_samples:
        images = images[:max_samples]
    names = params.trainable_names
    acc = {n: np.zeros(params[n].shape, dtype=np.float64) for n in names}
    C = params.spec.num_logits
    for i in range(len(images)):
        leaves = {n: Tensor(frozen[n], requires_grad=True) for n in names}
        with Tape() as tape:
            tape.watch(*leaves.values())
            logits = model.forward(frozen, images[i : i + 1], "eval", transductive=False, leaves=leaves)
        for c in range(C):
            seed = np.zeros(logits.shape, dtype=logits.dtype)
            seed[0, c] = 1
            tape.backward(logits, seed)
            for n, t in leaves.items():
                if not np.all(np.isfinite(t.grad)):
                    raise NumericError(f"non-finite sensitivity for {n!r}")
                acc[n] += np.abs(t.grad)
                t.grad = None
    count = len(images) * C
    return {n: (1.0 / (epsilon + a / count)).astype(np.float32) for n, a in acc.items()}


def normalize_scales(scales):
    """Rescale each tensor's scales to unit mean (all-zero tensors stay zero)."""
    out = {}
    for n, s in scales.items():
        m = float(np.mean(s))
        out[n] = (s / m).astype(np.float32) if m > 0 else s
    return out


def inject_noise(params, scales, images, rng, config):
    """Mutate ``params`` until at least one prediction on ``images`` changes.

    Draws one standard-normal direction ``z`` and tries ``sigma = sigma_init *
    growth**k`` for k = 0, 1, ...; the teacher is ``params + scales * sigma * z``.
    Returns ``(teacher, sigma)`` or raises :class:`DegenerateMutation` once
    sigma reaches the cap with predictions unchanged.
    """
    base = model.predict(params, images, config.transductive)
    z = {n: rng.standard_normal(s.shape).astype(np.float32) * s for n, s in scales.items()}
    sigma = config.sigma_init
    while True:
        teacher = params.copy()
        for n, zs in z.items():
            teacher[n] = teacher[n] + np.float32(sigma) * zs
        if np.any(model.predict(teacher, images, config.transductive) != base):
            return teacher, sigma
        if sigma >= config.sigma_cap:
            raise DegenerateMutation(sigma)
        sigma *= config.sigma_growth


# -- joint optimization ------------------------------------------------------


def _head_step(feats, W, b, targets, state):
    """One Adam step of the index head on cached archive features."""
    leaves = {"fc.weight": Tensor(W, requires_grad=True), "fc.bias": Tensor(b, requires_grad=True)}
    with Tape() as tape:
        tape.watch(*leaves.values())
        probs = ops.softmax(ops.fully_connected(Tensor(feats), leaves["fc.weight"], leaves["fc.bias"]))
        loss = ops.cross_entropy(probs, ops.one_hot(targets, W.shape[1]))
    tape.backward(loss)
    adam_step({"fc.weight": W, "fc.bias": b}, {n: t.grad for n, t in leaves.items()}, state)
    return float(loss.data)


def _ce_step(params, images, targets, state, transductive, update_stats=False):
    """One Adam step of every trainable weight on one-hot cross-entropy."""
    C = params.spec.num_logits
    onehot = ops.one_hot(targets, C)

    def loss_fn(leaves):
        logits = model.forward(params, images, "train", leaves=leaves, update_stats=update_stats)
        return ops.cross_entropy(ops.softmax(logits), onehot)

    loss, grads = model.value_and_grad(params, params.trainable_names, loss_fn)
    _finite(loss, "cross-entropy")
    adam_step(params.arrays, grads, state)
    return loss


def joint_optimize(archive, teacher, images, config, rng):
    """Alternate index, robust-copy and teacher updates for ``config.joint_steps`` rounds.

    ``archive`` is never modified: the index works on a copy of its head over
    the frozen body's features, and the robust copy starts from all of it.
    Returns ``(teacher, a_novelty, a_robustness, index_head)``.
    """
    teacher = teacher.copy()
    robust = archive.copy()
    feats = model.features(archive, images, "train").data
    W = archive["fc.weight"].copy()
    b = archive["fc.bias"].copy()
    C = archive.spec.num_logits
    idx_state = AdamState(config.index_lr, beta1=0.0)
    rob_state = AdamState(config.robust_lr, beta1=0.0)
    tea_state = AdamState(config.teacher_lr, beta1=config.teacher_beta1)
    names = teacher.trainable_names
    for r in range(config.joint_steps):
        leaves = {n: Tensor(teacher[n], requires_grad=True) for n in names}
        with Tape() as tape:
            tape.watch(*leaves.values())
            t_feats = model.features(teacher, images, "train", leaves=leaves)
            t_probs = ops.softmax(model.head(teacher, t_feats, leaves=leaves))
        targets = model.argmax_rows(t_probs.data)

        # (1) archive index fits the teacher's current behavior
        loss = _head_step(feats, W, b, targets, idx_state)
        _finite(loss, "archive-index", r)

        # (2) robust copy learns from dropout-noised teacher predictions
        noisy = model.argmax_rows(
            model.head(teacher, Tensor(t_feats.data), head_dropout=config.dropout_rate, rng=rng).data
        )
        loss = _ce_step(robust, images, noisy, rob_state, config.transductive)
        _finite(loss, "robustness", r)

        # (3) teacher moves away from the index's current fit
        a_probs = ops.softmax(ops.fully_connected(Tensor(feats), Tensor(W), Tensor(b)))
        with tape:
            loss_t = ops.scale(ops.js_divergence(a_probs, t_probs), -1.0)
        _finite(float(loss_t.data), "teacher", r)
        tape.backward(loss_t)
        adam_step(teacher.arrays, {n: t.grad for n, t in leaves.items()}, tea_state)

    final = model.predict(teacher, images, config.transductive)
    index_pred = model.argmax_rows(feats @ W + b)
    a_novelty = accuracy(index_pred, final)
    a_robustness = accuracy(model.predict(robust, images, config.transductive), final)
    return teacher, a_novelty, a_robustness, (W, b)


# -- learner -----------------------------------------------------------------


def train_on_labels(params, images, labels, steps, lr, batch_size, rng, transductive=True):
    """Copy ``params`` and take ``steps`` Adam (beta1=0) steps on one-hot cross-entropy.

    Minibatches cycle through a shuffled order of the batch; ``batch_size``
    of 0 or larger than the batch means full-batch steps. Running statistics
    are only maintained when evaluation is non-transductive.
    """
    out = params.copy()
    n = len(images)
    bs = n if not batch_size or batch_size >= n else batch_size
    state = AdamState(lr, beta1=0.0)
    order = np.arange(n)
    pos = n
    for _ in range(steps):
        if bs == n:
            idx = order
        else:
            if pos + bs > n:
                order = rng.permutation(n)
                pos = 0
            idx = order[pos : pos + bs]
            pos += bs
        _ce_step(out, images[idx], labels[idx], state, transductive, update_stats=not transductive)
    return out


def train_learner(meta_params, teacher, images, config, rng):
    """Reptile-style task training with the teacher's hard predictions as labels."""
    targets = model.predict(teacher, images, config.transductive)
    return train_on_labels(meta_params, images, targets, config.learner_steps, config.learner_lr,
                           config.learner_batch_size, rng, config.transductive)


# -- full inner loop ---------------------------------------------------------


@dataclass
class InnerResult:
    learner: Optional[model.ParameterSet]
    record: BehaviorRecord


def run_inner(meta_params, images, config, seed, accept_all=False):
    """Scales -> noise -> joint optimization -> value test -> learner.

    ``learner`` is None when the behavior is discarded (V <= 0) or the
    mutation was degenerate. With ``accept_all`` every non-degenerate
    behavior gets a learner regardless of V.
    """
    scales = normalize_scales(
        safe_mutation_scales(meta_params, images, config.scale_epsilon, config.scale_samples)
    )
    try:
        teacher, sigma = inject_noise(meta_params, scales, images, rngs.stream(seed, "noise"), config)
    except DegenerateMutation as exc:
        rec = BehaviorRecord(np.empty(0, dtype=int), float("nan"), float("nan"), exc.sigma, seed, degenerate=True)
        log.debug("inner %d: degenerate mutation at sigma=%g", seed, exc.sigma)
        return InnerResult(None, rec)
    teacher, a_nov, a_rob, _ = joint_optimize(meta_params, teacher, images, config, rngs.stream(seed, "dropout"))
    preds = model.predict(teacher, images, config.transductive)
    rec = BehaviorRecord(preds, a_nov, a_rob, sigma, seed)
    if not (rec.accepted or accept_all):
        return InnerResult(None, rec)
    learner = train_learner(meta_params, teacher, images, config, rngs.stream(seed, "learner"))
    return InnerResult(learner, rec)


def record_dict(record):
    d = asdict(record)
    d["teacher_predictions"] = record.teacher_predictions.tolist()
    d["value"] = record.value
    d["accepted"] = record.accepted
    return d
