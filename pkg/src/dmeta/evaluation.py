"""N-way K-shot fine-tune-and-test evaluation."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from dmeta import model
from dmeta import rng as rngs
from dmeta.data.sampling import sample_class_task
from dmeta.errors import InvalidArgumentError
from dmeta.inner import train_on_labels


@dataclass
class EvalReport:
    mode: str
    way: int
    shot: int
    num_tasks: int
    mean_accuracy: float
    confidence_95: float
    per_task: list = field(default_factory=list)

    def to_json(self, include_tasks=False):
        d = asdict(self)
        if not include_tasks:
            d.pop("per_task")
        return json.dumps(d)

    def summary(self):
        return (f"{self.mode} {self.way}-way {self.shot}-shot over {self.num_tasks} tasks: "
                f"{100 * self.mean_accuracy:.2f}% +/- {100 * self.confidence_95:.2f}%")


def fine_tune(params, task, steps=50, lr=1e-3, seed=0, transductive=True):
    """Zero the head, then full-network Adam (beta1=0) on the full support set."""
    if params.spec.num_logits != task.way:
        raise InvalidArgumentError(f"head has {params.spec.num_logits} logits but the task is {task.way}-way")
    start = params.copy().zero_head()
    return train_on_labels(start, task.support_images, task.support_labels, steps, lr, 0,
                           rngs.stream(seed, "fine-tune"), transductive)


def task_accuracy(params, task, steps=50, lr=1e-3, seed=0, transductive=True):
    tuned = fine_tune(params, task, steps, lr, seed, transductive)
    pred = model.predict(tuned, task.query_images, transductive)
    return float(np.mean(pred == task.query_labels))


def _eval_one(args):
    params, dataset, N, K, Q, steps, lr, seed, i, transductive = args
    task = sample_class_task(dataset, N, K, Q, rngs.stream(seed, f"eval-task/{i}"))
    return task_accuracy(params, task, steps, lr, rngs.child_seed(seed, f"eval-tune/{i}"), transductive)


def summarize(accs, mode, N, K):
    accs = [float(a) for a in accs]
    n = len(accs)
    mean = float(np.mean(accs)) if n else float("nan")
    half = 1.96 * float(np.std(accs, ddof=1)) / math.sqrt(n) if n > 1 else float("nan")
    return EvalReport(mode, N, K, n, mean, half, accs)


def evaluate(params, dataset, N=5, K=5, Q=1, num_tasks=100, seed=0, steps=50, lr=1e-3, mode="",
             transductive=True, workers=1):
    """Mean query accuracy over ``num_tasks`` freshly sampled tasks.

    Each task fine-tunes its own copy of ``params``; the input is never
    modified. The confidence half-width uses the normal approximation.
    """
    jobs = [(params, dataset, N, K, Q, steps, lr, seed, i, transductive) for i in range(num_tasks)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(_eval_one, jobs, chunksize=max(1, num_tasks // (4 * workers))))
    else:
        accs = [_eval_one(j) for j in jobs]
    return summarize(accs, mode, N, K)


def export_logits(params, task, out_path, task_id=0, transductive=True):
    """Write one CSV row per query image: task id, true class, predicted class, logits."""
    logits = model.forward(params, task.query_images, "eval", transductive=transductive).data
    pred = model.argmax_rows(logits)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id", "true_class", "predicted_class"] + [f"logit_{c}" for c in range(logits.shape[1])])
        for t, p, row in zip(task.query_labels, pred, logits):
            w.writerow([task_id, int(t), int(p)] + [repr(float(v)) for v in row])
    return out_path


def read_logits(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    return (
        np.array([int(r[1]) for r in body]),
        np.array([int(r[2]) for r in body]),
        np.array([[float(v) for v in r[3:]] for r in body]),
    )
