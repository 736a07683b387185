"""Task and batch samplers, and the unique-class probability for ambiguous batches."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from dmeta.data.augment import augment
from dmeta.errors import InvalidArgumentError


def unique_class_probability(c, m, N):
    """Probability that N images drawn without replacement from c classes of m images are all distinct-class.

    Evaluates c! m^N (cm-N)! / ((c-N)! (cm)!) in log space, written as the
    telescoped product of per-draw factors m(c-k)/(cm-k) = 1 - k(m-1)/(cm-k).
    Every factor is at most 1, so the result is exact at N=1 and never
    increases with N.

    >>> round(unique_class_probability(1200, 20, 5), 3)
    0.992
    """
    c, m, N = int(c), int(m), int(N)
    if c < 1 or m < 1 or N < 1:
        raise InvalidArgumentError("c, m and N must be positive")
    if N > c * m:
        raise InvalidArgumentError(f"cannot draw N={N} images from {c * m}")
    if N > c:
        return 0.0
    log_p = math.fsum(math.log1p(-k * (m - 1) / (c * m - k)) for k in range(1, N))
    return math.exp(log_p)


@dataclass
class TaskBatch:
    """Images defining one pretraining task; ``labels`` is None for unlabelled batches."""

    images: np.ndarray
    labels: Optional[np.ndarray]
    provenance: str
    indices: Optional[np.ndarray] = None


@dataclass
class EvalTask:
    """N-way K-shot support set plus query set with task-local labels."""

    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    classes: np.ndarray
    support_indices: np.ndarray
    query_indices: np.ndarray

    @property
    def way(self):
        return len(self.classes)


def sample_class_task(dataset, N, K, query_per_class, rng):
    """Pick N classes without replacement and K + Q images from each."""
    per = K + query_per_class
    eligible = [c for c, idx in dataset.class_index.items() if len(idx) >= per]
    if len(eligible) < N:
        raise InvalidArgumentError(f"need {N} classes with >= {per} images, have {len(eligible)}")
    classes = rng.choice(np.asarray(eligible), size=N, replace=False)
    sup, qry = [], []
    for c in classes:
        picks = rng.choice(dataset.class_index[int(c)], size=per, replace=False)
        sup.append(picks[:K])
        qry.append(picks[K:])
    sup_idx = np.concatenate(sup)
    qry_idx = np.concatenate(qry) if query_per_class else np.empty(0, dtype=int)
    return EvalTask(
        support_images=dataset.images[sup_idx],
        support_labels=np.repeat(np.arange(N), K),
        query_images=dataset.images[qry_idx],
        query_labels=np.repeat(np.arange(N), query_per_class),
        classes=classes,
        support_indices=sup_idx,
        query_indices=qry_idx,
    )


def sample_ambiguous_batch(dataset, size, rng):
    """Uniform draw of ``size`` images without replacement; no labels."""
    if size > len(dataset):
        raise InvalidArgumentError(f"batch size {size} exceeds {len(dataset)} images")
    idx = rng.choice(len(dataset), size=size, replace=False)
    return TaskBatch(dataset.images[idx], None, "ambiguous", idx)


def sample_supervised_task(dataset, N, K, rng):
    """A labelled N-way K-shot task built from ground-truth classes."""
    task = sample_class_task(dataset, N, K, 0, rng)
    return TaskBatch(task.support_images, task.support_labels, "supervised", task.support_indices)


def sample_umtra_task(dataset, N, augmentations_per_image, rng, pipeline=augment):
    """N random images with unique labels, each expanded to ``augmentations_per_image`` variants.

    Variant 0 of every image is the unmodified source.
    """
    idx = rng.choice(len(dataset), size=N, replace=False)
    images, labels = [], []
    for label, i in enumerate(idx):
        src = dataset.images[i]
        images.append(src)
        labels.append(label)
        for _ in range(augmentations_per_image - 1):
            images.append(pipeline(src, rng))
            labels.append(label)
    return TaskBatch(np.stack(images).astype(np.float32), np.asarray(labels), "umtra", np.repeat(idx, augmentations_per_image))


def fixed_random_labels(dataset, num_labels, rng):
    """One permanent uniform label per image, drawn once."""
    return rng.integers(0, num_labels, size=len(dataset))


def sample_fixed_label_task(dataset, labels, size, rng):
    idx = rng.choice(len(dataset), size=size, replace=False)
    return TaskBatch(dataset.images[idx], labels[idx], "fixed-random-labels", idx)


def sample_random_label_task(dataset, num_labels, size, rng):
    """Images with labels drawn fresh from a discrete uniform distribution."""
    idx = rng.choice(len(dataset), size=size, replace=False)
    return TaskBatch(dataset.images[idx], rng.integers(0, num_labels, size=size), "random-search", idx)
