"""Image datasets: Omniglot and Mini-ImageNet loaders plus procedural glyphs."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from dmeta import rng as rngs
from dmeta.errors import InvalidArgumentError

log = logging.getLogger(__name__)

OMNIGLOT_COUNTS = {"pretraining": 1200, "evaluation": 423, "per_class": 20}
MINI_IMAGENET_COUNTS = {"pretraining": 64, "evaluation": 36, "per_class": 600}
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


@dataclass
class Dataset:
    """Images of one split, shape [n, C, H, W] with values in [0, 1].

    ``labels`` holds a global class id per image; ``class_names`` is indexed
    by that id.
    """

    name: str
    images: np.ndarray
    labels: np.ndarray
    split: str = "pretraining"
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise InvalidArgumentError("images and labels differ in length")

    def __len__(self):
        return len(self.images)

    @cached_property
    def class_index(self):
        """Map class id -> sorted array of image indices."""
        order = np.argsort(self.labels, kind="stable")
        ids, starts = np.unique(self.labels[order], return_index=True)
        groups = np.split(order, starts[1:])
        return {int(c): g for c, g in zip(ids, groups)}

    @property
    def classes(self):
        return sorted(self.class_index)

    @property
    def num_classes(self):
        return len(self.class_index)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, class_ids, split):
        class_ids = set(int(c) for c in class_ids)
        mask = np.array([int(l) in class_ids for l in self.labels], dtype=bool)
        return Dataset(self.name, self.images[mask], self.labels[mask], split, self.class_names)


class DatasetSplits(NamedTuple):
    pretraining: Dataset
    evaluation: Dataset


def split_by_class(dataset, num_pretraining):
    """First ``num_pretraining`` class ids (in order) for pretraining, the rest for evaluation."""
    classes = dataset.classes
    return DatasetSplits(
        dataset.subset(classes[:num_pretraining], "pretraining"),
        dataset.subset(classes[num_pretraining:], "evaluation"),
    )


def _read_image(path, size, mode):
    from PIL import Image

    with Image.open(path) as img:
        img = img.convert(mode)
        if img.size != (size, size):
            img = img.resize((size, size), Image.BOX)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def _list_images(directory):
    return sorted(f for f in os.listdir(directory) if f.lower().endswith(IMAGE_EXTENSIONS))


def _validate_counts(name, splits, expected):
    observed = {
        "pretraining": splits.pretraining.num_classes,
        "evaluation": splits.evaluation.num_classes,
    }
    sizes = {len(v) for ds in splits for v in ds.class_index.values()}
    if observed["pretraining"] != expected["pretraining"] or observed["evaluation"] != expected["evaluation"] \
            or sizes != {expected["per_class"]}:
        log.warning("%s: observed %s classes with per-class sizes %s; expected %s",
                    name, observed, sorted(sizes), expected)


def load_omniglot(root_dir):
    """Load ``root_dir/<alphabet>/<character>/*.png`` as 28x28 grayscale.

    Classes are (alphabet, character) pairs in lexicographic order; the first
    1200 form the pretraining split and the remainder the evaluation split.
    Pixel polarity is kept as stored.
    """
    if not os.path.isdir(root_dir):
        raise FileNotFoundError(f"Omniglot root not found: {root_dir}")
    images, labels, names = [], [], []
    for alphabet in sorted(os.listdir(root_dir)):
        adir = os.path.join(root_dir, alphabet)
        if not os.path.isdir(adir):
            continue
        for character in sorted(os.listdir(adir)):
            cdir = os.path.join(adir, character)
            if not os.path.isdir(cdir):
                continue
            files = _list_images(cdir)
            if not files:
                continue
            cid = len(names)
            names.append(f"{alphabet}/{character}")
            for f in files:
                images.append(_read_image(os.path.join(cdir, f), 28, "L"))
                labels.append(cid)
    if not images:
        raise FileNotFoundError(f"no images found under {root_dir}")
    ds = Dataset("omniglot", np.stack(images), np.asarray(labels), "all", names)
    splits = split_by_class(ds, min(OMNIGLOT_COUNTS["pretraining"], ds.num_classes))
    _validate_counts("omniglot", splits, OMNIGLOT_COUNTS)
    return splits


def load_mini_imagenet(root_dir):
    """Load ``root_dir/<class_name>/*.{png,jpg}`` as 84x84 RGB; first 64 classes pretrain."""
    if not os.path.isdir(root_dir):
        raise FileNotFoundError(f"Mini-ImageNet root not found: {root_dir}")
    images, labels, names = [], [], []
    for cname in sorted(os.listdir(root_dir)):
        cdir = os.path.join(root_dir, cname)
        if not os.path.isdir(cdir):
            continue
        files = _list_images(cdir)
        if not files:
            continue
        cid = len(names)
        names.append(cname)
        for f in files:
            images.append(_read_image(os.path.join(cdir, f), 84, "RGB"))
            labels.append(cid)
    if not images:
        raise FileNotFoundError(f"no images found under {root_dir}")
    ds = Dataset("mini-imagenet", np.stack(images), np.asarray(labels), "all", names)
    splits = split_by_class(ds, min(MINI_IMAGENET_COUNTS["pretraining"], ds.num_classes))
    _validate_counts("mini-imagenet", splits, MINI_IMAGENET_COUNTS)
    return splits


# -- procedural glyphs -------------------------------------------------------

JITTER = 1.6
_GRID = (np.stack(np.meshgrid(np.arange(28), np.arange(28), indexing="ij"), -1).reshape(-1, 2) + 0.5) / 28.0


def _glyph_strokes(rng):
    """Polylines (unit square coordinates) making up one class prototype."""
    strokes = []
    for _ in range(rng.integers(2, 5)):
        ctrl = rng.uniform(0.18, 0.82, size=(3, 2))
        if rng.random() < 0.4:
            ctrl[1] = 0.5 * (ctrl[0] + ctrl[2])  # straight segment
        strokes.append(ctrl)
    return strokes


def _bezier(ctrl, n=12):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * ctrl[0] + 2 * (1 - t) * t * ctrl[1] + t**2 * ctrl[2]


def _render(polylines, width):
    d2 = np.full(len(_GRID), np.inf)
    for pts in polylines:
        a, b = pts[:-1], pts[1:]
        ab = b - a
        denom = np.maximum((ab**2).sum(1), 1e-12)
        t = np.clip(((_GRID[:, None, :] - a[None]) * ab[None]).sum(-1) / denom, 0.0, 1.0)
        proj = a[None] + t[..., None] * ab[None]
        d2 = np.minimum(d2, ((_GRID[:, None, :] - proj) ** 2).sum(-1).min(1))
    ink = np.exp(-d2 / (2 * width**2))
    return (1.0 - ink).reshape(28, 28)


def _draw_sample(strokes, rng, jitter=1.0):
    angle = rng.uniform(-0.2, 0.2) * jitter
    scale = 1.0 + rng.uniform(-0.1, 0.1) * jitter
    shift = rng.uniform(-0.06, 0.06, size=2) * jitter
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    polys = []
    for ctrl in strokes:
        c = ctrl + rng.normal(0.0, 0.025 * jitter, size=ctrl.shape)
        c = (c - 0.5) @ rot.T * scale + 0.5 + shift
        polys.append(_bezier(c))
    img = _render(polys, rng.uniform(0.022, 0.032))
    img = img + rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_glyphs(num_classes, per_class, seed, split="pretraining", first_class=0, jitter=JITTER):
    """Procedural 28x28 stroke glyphs, dark ink on a white background.

    Each class is 2-4 random quadratic strokes; every sample jitters the
    control points and applies a small rotation, scale, translation and pixel
    noise. Class ``k`` depends only on (seed, k), so ids are stable across
    dataset sizes.
    """
    if num_classes < 2:
        raise InvalidArgumentError("synth_glyphs needs at least 2 classes")
    images = np.empty((num_classes * per_class, 1, 28, 28), dtype=np.float32)
    labels = np.repeat(np.arange(first_class, first_class + num_classes), per_class)
    for k in range(num_classes):
        cid = first_class + k
        strokes = _glyph_strokes(rngs.stream(seed, f"glyph/{cid}/shape"))
        sample_rng = rngs.stream(seed, f"glyph/{cid}/samples")
        for j in range(per_class):
            images[k * per_class + j, 0] = _draw_sample(strokes, sample_rng, jitter)
    names = [f"glyph{c}" for c in range(first_class + num_classes)]
    return Dataset("synthetic-glyphs", images, labels, split, names)


def synth_glyph_splits(pretraining_classes, evaluation_classes, per_class, seed, jitter=JITTER):
    """Disjoint pretraining / evaluation glyph datasets."""
    return DatasetSplits(
        synth_glyphs(pretraining_classes, per_class, seed, "pretraining", jitter=jitter),
        synth_glyphs(evaluation_classes, per_class, seed, "evaluation", pretraining_classes, jitter),
    )
