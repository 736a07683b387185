"""Datasets, samplers and augmentation."""

from dmeta.data.augment import AugmentParams, apply, augment, draw_params
from dmeta.data.datasets import (
    Dataset,
    DatasetSplits,
    load_mini_imagenet,
    load_omniglot,
    synth_glyph_splits,
    synth_glyphs,
)
from dmeta.data.sampling import (
    EvalTask,
    TaskBatch,
    fixed_random_labels,
    sample_ambiguous_batch,
    sample_class_task,
    sample_fixed_label_task,
    sample_random_label_task,
    sample_supervised_task,
    sample_umtra_task,
    unique_class_probability,
)

__all__ = [
    "AugmentParams",
    "Dataset",
    "DatasetSplits",
    "EvalTask",
    "TaskBatch",
    "apply",
    "augment",
    "draw_params",
    "fixed_random_labels",
    "load_mini_imagenet",
    "load_omniglot",
    "sample_ambiguous_batch",
    "sample_class_task",
    "sample_fixed_label_task",
    "sample_random_label_task",
    "sample_supervised_task",
    "sample_umtra_task",
    "synth_glyph_splits",
    "synth_glyphs",
    "unique_class_probability",
]
