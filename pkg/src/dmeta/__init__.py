"""Divergent-search meta-learning for unsupervised few-shot image classification."""

from dmeta.errors import DegenerateMutation, InvalidArgumentError, NumericError, SkipIteration
from dmeta.estimator import DivergentMetaLearner, FewShotClassifier
from dmeta.evaluation import EvalReport, evaluate, export_logits, fine_tune
from dmeta.inner import BehaviorRecord, InnerLoopConfig, run_inner
from dmeta.model import NetworkSpec, ParameterSet, forward, init_params, load_checkpoint, predict, save_checkpoint
from dmeta.outer import MODES, MetaConfig, MetaState, meta_step, run_pretraining

__version__ = "0.1.0"

__all__ = [
    "BehaviorRecord",
    "DegenerateMutation",
    "DivergentMetaLearner",
    "EvalReport",
    "FewShotClassifier",
    "InnerLoopConfig",
    "InvalidArgumentError",
    "MODES",
    "MetaConfig",
    "MetaState",
    "NetworkSpec",
    "NumericError",
    "ParameterSet",
    "SkipIteration",
    "evaluate",
    "export_logits",
    "fine_tune",
    "forward",
    "init_params",
    "load_checkpoint",
    "meta_step",
    "predict",
    "run_inner",
    "run_pretraining",
    "save_checkpoint",
]
