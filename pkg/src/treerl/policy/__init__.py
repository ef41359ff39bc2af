from .base import Backend, Continuation, FinishReason, GenParams, derive_seed, mix64, stable_hash
from .chainsum import ChainSumTask, exact_accuracy, greedy_completion
from .fixedlen import FixedLengthBackend
from .http import HttpBackend
from .synthetic import (
    LastTokensReader,
    SynthBackend,
    SynthPolicy,
    apply_policy_gradient,
    surrogate_objective,
)

__all__ = [
    "Backend", "Continuation", "FinishReason", "GenParams", "derive_seed", "mix64", "stable_hash",
    "ChainSumTask", "exact_accuracy", "greedy_completion", "FixedLengthBackend", "HttpBackend",
    "LastTokensReader", "SynthBackend", "SynthPolicy", "apply_policy_gradient", "surrogate_objective",
]
