"""nswave: compressed solution operators via the nonstandard wavelet form.

Library + CLI implementing (i) periodic Daubechies multiresolution
transforms, (ii) construction/truncation/fast application of the
nonstandard form of a dense operator, (iii) a from-scratch differentiable
layer core, (iv) the meta-model mapping a parameter field eta to a
compressed operator, (v) reference elliptic / radiative-transfer solvers
for data generation, and (vi) the dataset/training/evaluation pipeline.
"""

from . import container, model, net, nsform, pipeline, solvers, wavelets
from .errors import (
    ConditioningError,
    ConfigError,
    DataError,
    DomainError,
    InferenceError,
    ShapeError,
    StateError,
    TrainingError,
)

__all__ = [
    "wavelets",
    "nsform",
    "net",
    "model",
    "solvers",
    "pipeline",
    "container",
    "ConfigError",
    "ShapeError",
    "DomainError",
    "StateError",
    "DataError",
    "TrainingError",
    "ConditioningError",
    "InferenceError",
]
