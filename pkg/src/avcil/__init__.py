"""Audio-visual class-incremental learning over precomputed embeddings.

The package is self-contained: a reverse-mode autodiff core (`diffmath`),
the audio-guided attention model (`model`), the training objectives
(`objectives`), synthetic feature datasets with a binary interchange format
(`datasets`), the incremental protocol (`protocol`), baseline strategies
(`baselines`), evaluation metrics (`metrics`), and the experiment harness
plus CLI (`harness`, `cli`).
"""

__version__ = "0.1.0"

from .errors import (ConfigError, ContractError, FormatError,
                     NumericDomainError, TrainingDiverged, VerificationFailure)

__all__ = [
    "__version__",
    "ConfigError", "ContractError", "FormatError", "NumericDomainError",
    "TrainingDiverged", "VerificationFailure",
]
