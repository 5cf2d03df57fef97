"""Domain-generalized wireless sensing.

Modules: ``core`` (types, config, I/O), ``sigproc`` (front ends), ``synth``
(benchmarks), ``vae`` (virtual-data generators), ``nets`` (extractors and
classifiers), ``episodic`` (training engine), ``evalharness`` (protocols and
metrics) and ``cli``.
"""

from .core import (ArgumentError, CorruptionError, DataError, DGSenseError, DomainDataset, FormatError,
                   InvariantViolation, Modality, ModalityKind, NoActivityError, Sample, SourceSet, SplitSpec,
                   StateError, TrainConfig, TrainingError, load_dataset, save_dataset)

__version__ = "0.1.0"

__all__ = [
    "ArgumentError", "CorruptionError", "DataError", "DGSenseError", "DomainDataset", "FormatError",
    "InvariantViolation", "Modality", "ModalityKind", "NoActivityError", "Sample", "SourceSet", "SplitSpec",
    "StateError", "TrainConfig", "TrainingError", "load_dataset", "save_dataset",
]
