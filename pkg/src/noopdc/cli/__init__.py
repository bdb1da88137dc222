from .config import STAGES, ConfigError, RunConfig, apply_overrides, load, loads
from .pipeline import Run, RunArtifacts, run_experiment
from .probe import ProbeClassifier, ProbeError, destruction_probe, train_probe
from .report import MissingArtifactError, emit_report

__all__ = [
    "ConfigError",
    "MissingArtifactError",
    "ProbeClassifier",
    "ProbeError",
    "Run",
    "RunArtifacts",
    "RunConfig",
    "STAGES",
    "apply_overrides",
    "destruction_probe",
    "emit_report",
    "load",
    "loads",
    "run_experiment",
    "train_probe",
]
