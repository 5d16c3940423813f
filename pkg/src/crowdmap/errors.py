"""Exception types shared across the toolkit."""


class CrowdmapError(Exception):
    """Base class for all toolkit errors."""


class ManifestError(CrowdmapError):
    """Manifest file missing, unparseable, or violating the schema."""


class AnnotationError(CrowdmapError):
    """Annotation file malformed or containing out-of-bounds points."""


class RunConfigError(CrowdmapError):
    """Run configuration invalid; carries every violation found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid run configuration:\n" + "\n".join(f"  - {v}" for v in self.violations))


class PretrainedWeightsError(CrowdmapError):
    """Pretrained encoder weights were requested but cannot be obtained."""


class TrainingDivergedError(CrowdmapError):
    """Loss became non-finite during training."""

    def __init__(self, step, sample_indices, message):
        self.step = step
        self.sample_indices = list(sample_indices)
        super().__init__(message)
