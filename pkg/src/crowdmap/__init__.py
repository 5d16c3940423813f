"""Crowd counting from overhead imagery via density map regression."""

from .density import (
    DensityMap,
    GaussianSpec,
    downsample_density,
    load_density,
    render_density,
    rescale_density,
    save_density,
    sigma_from_gsd,
    sigma_knn,
)
from .dataset import (
    DatasetManifest,
    ImageRecord,
    PointAnnotationSet,
    load_annotations,
    load_image,
    load_manifest,
    save_annotations,
    save_manifest,
    split,
)
from .errors import (
    AnnotationError,
    CrowdmapError,
    ManifestError,
    PretrainedWeightsError,
    RunConfigError,
    TrainingDivergedError,
)
from .patches import (
    PatchSample,
    PipelineProfile,
    Provenance,
    aerial_profile,
    axis_origins,
    cctv_profile,
    generate_patches,
    tile_image,
    tile_origins,
)
from .model import (
    ModelConfig,
    ModelOutput,
    MultiResolutionDensityNet,
    build,
    initialize,
    load_checkpoint,
    parameter_count,
    run_model,
    save_checkpoint,
)
from .losses import LossConfig, mse_map, total_loss
from .training import TrainConfig, TrainResult, train, validate
from .inference import count_from_map, predict_padded, predict_tiled
from .evaluation import (
    DetectionResult,
    MetricsReport,
    PersonDetections,
    counting_metrics,
    detect_persons,
    match_detections,
)
from .fixture import FixtureSpec, generate_fixture
from .runconfig import RunConfig, config_hash, create_run_dir, load_run_config

__version__ = "0.1.0"
