"""Density-map counting of objects in overhead imagery.

Dot annotations become Gaussian ground-truth density maps whose integral
equals the object count; a small UNet regresses those maps from image
patches, and integrating its prediction counts the objects in a frame.
"""

from .annotations import (
    AnnotatedImage,
    BoxAnnotation,
    DotAnnotation,
    box_to_dot,
    dots_to_raster,
    parse_box_jsonl,
    parse_dot_csv,
    write_dot_csv,
)
from .density import (
    DensityMap,
    KernelSpec,
    adaptive_density_map,
    gaussian_density_map,
    integrate_count,
    knn_avg_distance,
    read_density_map,
    render_heatmap,
    write_density_map,
)
from .errors import (
    AnnotationParseError,
    CheckpointError,
    ConfigError,
    DensecountError,
    FormatError,
    InsufficientNeighborsError,
    TrainingDivergedError,
    ValidationError,
)
from .pipeline import (
    CountRecord,
    EpochLog,
    MetricsReport,
    SplitSpec,
    TrainConfig,
    compare_report,
    evaluate,
    load_dataset,
    load_image,
    make_splits,
    sample_patches,
    train,
    write_training_log,
)
from .synthgen import SceneSpec, generate_dataset, generate_scene
from .unet import (
    UNetConfig,
    UNetModel,
    build_model,
    load_checkpoint,
    parameter_count,
    predict_count,
    save_checkpoint,
    unet_backward,
    unet_forward,
)

__version__ = "0.1.0"
