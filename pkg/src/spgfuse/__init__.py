"""Radar-camera fusion on semantic point grids.

The package is organized as a library of small numpy modules; the most
common entry points are re-exported here.  See README.md for the file
formats and the `spgfuse` command line.
"""

from .augment import WeatherParams, apply_weather
from .dataset import Dataset, Frame, load_dataset, write_dataset
from .detect import (
    AnchorSet,
    DetectionSet,
    LossParams,
    assign_targets,
    decode_predictions,
    focal_loss,
    make_anchors,
    nms,
    smooth_l1,
    total_loss,
)
from .evalkit import EvalReport, average_precision, match_detections, run_eval
from .geometry import (
    BevBox,
    CalibrationSet,
    CameraIntrinsics,
    Point3,
    RigidTransform,
    polygon_intersection_area,
    project_to_pixel,
    rotated_iou,
    transform_point,
)
from .nnet import (
    AdamState,
    HeadOutputs,
    ModelConfig,
    ModelWeights,
    TrainConfig,
    adam_step,
    gradient_check,
    init_weights,
    load_checkpoint,
    model_backward,
    model_forward,
    save_checkpoint,
)
from .radar_io import (
    CfarConfig,
    IntensityMap,
    RadarPoint,
    RadarPointCloud,
    cfar_detect,
    parse_intensity_map,
    parse_labels,
    parse_point_cloud,
)
from .spg import (
    GridSpec,
    NormConfig,
    SemanticMask,
    SpgTensor,
    assemble_spg,
    associate_semantics,
    bin_point,
    encode_point_features,
)
from .synthgen import Scene, SceneConfig, generate_scene
from .training import train_detector

__version__ = "0.1.0"
