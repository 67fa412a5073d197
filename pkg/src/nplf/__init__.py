"""Light fields on sparse point clouds: one radiance evaluation per ray."""

from .geometry import (
    Ray,
    generate_rays,
    positional_encode,
    ray_point_angles,
    ray_point_distance,
)
from .light_field import LightFieldHead, image_loss, predict_color
from .model import PointLightField
from .point_encoder import (
    CubeProjection,
    DepthViewEncoder,
    PointFeatureSet,
    encode_views,
    gather_point_features,
    normalize_cloud,
    project_to_planes,
    sample_cloud,
)
from .ray_aggregation import (
    RayAttention,
    RaySelection,
    aggregate_heuristic,
    attend,
    build_descriptors,
    compute_d_inf,
    select_k_closest,
)
from .scene_io import (
    CameraView,
    Frame,
    PointCloud,
    RunConfig,
    Scene,
    load_scene,
    save_scene,
    split_frames,
)
from .synth_scenes import SceneSpec, generate_scene, render_oracle
from .training import (
    EvalReport,
    ModelState,
    Trainer,
    evaluate,
    load_checkpoint,
    new_state,
    run_ablation,
    save_checkpoint,
    train_step,
)

__version__ = "0.1.0"
