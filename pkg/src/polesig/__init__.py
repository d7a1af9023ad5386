"""Pole-anchored polar signatures for cross-session LiDAR place recognition."""

__version__ = "0.1.0"

from .scene_synth import (
    PointCloud,
    Scene,
    SynthConfig,
    generate_scene,
    read_cloud,
    read_scene,
    sample_session,
    write_cloud,
    write_scene,
)
from .pole_detector import (
    DetectorParams,
    PoleDetection,
    associate_detections,
    detect_poles,
)
from .pole_image import (
    PoleImage,
    PoleImageParams,
    canonicalize,
    read_pgm,
    render_pole_image,
    shift_columns,
    to_polar,
    write_pgm,
)
from .encoder_net import (
    AdamState,
    EncoderParams,
    adam_step,
    backward,
    forward,
    grad_check,
    init_adam,
    init_params,
    read_checkpoint,
    write_checkpoint,
)
from .training import (
    Observation,
    ObservationSet,
    SlCalibration,
    TrainConfig,
    build_cl_batch,
    build_sl_pairs,
    load_observations,
    nt_xent_loss,
    sl_bce_loss,
    split_by_pole,
    train,
)
from .retrieval_eval import (
    DescriptorDB,
    EvalReport,
    embed_all,
    evaluate,
    make_baseline_matcher,
    make_descriptor_matcher,
    rank,
    read_db,
    shift_invariant_distance,
    write_db,
)
