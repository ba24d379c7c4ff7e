"""Two-stage 4D scene synthesis engine.

Static stage: a canonical hash-grid radiance field optimized under
combined 2D and multi-view guidance. Dynamic stage: a frozen canonical
field animated by a 4D hash-grid deformation field optimized under video
guidance with a displacement total-variation regularizer. All guidance
flows through pluggable providers (oracle/analytic for verification, a
wire-protocol client for external diffusion services).
"""

from .config import TrainConfig, load_config, preset_config, toy_config
from .fields import DeformationField, CanonicalField, BackgroundShader, ModelConfig, SceneModel
from .gridenc import GridConfig, HashGridEncoding
from .grad import FDReport, ParamTensor, Tape, fd_check
from .guidance import (
    AnalyticProvider,
    EchoProvider,
    GuidanceRequest,
    GuidanceResponse,
    NoiseSchedule,
    OracleProvider,
    RemoteProvider,
    sds_reconstruction_loss,
)
from .losses import reference_view_loss, stage1_loss, stage2_loss, tv_loss
from .renderer import (
    Camera,
    CameraRanges,
    RenderOutput,
    VideoBatch,
    four_view_cameras,
    render_frame,
    render_video,
    sample_camera,
    sample_time_window,
)
from .trainer import AdamState, adam_step, load_checkpoint, save_checkpoint, train_dynamic, train_static

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AnalyticProvider",
    "BackgroundShader",
    "Camera",
    "CameraRanges",
    "CanonicalField",
    "DeformationField",
    "EchoProvider",
    "FDReport",
    "GridConfig",
    "GuidanceRequest",
    "GuidanceResponse",
    "HashGridEncoding",
    "ModelConfig",
    "NoiseSchedule",
    "OracleProvider",
    "ParamTensor",
    "RemoteProvider",
    "RenderOutput",
    "SceneModel",
    "Tape",
    "TrainConfig",
    "VideoBatch",
    "adam_step",
    "fd_check",
    "four_view_cameras",
    "load_checkpoint",
    "load_config",
    "preset_config",
    "reference_view_loss",
    "render_frame",
    "render_video",
    "sample_camera",
    "sample_time_window",
    "save_checkpoint",
    "sds_reconstruction_loss",
    "stage1_loss",
    "stage2_loss",
    "toy_config",
    "train_dynamic",
    "train_static",
    "tv_loss",
]
