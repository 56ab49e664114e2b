"""Biplanar X-ray to CT-slice reconstruction with perspective feature resampling."""
from .drr import DRRImage, cast_ray, render_drr, render_pair
from .errors import (
    BiplanarError, BoundsError, DataError, FormatError, GeometryError, NumericError, ParameterError,
    ProjectionError, TrainingError, VersionError,
)
from .geometry import (
    CameraPose, ProjectionPoint, make_biplanar_rig, make_pose, project_point, project_point_orthogonal,
)
from .metrics import psnr, ssim
from .model import ModelConfig, SliceReconstructor, load_model, positional_encoding
from .resample import bilinear_sample, resample_backward, resample_local_features, resample_orthogonal
from .volume import (
    PhantomSpec, SliceSpec, Volume, extract_slice, generate_phantom, load_volume, save_volume,
)

__version__ = "0.1.0"
