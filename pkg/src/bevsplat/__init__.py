"""Compact BEV-point scene representation rendered with Gaussian splatting."""

from .bev_core import BevPatch, InstanceAttrs, instance_bboxes, instantiate, load_patch, make_patch
from .camera import CameraModel, look_at
from .config import PipelineConfig
from .decoder import AttributeConfig, GaussianSet, assemble_gaussians, decode, make_weights
from .errors import ContractError, StageError
from .features import StyleTable, interpolate_styles, positional_encode, scene_encode
from .pipeline import run_pipeline, stats_scaling
from .pointgen import BevPointCloud, build_occupancy, extrude, relative_coords, visibility_cull
from .raster import l1_loss, project, rasterize
from .serialize import reorder, serialize_hilbert, serialize_linear

__version__ = "0.1.0"
