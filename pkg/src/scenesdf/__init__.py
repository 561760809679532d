"""Semi-supervised implicit scene completion from sparse point clouds.

A sparse-convolutional encoder turns a voxelized sparse scan into a dense
shape-embedding volume; a sine-activated MLP conditioned on trilinearly
sampled embeddings represents the scene's signed distance field; training
enforces boundary-value constraints (unit gradient, surface values and
normals, off-surface repulsion) without ground-truth distances in free space.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Value
from .comnet import ComNetConfig, comnet_forward, completion_loss
from .config import RunConfig, load_config
from .generator import MlpSpec, gen_forward, siren_init
from .model import FieldModel, ModelConfig
from .sampling import (ShapeEmbeddingVolume, positional_encode,
                       trilinear_backward, trilinear_sample)
from .scenes import SyntheticScene, generate_scene, lidar_sample, voxelize_gt
from .sparse import SparseTensor, sparse_conv, generative_deconv, voxelize
from .training import adam_step, sample_points, sdf_loss, train

__all__ = [
    "Tape", "Value", "ComNetConfig", "comnet_forward", "completion_loss",
    "RunConfig", "load_config", "MlpSpec", "gen_forward", "siren_init",
    "FieldModel", "ModelConfig", "ShapeEmbeddingVolume", "positional_encode",
    "trilinear_backward", "trilinear_sample", "SyntheticScene",
    "generate_scene", "lidar_sample", "voxelize_gt", "SparseTensor",
    "sparse_conv", "generative_deconv", "voxelize", "adam_step",
    "sample_points", "sdf_loss", "train",
]
