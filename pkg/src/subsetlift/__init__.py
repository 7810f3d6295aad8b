"""Lift occluded 2D keypoints to 3D with networks trained on unsupervised batch losses."""
from ._accel import backend_name
from .data import CameraModel, Dataset, DatasetManifest, Sample, read_dataset, synth_hinge_chain, write_dataset
from .evaluation import EvalReport, mpjpe, mpjpe_depth_offset, mpjpe_sequence_scale
from .models import ModelConfig, build_mixer, build_mlp, build_model, load_model, save_model
from .occlusion import occlusion_loss
from .subset_loss import SubsetLossConfig, batch_subset_loss
from .training import TrainConfig, predict, train

__version__ = "0.1.0"
