"""Toy-scale latent world model for driving: synthetic scenes, a causal
spatio-temporal encoder, reconstruction decoders, flow-matching generators
and planning evaluation."""

from .config import TrainConfig, load_config
from .decoders import ReconOutput, decode_appearance, decode_ego, decode_geometry
from .encoder import EncoderConfig, LatentEncoder, encode_sequence
from .evaluation import EvalReport, chamfer, evaluate_model, smoothness_report, toy_pdms
from .generation import predict_next_frame, predict_trajectory, rollout
from .model import ModelConfig, Toggles, WorldModel
from .objectives import (ep_statistic, loss_ego, loss_uncertainty_map, loss_vis, sigreg,
                         total_objective, verify_kl_decomposition)
from .pipeline import (CheckpointError, load_checkpoint, run_ablation, save_checkpoint, train_stage1,
                       train_stage2)
from .scenario import GeneratorConfig, SceneSequence, generate_scene, read_dataset, write_dataset

__version__ = "0.1.0"
