"""Slimmable VM-decomposed radiance fields trained by rank incrementation."""

from .decoder import AppearanceDecoder, lipschitz_upper_bound
from .model import RadianceModel
from .renderer import Camera, render_image
from .scene import SyntheticScene, generate_scene, load_dataset, make_dataset
from .slim_eval import SweepReport, evaluate, load, psnr, rank_sweep, save, slim
from .theory import BoundReport, check_lemma1, check_lemma2, theorem1_terms
from .train import LossHistory, TrainConfig, should_increment, train
from .vm_grid import RankState, TensorField, truncate_rank

__all__ = [
    "AppearanceDecoder",
    "BoundReport",
    "Camera",
    "LossHistory",
    "RadianceModel",
    "RankState",
    "SweepReport",
    "SyntheticScene",
    "TensorField",
    "TrainConfig",
    "check_lemma1",
    "check_lemma2",
    "evaluate",
    "generate_scene",
    "lipschitz_upper_bound",
    "load",
    "load_dataset",
    "make_dataset",
    "psnr",
    "rank_sweep",
    "render_image",
    "save",
    "should_increment",
    "slim",
    "theorem1_terms",
    "train",
    "truncate_rank",
]
