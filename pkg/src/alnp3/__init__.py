"""Desk-scale fast/slow driving stack with cross-modal alignment training."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, finite_diff_grad, graph_size, no_grad
from .model import Model, ModelConfig, build_model, load_model
from .world import Scene, WorldConfig, build_corpus, generate_scene, render_bev

__all__ = [
    "Tensor",
    "backward",
    "finite_diff_grad",
    "graph_size",
    "no_grad",
    "Model",
    "ModelConfig",
    "build_model",
    "load_model",
    "Scene",
    "WorldConfig",
    "build_corpus",
    "generate_scene",
    "render_bev",
    "__version__",
]
