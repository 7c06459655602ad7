"""Model container tying the fast stack, language head, and alignment bank.

Parameters live in a flat name->Tensor dict so the optimizer, checkpoints,
and gradient tests can treat them uniformly.  Alignment tensors exist only
when ``align_enabled``; the fast-stack and language parameters are drawn
from their own seeded streams, so the shared parts are bitwise identical
between an aligned model and its ablation twin.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import alignment, language, stack, vocab
from .autodiff import Tensor
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .language import Context, DecoderOutput
from .stack import StackOutput
from .world import Scene, WorldConfig, render_bev


@dataclass
class ModelConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    d_q: int = 32
    d_l: int = 32
    d_e: int = 32
    d_ff: int = 64
    n2: int = 8
    d2: int = 16
    n3: int = 8
    d3: int = 16
    layers: int = 2
    max_seq: int = 64
    pool: int = 4
    embed_seed: int = 20240501


class Model:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor], align_enabled: bool):
        self.cfg = cfg
        self.params = params
        self.align_enabled = align_enabled
        self.embedder = alignment.TextEmbedder(vocab.vocab_size(), cfg.d_e, cfg.embed_seed)

    # ------------------------------------------------------------------
    # forward passes
    # ------------------------------------------------------------------

    def bev_tensor(self, scene: Scene) -> Tensor:
        return Tensor(render_bev(scene, self.cfg.world))

    def fast_forward(self, scene: Scene, bev: Tensor | None = None) -> StackOutput:
        if bev is None:
            bev = self.bev_tensor(scene)
        return stack.stack_forward(self.params, self.cfg, scene, bev)

    def mix(self, out: StackOutput) -> Context:
        return language.token_mixer(self.params, self.cfg, out)

    def teacher_logits(self, ctx: Context, prompt: list[int], target: list[int]) -> Tensor:
        return language.teacher_forced_logits(self.params, self.cfg, ctx.all_rows,
                                              prompt, target)

    def decode(self, ctx: Context, prompt: list[int], max_len: int) -> DecoderOutput:
        return language.greedy_decode(self.params, self.cfg, ctx.all_rows, prompt, max_len)

    # ------------------------------------------------------------------
    # parameter plumbing
    # ------------------------------------------------------------------

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def save(self, path) -> None:
        save_tensors(self.named_arrays(), path)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return sorted(self.params.items())


def build_model(cfg: ModelConfig, align_enabled: bool, seed: int) -> Model:
    params: dict[str, Tensor] = {}
    params.update(stack.init_stack_params(cfg, np.random.default_rng([seed, 0])))
    params.update(language.init_lang_params(cfg, np.random.default_rng([seed, 1])))
    if align_enabled:
        params.update(alignment.init_align_params(cfg, np.random.default_rng([seed, 2])))
    return Model(cfg, params, align_enabled)


def load_model(cfg: ModelConfig, path) -> Model:
    arrays = load_tensors(path)
    align_enabled = any(name.startswith("align/") for name in arrays)
    reference = build_model(cfg, align_enabled, seed=0)
    missing = sorted(set(reference.params) - set(arrays))
    extra = sorted(set(arrays) - set(reference.params))
    if missing or extra:
        raise CheckpointError(
            f"{path}: parameter names do not match this configuration "
            f"(missing {missing[:3]}, unexpected {extra[:3]})")
    for name, tensor in reference.params.items():
        if arrays[name].shape != tensor.data.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: "
                f"{arrays[name].shape} vs {tensor.data.shape}")
        tensor.data = arrays[name]
    return reference
