"""Finite-difference verification of every loss against reverse mode.

Each loss is rebuilt from leaf tensors many times over random
configurations; analytic gradients from :func:`backward` are compared
per coordinate against central differences with the relative error
``|a - fd| / max(1, |a|)``.  Tensors up to ``coord_cap`` entries are checked
exhaustively through :func:`finite_diff_grad`; larger ones (the
vocabulary-wide projection weights) are checked on a seeded random subset of
coordinates to keep the suite inside its runtime budget.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from . import alignment, vocab
from .autodiff import Tensor, backward, finite_diff_grad, reshape
from .language import lm_loss
from .model import ModelConfig
from .stack import task_loss
from .world import WorldConfig, generate_scene

N_AGENT_GRID = (1, 2, 4)


@dataclass
class LossCheck:
    loss: str
    configs: int
    coords: int
    max_rel_err: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= self.tolerance


def _rel_err(analytic: float, fd: float) -> float:
    return abs(analytic - fd) / max(1.0, abs(analytic))


def _check_leaves(build_loss, leaves: dict[str, Tensor], rng: np.random.Generator,
                  h: float, coord_cap: int) -> tuple[float, int]:
    loss = build_loss()
    grad_map = backward(loss, leaves=list(leaves.values()))
    worst = 0.0
    checked = 0
    for leaf in leaves.values():
        analytic = grad_map[leaf]
        base = leaf.data.copy()

        def f(arr, leaf=leaf):
            leaf.data = arr
            return build_loss().item()

        if leaf.data.size <= coord_cap:
            fd = finite_diff_grad(f, base, h)
            for idx in np.ndindex(*base.shape):
                worst = max(worst, _rel_err(float(analytic[idx]), float(fd[idx])))
                checked += 1
        else:
            flat = rng.choice(leaf.data.size, size=coord_cap, replace=False)
            for i in sorted(int(j) for j in flat):
                idx = np.unravel_index(i, base.shape)
                xp = base.copy()
                xm = base.copy()
                xp[idx] += h
                xm[idx] -= h
                fd_val = (f(xp) - f(xm)) / (2.0 * h)
                worst = max(worst, _rel_err(float(analytic[idx]), fd_val))
                checked += 1
        leaf.data = base
    return worst, checked


def _random_tokens(rng: np.random.Generator, n: int) -> list[int]:
    return [int(t) for t in rng.integers(0, vocab.vocab_size(), size=n)]


def _case_task(rng: np.random.Generator, n_a: int):
    wcfg = WorldConfig(n_agents=n_a)
    scene = generate_scene(int(rng.integers(1 << 30)), n_a, wcfg)
    t2 = 2 * wcfg.t_f
    v_agents = Tensor(rng.normal(size=(n_a, t2)), requires_grad=True)
    v_ego = Tensor(rng.normal(size=(1, t2)), requires_grad=True)

    def build():
        out = SimpleNamespace(v_agents=reshape(v_agents, (n_a, wcfg.t_f, 2)),
                              v_ego=reshape(v_ego, (wcfg.t_f, 2)))
        return task_loss(out, scene)

    return build, {"v_agents": v_agents, "v_ego": v_ego}


def _case_lm(rng: np.random.Generator, n_a: int):
    length = 2 + n_a
    logits = Tensor(rng.normal(size=(length, vocab.vocab_size())), requires_grad=True)
    target = _random_tokens(rng, length)

    def build():
        return lm_loss(logits, target)

    return build, {"logits": logits}


def _head_leaves(params: dict, name: str) -> dict[str, Tensor]:
    return {key: params[key] for key in params if key.startswith(f"align/{name}/")}


def _align_params(rng: np.random.Generator) -> dict[str, Tensor]:
    return alignment.init_align_params(ModelConfig(), np.random.default_rng(
        int(rng.integers(1 << 30))))


def _case_p1a(rng: np.random.Generator, n_a: int):
    cfg = ModelConfig()
    params = _align_params(rng)
    embedder = alignment.TextEmbedder(vocab.vocab_size(), cfg.d_e, seed=int(rng.integers(1 << 30)))
    q_instance = Tensor(rng.normal(size=(n_a, cfg.d_l)), requires_grad=True)
    captions = [_random_tokens(rng, int(rng.integers(3, 9))) for _ in range(n_a)]

    def build():
        return alignment.p1a_loss(params, q_instance, captions, embedder)

    leaves = {"q_instance": q_instance}
    leaves.update(_head_leaves(params, "phi_p1"))
    return build, leaves


def _case_p2a(rng: np.random.Generator, n_a: int):
    cfg = ModelConfig()
    params = _align_params(rng)
    t2 = 2 * cfg.world.t_f
    tau = float(rng.uniform(0.07, 1.0))
    v_flat = Tensor(rng.normal(size=(n_a, t2)), requires_grad=True)
    logit_means = Tensor(rng.normal(size=(n_a, vocab.vocab_size())), requires_grad=True)

    def build():
        return alignment.p2a_loss(params, v_flat, logit_means, tau)

    leaves = {"v_agents": v_flat, "logits": logit_means, "p2": params["align/p2"]}
    leaves.update(_head_leaves(params, "phi_pred"))
    leaves.update(_head_leaves(params, "phi_llm2"))
    return build, leaves


def _case_p3a(rng: np.random.Generator, n_a: int):
    cfg = ModelConfig()
    params = _align_params(rng)
    t2 = 2 * cfg.world.t_f
    v_ego = Tensor(rng.normal(size=(1, t2)), requires_grad=True)
    logit_mean = Tensor(rng.normal(size=(1, vocab.vocab_size())), requires_grad=True)

    def build():
        return alignment.p3a_loss(params, v_ego, logit_mean)

    leaves = {"v_ego": v_ego, "logits": logit_mean, "p3": params["align/p3"]}
    leaves.update(_head_leaves(params, "phi_plan"))
    leaves.update(_head_leaves(params, "phi_llm3"))
    return build, leaves


_CASES = {
    "stack_task": _case_task,
    "lm": _case_lm,
    "p1a": _case_p1a,
    "p2a": _case_p2a,
    "p3a": _case_p3a,
}


def run_suite(seed: int = 0, configs_per_loss: int = 21, tolerance: float = 1e-5,
              h: float = 1e-5, coord_cap: int = 96) -> tuple[list[LossCheck], float]:
    """Check every loss over random configurations cycling N_a through 1/2/4."""
    start = time.monotonic()
    checks = []
    for case_idx, (name, case) in enumerate(_CASES.items()):
        rng = np.random.default_rng([seed, 17, case_idx])
        worst = 0.0
        coords = 0
        for k in range(configs_per_loss):
            n_a = N_AGENT_GRID[k % len(N_AGENT_GRID)]
            build, leaves = case(rng, n_a)
            err, n_coords = _check_leaves(build, leaves, rng, h, coord_cap)
            worst = max(worst, err)
            coords += n_coords
        checks.append(LossCheck(loss=name, configs=configs_per_loss,
                                coords=coords, max_rel_err=worst, tolerance=tolerance))
    return checks, time.monotonic() - start
