"""Cross-modal alignment: pooled prompt-token embeddings and the three losses.

Attention pooling maps arbitrary feature rows to convex combinations of a
learnable prompt bank, giving both modalities a shared target space.  The
perception loss regresses fused instance tokens onto frozen text embeddings;
the prediction loss is a symmetric InfoNCE over per-agent pairs; the
planning loss is a negative cosine at scene level.  All of this exists only
at training time.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .autodiff import DomainError, ShapeMismatch, Tensor, matmul, reshape, softmax
from .nn import mlp, normal, zeros

_NORM_EPS = 1e-12

_ROUTES = {
    "perception": frozenset({"p1a"}),
    "prediction": frozenset({"p2a"}),
    "planning": frozenset({"p3a"}),
}


class TextEmbedder:
    """Frozen bag-of-tokens embedder standing in for a pretrained text encoder.

    The table is seeded once and never updated; distinct token sets map to
    near-orthogonal unit vectors in expectation, which is all the perception
    loss needs from its target space.
    """

    def __init__(self, n_tokens: int, dim: int, seed: int):
        rng = np.random.default_rng(seed)
        self.table = rng.normal(0.0, 1.0, size=(n_tokens, dim))
        self.table.setflags(write=False)

    def embed(self, tokens) -> np.ndarray:
        tokens = list(tokens)
        if not tokens:
            raise DomainError("text_embed: empty token sequence")
        mean = self.table[np.asarray(tokens, dtype=np.int64)].mean(axis=0)
        return mean / np.linalg.norm(mean)

    def digest(self) -> str:
        return hashlib.sha256(self.table.tobytes()).hexdigest()


def init_align_params(cfg, rng: np.random.Generator) -> dict[str, Tensor]:
    from . import vocab

    v = vocab.vocab_size()
    t2 = 2 * cfg.world.t_f
    hidden = 32

    def head(name: str, d_in: int, d_out: int) -> dict[str, Tensor]:
        # wide second layer so pooling scores spread at init; near-uniform
        # pooling would start every scene at cosine ~1 and leave the
        # consistency probe nothing to improve
        return {
            f"align/{name}/w1": normal(rng, (d_in, hidden), 1.0 / math.sqrt(d_in)),
            f"align/{name}/b1": zeros((1, hidden)),
            f"align/{name}/w2": normal(rng, (hidden, d_out), 0.25),
            f"align/{name}/b2": zeros((1, d_out)),
        }

    p: dict[str, Tensor] = {
        "align/p2": normal(rng, (cfg.n2, cfg.d2), 1.0),
        "align/p3": normal(rng, (cfg.n3, cfg.d3), 1.0),
    }
    p.update(head("phi_p1", cfg.d_l, cfg.d_e))
    p.update(head("phi_pred", t2, cfg.d2))
    p.update(head("phi_llm2", v, cfg.d2))
    p.update(head("phi_plan", t2, cfg.d3))
    p.update(head("phi_llm3", v, cfg.d3))
    return p


def apply_head(params: dict, name: str, x: Tensor) -> Tensor:
    return mlp(x, params[f"align/{name}/w1"], params[f"align/{name}/b1"],
               params[f"align/{name}/w2"], params[f"align/{name}/b2"])


def attention_pool(bank: Tensor, features: Tensor, phi) -> Tensor:
    """Softmax-attended convex combination of prompt-bank rows.

    ``phi`` projects the feature rows into bank space; each output row is
    sum_i alpha_i w_i with alpha the softmax of the projected row's dot
    products against the bank rows.
    """
    projected = phi(features)
    if projected.shape[-1] != bank.shape[-1]:
        raise ShapeMismatch("attention_pool", projected.shape, bank.shape)
    weights = softmax(matmul(projected, bank.T))
    return matmul(weights, bank)


def pool(params: dict, bank_name: str, head_name: str, features: Tensor) -> Tensor:
    bank = params[f"align/{bank_name}"]
    return attention_pool(bank, features, lambda h: apply_head(params, head_name, h))


def _row_reciprocal_norms(z: Tensor) -> Tensor:
    # 1/x composed from exp(-log x); norms are strictly positive after the guard
    return ((z.l2_norm() + _NORM_EPS).log() * -1.0).exp()


def normalize_rows(z: Tensor) -> Tensor:
    recip = reshape(_row_reciprocal_norms(z), (z.shape[0], 1))
    return z * matmul(recip, Tensor(np.ones((1, z.shape[1]))))


def clip_contrastive(z_a: Tensor, z_b: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE over the cosine-similarity matrix of paired rows."""
    if tau <= 0.0:
        raise DomainError(f"clip_contrastive: tau must be positive, got {tau}")
    if z_a.shape != z_b.shape:
        raise ShapeMismatch("clip_contrastive", z_a.shape, z_b.shape)
    n = z_a.shape[0]
    sim = matmul(normalize_rows(z_a), normalize_rows(z_b).T) * (1.0 / tau)
    eye = Tensor(np.eye(n))
    ce_rows = -((softmax(sim) * eye).sum(axis=1).log().mean())
    ce_cols = -((softmax(sim.T) * eye).sum(axis=1).log().mean())
    return (ce_rows + ce_cols) * 0.5


def negative_cosine(z_a: Tensor, z_b: Tensor) -> Tensor:
    """Negative cosine similarity with an epsilon guard on both norms."""
    if z_a.shape != z_b.shape or z_a.shape[0] != 1:
        raise ShapeMismatch("negative_cosine", z_a.shape, z_b.shape)
    dot = (z_a * z_b).sum()
    recip = _row_reciprocal_norms(z_a) * _row_reciprocal_norms(z_b)
    return -(dot * recip.sum())


def p1a_loss(params: dict, q_instance: Tensor, captions: list[list[int]],
             embedder: TextEmbedder) -> Tensor:
    """Element-mean squared error between projected instance tokens and
    frozen caption embeddings, agent k against caption k."""
    if q_instance.shape[0] != len(captions):
        raise ShapeMismatch("p1a_loss", (q_instance.shape[0],), (len(captions),))
    targets = Tensor(np.stack([embedder.embed(c) for c in captions]))
    projected = apply_head(params, "phi_p1", q_instance)
    return (projected - targets).square().mean()


def p2a_loss(params: dict, v_agents_flat: Tensor, agent_logit_means: Tensor,
             tau: float) -> Tensor:
    """Agent-level contrastive alignment of forecasts and answer logits.

    ``agent_logit_means`` holds one time-averaged teacher-forced logits row
    per agent, in agent order.
    """
    if v_agents_flat.shape[0] != agent_logit_means.shape[0]:
        raise ShapeMismatch("p2a_loss", v_agents_flat.shape, agent_logit_means.shape)
    z_pred = pool(params, "p2", "phi_pred", v_agents_flat)
    z_llm = pool(params, "p2", "phi_llm2", agent_logit_means)
    return clip_contrastive(z_pred, z_llm, tau)


def p3a_loss(params: dict, v_ego_flat: Tensor, logit_mean: Tensor) -> Tensor:
    """Scene-level negative cosine between pooled plan and pooled logits."""
    z_plan = pool(params, "p3", "phi_plan", v_ego_flat)
    z_llm = pool(params, "p3", "phi_llm3", logit_mean)
    return negative_cosine(z_plan, z_llm)


def route(category: str) -> frozenset[str]:
    """Alignment losses active for a prompt category (the LM loss is always on)."""
    active = _ROUTES.get(category)
    if active is None:
        raise DomainError(f"route: unknown prompt category {category!r}")
    return active
