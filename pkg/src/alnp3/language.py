"""Slow head: token mixer into language space plus a tiny causal decoder.

The mixer projects the fast stack's products to a shared language width and
the decoder cross-attends over the concatenated context rows.  Decoding is
greedy only; alignment losses consume teacher-forced logits from the same
pass as the language-modeling loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import vocab
from .autodiff import (DomainError, ShapeMismatch, Tensor, concat_last, gather_rows,
                       matmul, reshape, softmax)
from .nn import causal_mask, linear, mlp, normal, vconcat, zeros
from .stack import StackOutput


@dataclass
class Context:
    """Projected driving context consumed by the decoder."""

    b_ctx: Tensor  # (K_b, D_l)
    q_instance: Tensor  # (N_a, D_l)
    q_ego_ctx: Tensor  # (1, D_l)
    v_plan_ctx: Tensor  # (1, D_l)
    all_rows: Tensor  # (K_b + N_a + 2, D_l)


@dataclass
class DecoderOutput:
    logits: np.ndarray  # (L, V), one row per generated token
    tokens: list[int]


def init_lang_params(cfg, rng: np.random.Generator) -> dict[str, Tensor]:
    d_l, d_ff, d_q = cfg.d_l, cfg.d_ff, cfg.d_q
    v = vocab.vocab_size()
    t_f = cfg.world.t_f
    s = 1.0 / math.sqrt(d_l)
    p = {
        "lang/mixer/inst_w1": normal(rng, (2 * d_q, d_ff), 1.0 / math.sqrt(2 * d_q)),
        "lang/mixer/inst_b1": zeros((1, d_ff)),
        "lang/mixer/inst_w2": normal(rng, (d_ff, d_l), 1.0 / math.sqrt(d_ff)),
        "lang/mixer/inst_b2": zeros((1, d_l)),
        "lang/mixer/bev_w": normal(rng, (cfg.world.channels + 2, d_l),
                                   1.0 / math.sqrt(cfg.world.channels + 2)),
        "lang/mixer/bev_b": zeros((1, d_l)),
        "lang/mixer/ego_w": normal(rng, (d_q, d_l), 1.0 / math.sqrt(d_q)),
        "lang/mixer/ego_b": zeros((1, d_l)),
        "lang/mixer/plan_w": normal(rng, (2 * t_f, d_l), 1.0 / math.sqrt(2 * t_f)),
        "lang/mixer/plan_b": zeros((1, d_l)),
        "lang/tok_embed": normal(rng, (v, d_l), 0.5),
        "lang/pos_embed": normal(rng, (cfg.max_seq, d_l), 0.1),
        "lang/out_w": normal(rng, (d_l, v), s),
        "lang/out_b": zeros((1, v)),
    }
    for layer in range(cfg.layers):
        pre = f"lang/layer{layer}"
        for kind in ("self", "cross"):
            for mat in ("wq", "wk", "wv", "wo"):
                p[f"{pre}/{kind}_{mat}"] = normal(rng, (d_l, d_l), s)
            p[f"{pre}/{kind}_bo"] = zeros((1, d_l))
        p[f"{pre}/ffn_w1"] = normal(rng, (d_l, d_ff), s)
        p[f"{pre}/ffn_b1"] = zeros((1, d_ff))
        p[f"{pre}/ffn_w2"] = normal(rng, (d_ff, d_l), 1.0 / math.sqrt(d_ff))
        p[f"{pre}/ffn_b2"] = zeros((1, d_l))
    return p


def token_mixer(params: dict, cfg, out: StackOutput) -> Context:
    """Project BEV patches, fused instance tokens, ego token, and plan."""
    q_instance = mlp(concat_last([out.q_track, out.q_motion]),
                     params["lang/mixer/inst_w1"], params["lang/mixer/inst_b1"],
                     params["lang/mixer/inst_w2"], params["lang/mixer/inst_b2"])
    b_ctx = linear(out.patch_in, params["lang/mixer/bev_w"], params["lang/mixer/bev_b"])
    q_ego_ctx = linear(out.ego_feat, params["lang/mixer/ego_w"], params["lang/mixer/ego_b"])
    v_plan_ctx = linear(out.v_ego_flat, params["lang/mixer/plan_w"], params["lang/mixer/plan_b"])
    all_rows = vconcat([b_ctx, q_instance, q_ego_ctx, v_plan_ctx])
    return Context(b_ctx, q_instance, q_ego_ctx, v_plan_ctx, all_rows)


def _attention(x: Tensor, memory: Tensor, params: dict, pre: str, kind: str,
               d_l: int, mask: Tensor | None = None) -> Tensor:
    q = matmul(x, params[f"{pre}/{kind}_wq"])
    k = matmul(memory, params[f"{pre}/{kind}_wk"])
    v = matmul(memory, params[f"{pre}/{kind}_wv"])
    scores = matmul(q, k.T) * (1.0 / math.sqrt(d_l))
    if mask is not None:
        scores = scores + mask
    return linear(matmul(softmax(scores), v),
                  params[f"{pre}/{kind}_wo"], params[f"{pre}/{kind}_bo"])


def decoder_forward(params: dict, cfg, tokens: list[int], ctx_rows: Tensor) -> Tensor:
    """Teacher-forced decoder pass; returns next-token logits per position."""
    n = len(tokens)
    if n == 0:
        raise ShapeMismatch("decoder_forward", (0,))
    if n > cfg.max_seq:
        raise ShapeMismatch("decoder_forward", (n,), (cfg.max_seq,))
    v = vocab.vocab_size()
    if any(t < 0 or t >= v for t in tokens):
        raise DomainError(f"decoder_forward: token index outside vocabulary of {v}")
    x = gather_rows(params["lang/tok_embed"], tokens) + \
        gather_rows(params["lang/pos_embed"], list(range(n)))
    mask = causal_mask(n)
    for layer in range(cfg.layers):
        pre = f"lang/layer{layer}"
        x = x + _attention(x, x, params, pre, "self", cfg.d_l, mask)
        x = x + _attention(x, ctx_rows, params, pre, "cross", cfg.d_l)
        x = x + mlp(x, params[f"{pre}/ffn_w1"], params[f"{pre}/ffn_b1"],
                    params[f"{pre}/ffn_w2"], params[f"{pre}/ffn_b2"])
    return linear(x, params["lang/out_w"], params["lang/out_b"])


def teacher_forced_logits(params: dict, cfg, ctx_rows: Tensor,
                          prompt: list[int], target: list[int]) -> Tensor:
    """Logits aligned with ``target`` positions under teacher forcing."""
    if not prompt:
        raise ShapeMismatch("teacher_forced_logits", (0,))
    full = list(prompt) + list(target)
    logits = decoder_forward(params, cfg, full[:-1], ctx_rows)
    return gather_rows(logits, list(range(len(prompt) - 1, len(full) - 1)))


def lm_loss(logits: Tensor, target: list[int]) -> Tensor:
    """Mean token-level cross-entropy of teacher-forced logits."""
    n, v = logits.shape
    if n != len(target):
        raise ShapeMismatch("lm_loss", (n,), (len(target),))
    onehot = Tensor(np.eye(v)[list(target)])
    probs = softmax(logits)
    picked = (probs * onehot).sum(axis=1)
    return -(picked.log().mean())


def greedy_decode(params: dict, cfg, ctx_rows: Tensor,
                  prompt: list[int], max_len: int) -> DecoderOutput:
    """Greedy decoding until EOS or ``max_len`` generated tokens."""
    if not prompt:
        raise ShapeMismatch("greedy_decode", (0,))
    if max_len < 1:
        raise DomainError(f"greedy_decode: max_len must be >= 1, got {max_len}")
    seq = list(prompt)
    rows: list[np.ndarray] = []
    tokens: list[int] = []
    for _ in range(max_len):
        logits = decoder_forward(params, cfg, seq, ctx_rows)
        last = logits.data[-1]
        rows.append(last.copy())
        nxt = int(np.argmax(last))
        tokens.append(nxt)
        seq.append(nxt)
        if nxt == vocab.EOS_ID:
            break
    return DecoderOutput(logits=np.stack(rows), tokens=tokens)
