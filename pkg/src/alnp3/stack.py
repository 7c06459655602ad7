"""Fast driving stack: BEV grid -> track tokens -> motion forecasts -> ego plan.

Query slots are hard-assigned to agent ids (ids are sorted by bearing at
generation time), so row k of every token tensor refers to agent k of the
scene.  Trajectories are decoded as cumulative offsets from the last
observed position, which makes the near-zero-init case physically sensible:
everything holds still.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import ShapeMismatch, Tensor, concat_last, matmul, reshape, softmax
from .nn import linear, mlp, normal, ones_column, vconcat, zeros
from .world import Scene, WorldConfig

# velocity channels arrive in m/s; scale them to O(1) model inputs
_VEL_SCALE = 8.0


@lru_cache(maxsize=None)
def _feature_scale(channels: int) -> Tensor:
    diag = np.ones(channels)
    diag[2:4] = 1.0 / _VEL_SCALE
    return Tensor(np.diag(diag))


@lru_cache(maxsize=None)
def _cell_positions(grid: int) -> Tensor:
    # matches render_bev: row index i is y, column index j is x
    ii, jj = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    px = (jj.reshape(-1) + 0.5) / grid - 0.5
    py = (ii.reshape(-1) + 0.5) / grid - 0.5
    return Tensor(np.stack([px, py], axis=1))


@lru_cache(maxsize=None)
def _occupancy_selector(channels: int) -> Tensor:
    sel = np.zeros((channels, 1))
    sel[0, 0] = 1.0
    return Tensor(sel)


@lru_cache(maxsize=None)
def _ones_row(n: int) -> Tensor:
    return Tensor(np.ones((1, n)))


@lru_cache(maxsize=None)
def _pool_matrix(grid: int, pool: int) -> Tensor:
    side = grid // pool
    mat = np.zeros((side * side, grid * grid))
    for pi in range(side):
        for pj in range(side):
            patch = pi * side + pj
            for di in range(pool):
                for dj in range(pool):
                    mat[patch, (pi * pool + di) * grid + (pj * pool + dj)] = 1.0 / (pool * pool)
    return Tensor(mat)


@lru_cache(maxsize=None)
def _feature_columns(width: int, channels: int) -> Tensor:
    sel = np.zeros((width, channels))
    sel[:channels, :channels] = np.eye(channels)
    return Tensor(sel)


@lru_cache(maxsize=None)
def _patch_centers(grid: int, pool: int) -> Tensor:
    side = grid // pool
    ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    px = (jj.reshape(-1) * pool + pool / 2.0) / grid - 0.5
    py = (ii.reshape(-1) * pool + pool / 2.0) / grid - 0.5
    return Tensor(np.stack([px, py], axis=1))


@lru_cache(maxsize=None)
def _cumsum_matrix(t_f: int) -> Tensor:
    # (2*t_f, 2*t_f): positions[2j+p] = sum_{i<=j} offsets[2i+p]
    mat = np.zeros((2 * t_f, 2 * t_f))
    for i in range(t_f):
        for j in range(i, t_f):
            mat[2 * i, 2 * j] = 1.0
            mat[2 * i + 1, 2 * j + 1] = 1.0
    return Tensor(mat)


@lru_cache(maxsize=None)
def _tile_matrix(t_f: int) -> Tensor:
    mat = np.zeros((2, 2 * t_f))
    mat[0, 0::2] = 1.0
    mat[1, 1::2] = 1.0
    return Tensor(mat)


@dataclass
class StackOutput:
    q_track: Tensor  # (N_a, D_q)
    q_motion: Tensor  # (N_a, D_q)
    ego_feat: Tensor  # (1, D_q) ego token after planning attention
    v_agents: Tensor  # (N_a, T_f, 2)
    v_ego: Tensor  # (T_f, 2)
    v_agents_flat: Tensor  # (N_a, 2*T_f)
    v_ego_flat: Tensor  # (1, 2*T_f)
    cells: Tensor  # (grid*grid, channels), feature-scaled
    patch_in: Tensor  # (K_b, channels+2), pooled features + centers


def init_stack_params(cfg, rng: np.random.Generator) -> dict[str, Tensor]:
    d_q, d_ff = cfg.d_q, cfg.d_ff
    n_in = cfg.world.channels + 2
    s_attn = 1.0 / math.sqrt(d_q)
    p = {
        "stack/queries": normal(rng, (cfg.world.n_agents, d_q), 1.0),
        "stack/ego_query": normal(rng, (1, d_q), 1.0),
        "stack/perceive/wk": normal(rng, (n_in, d_q), 1.0 / math.sqrt(n_in)),
        "stack/perceive/bk": zeros((1, d_q)),
        "stack/perceive/wv": normal(rng, (n_in, d_q), 1.0 / math.sqrt(n_in)),
        "stack/perceive/bv": zeros((1, d_q)),
        # occupied cells start ~8 nats above empty ones so attention is over
        # agents, not the 1000-cell background
        "stack/perceive/occ_gain": Tensor(np.full((1, 1), 8.0), requires_grad=True),
        "stack/perceive/loc_gain": Tensor(np.full((1, 1), 1.0), requires_grad=True),
        "stack/perceive/ffn_w1": normal(rng, (d_q, d_ff), s_attn),
        "stack/perceive/ffn_b1": zeros((1, d_ff)),
        "stack/perceive/ffn_w2": normal(rng, (d_ff, d_q), 1.0 / math.sqrt(d_ff)),
        "stack/perceive/ffn_b2": zeros((1, d_q)),
        "stack/predict/wq": normal(rng, (d_q, d_q), s_attn),
        "stack/predict/wk": normal(rng, (d_q, d_q), s_attn),
        "stack/predict/wv": normal(rng, (d_q, d_q), s_attn),
        "stack/predict/wo": normal(rng, (d_q, d_q), s_attn),
        "stack/predict/bo": zeros((1, d_q)),
        "stack/predict/ffn_w1": normal(rng, (d_q, d_ff), s_attn),
        "stack/predict/ffn_b1": zeros((1, d_ff)),
        "stack/predict/ffn_w2": normal(rng, (d_ff, d_q), 1.0 / math.sqrt(d_ff)),
        "stack/predict/ffn_b2": zeros((1, d_q)),
        "stack/motion_head/w": normal(rng, (d_q, 2 * cfg.world.t_f), 0.02),
        "stack/motion_head/b": zeros((1, 2 * cfg.world.t_f)),
        "stack/plan/wq": normal(rng, (d_q, d_q), s_attn),
        "stack/plan/wk_motion": normal(rng, (d_q, d_q), s_attn),
        "stack/plan/wv_motion": normal(rng, (d_q, d_q), s_attn),
        "stack/plan/wk_bev": normal(rng, (n_in, d_q), 1.0 / math.sqrt(n_in)),
        # plan values carry patch features only (no positional codes): the
        # ego head needs what is ahead, not which training scene this is
        "stack/plan/wv_bev": normal(rng, (cfg.world.channels, d_q),
                                    1.0 / math.sqrt(cfg.world.channels)),
        "stack/plan/occ_gain": Tensor(np.full((1, 1), 8.0), requires_grad=True),
        "stack/plan/ffn_w1": normal(rng, (2 * d_q + cfg.world.channels, d_ff),
                                    1.0 / math.sqrt(2 * d_q + cfg.world.channels)),
        "stack/plan/ffn_b1": zeros((1, d_ff)),
        "stack/plan/ffn_w2": normal(rng, (d_ff, d_q), 1.0 / math.sqrt(d_ff)),
        "stack/plan/ffn_b2": zeros((1, d_q)),
        "stack/plan_head/w": normal(rng, (d_q, 2 * cfg.world.t_f), 0.02),
        "stack/plan_head/w_center": normal(rng, (cfg.world.channels, 2 * cfg.world.t_f), 0.02),
        "stack/plan_head/b": zeros((1, 2 * cfg.world.t_f)),
    }
    return p


def prepare_cells(bev: Tensor, cfg) -> tuple[Tensor, Tensor]:
    """Flatten the BEV grid to per-cell features and pooled patch features."""
    w = cfg.world
    expect = (w.grid, w.grid, w.channels)
    if bev.shape != expect:
        raise ShapeMismatch("prepare_cells", bev.shape, expect)
    cells = matmul(reshape(bev, (w.grid * w.grid, w.channels)), _feature_scale(w.channels))
    pooled = matmul(_pool_matrix(w.grid, cfg.pool), cells)
    patch_in = concat_last([pooled, _patch_centers(w.grid, cfg.pool)])
    return cells, patch_in


# width of the anchor locality prior, in cells
_LOCALITY_SIGMA = 1.5


def _locality(anchors: np.ndarray, grid: int) -> np.ndarray:
    # (N_a, grid*grid) squared-distance penalty between normalized cell
    # centers and each agent's last observed position
    pos = _cell_positions(grid).data
    norm = anchors / grid
    d2 = ((pos[None, :, :] - norm[:, None, :]) ** 2).sum(axis=2)
    return -d2 / (2.0 * (_LOCALITY_SIGMA / grid) ** 2)


def attend_cells(params: dict, cfg, cells: Tensor, pos: Tensor, locality: np.ndarray) -> Tensor:
    """Attention body of :func:`perceive` over explicit cell rows.

    Every score term is gated by occupancy, so an all-zero grid degenerates
    to uniform attention over identical keys regardless of the anchors.
    """
    queries = params["stack/queries"]
    occ = matmul(cells, _occupancy_selector(cells.shape[1]))
    gated_pos = matmul(occ, _ones_row(2)) * pos
    key_in = concat_last([cells, gated_pos])
    val_in = concat_last([cells, pos])
    keys = linear(key_in, params["stack/perceive/wk"], params["stack/perceive/bk"])
    values = linear(val_in, params["stack/perceive/wv"], params["stack/perceive/bv"])
    occ_rows = matmul(ones_column(queries.shape[0]), occ.T)
    salience = params["stack/perceive/occ_gain"] * occ_rows
    tether = params["stack/perceive/loc_gain"] * (occ_rows * Tensor(locality))
    scores = matmul(queries, keys.T) * (1.0 / math.sqrt(cfg.d_q)) + salience + tether
    attn = softmax(scores)
    pooled = matmul(attn, values)
    return pooled + mlp(pooled, params["stack/perceive/ffn_w1"], params["stack/perceive/ffn_b1"],
                        params["stack/perceive/ffn_w2"], params["stack/perceive/ffn_b2"])


def perceive(params: dict, cfg, cells: Tensor, anchors: np.ndarray) -> Tensor:
    """Cross-attention of the learnable agent queries over BEV cells.

    The binding a full-scale stack gets from detection and tracking is
    realized as an occupancy-gated locality bias around each agent's last
    observed position (the same anchors the trajectory decode uses).
    """
    w = cfg.world
    return attend_cells(params, cfg, cells, _cell_positions(w.grid),
                        _locality(anchors, w.grid))


def predict(params: dict, cfg, q_track: Tensor) -> Tensor:
    """Agent-agent self-attention producing motion tokens."""
    q = matmul(q_track, params["stack/predict/wq"])
    k = matmul(q_track, params["stack/predict/wk"])
    v = matmul(q_track, params["stack/predict/wv"])
    attn = softmax(matmul(q, k.T) * (1.0 / math.sqrt(cfg.d_q)))
    mixed = linear(matmul(attn, v), params["stack/predict/wo"], params["stack/predict/bo"])
    h = q_track + mixed
    return h + mlp(h, params["stack/predict/ffn_w1"], params["stack/predict/ffn_b1"],
                   params["stack/predict/ffn_w2"], params["stack/predict/ffn_b2"])


def ego_cell(cells: Tensor, cfg) -> Tensor:
    """Feature row of the grid-center cell (the ego cell in this frame),
    amplified so the ego motion cue is not washed out by pooling."""
    grid = cfg.world.grid
    return cells.gather_rows([(grid // 2) * grid + grid // 2]) * 4.0


def plan(params: dict, cfg, q_motion: Tensor, patch_in: Tensor, center: Tensor) -> Tensor:
    """Ego token cross-attending over motion tokens and pooled BEV patches."""
    channels = cfg.world.channels
    patch_feats = matmul(patch_in, _feature_columns(patch_in.shape[1], channels))
    q = matmul(params["stack/ego_query"], params["stack/plan/wq"])
    k = vconcat([matmul(q_motion, params["stack/plan/wk_motion"]),
                 matmul(patch_in, params["stack/plan/wk_bev"])])
    v = vconcat([matmul(q_motion, params["stack/plan/wv_motion"]),
                 matmul(patch_feats, params["stack/plan/wv_bev"])])
    patch_occ = matmul(patch_in, _occupancy_selector(patch_in.shape[1]))
    salience = concat_last([Tensor(np.zeros((1, q_motion.shape[0]))),
                            params["stack/plan/occ_gain"] * patch_occ.T])
    attn = softmax(matmul(q, k.T) * (1.0 / math.sqrt(cfg.d_q)) + salience)
    ctx = matmul(attn, v)
    fused = concat_last([params["stack/ego_query"], ctx, center])
    return ctx + mlp(fused, params["stack/plan/ffn_w1"], params["stack/plan/ffn_b1"],
                     params["stack/plan/ffn_w2"], params["stack/plan/ffn_b2"])


def _decode_track(offsets: Tensor, anchors: np.ndarray, t_f: int) -> Tensor:
    positions = matmul(offsets, _cumsum_matrix(t_f))
    tiled = matmul(Tensor(anchors), _tile_matrix(t_f))
    return positions + tiled


def stack_forward(params: dict, cfg, scene: Scene, bev: Tensor) -> StackOutput:
    """Full fast-stack forward pass for one scene."""
    w = cfg.world
    if len(scene.agents) != w.n_agents:
        raise ShapeMismatch("stack_forward", (len(scene.agents),), (w.n_agents,))
    cells, patch_in = prepare_cells(bev, cfg)
    anchors = np.stack([a.position() for a in scene.agents])
    q_track = perceive(params, cfg, cells, anchors)
    q_motion = predict(params, cfg, q_track)
    center = ego_cell(cells, cfg)
    ego_feat = plan(params, cfg, q_motion, patch_in, center)

    agent_off = linear(q_motion, params["stack/motion_head/w"], params["stack/motion_head/b"])
    v_agents_flat = _decode_track(agent_off, anchors, w.t_f)

    ego_off = linear(ego_feat, params["stack/plan_head/w"], params["stack/plan_head/b"]) + \
        matmul(center, params["stack/plan_head/w_center"])
    v_ego_flat = _decode_track(ego_off, scene.ego_past[-1][None, :], w.t_f)

    return StackOutput(
        q_track=q_track,
        q_motion=q_motion,
        ego_feat=ego_feat,
        v_agents=reshape(v_agents_flat, (w.n_agents, w.t_f, 2)),
        v_ego=reshape(v_ego_flat, (w.t_f, 2)),
        v_agents_flat=v_agents_flat,
        v_ego_flat=v_ego_flat,
        cells=cells,
        patch_in=patch_in,
    )


def task_loss(out: StackOutput, scene: Scene) -> Tensor:
    """Imitation loss: element-mean squared error on agent and ego tracks."""
    if len(scene.agents) != out.v_agents.shape[0]:
        raise ShapeMismatch("task_loss", (len(scene.agents),), (out.v_agents.shape[0],))
    agent_gt = Tensor(np.stack([a.future for a in scene.agents]))
    ego_gt = Tensor(scene.ego_future)
    agent_term = (out.v_agents - agent_gt).square().mean()
    ego_term = (out.v_ego - ego_gt).square().mean()
    return agent_term + ego_term
