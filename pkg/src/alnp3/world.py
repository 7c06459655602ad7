"""Deterministic synthetic driving scenes with paired text supervision.

Every scene is a pure function of its seed: kinematic agents on a flat BEV
plane around an ego vehicle driving along +x, one of three scenario
templates, templated per-agent captions and motion narrations, one planning
explanation, and four compositional QA pairs.  Positions are meters in the
ego frame (ego's current position is the origin, heading +x, +y to the
left).

Scenario signatures are observable in the rasterized scene so the planner
has something to learn from: a red-light scene queues a stopped car ahead of
the ego, a yield scene puts a pedestrian crossing the lane, and a clear-road
scene keeps the forward corridor free of stationary agents.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import vocab

CLASSES = ["car", "truck", "pedestrian", "barrier"]
V_MAX = {"car": 8.0, "truck": 6.0, "pedestrian": 2.0, "barrier": 0.0}
SCENARIOS = ["go_straight", "stop_red_light", "yield_pedestrian"]
CATEGORIES = ["perception", "prediction", "planning"]

# per-step displacement fractions of the cruise speed, one list per scenario
_EGO_PROFILE = {
    "go_straight": [1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
    "stop_red_light": [0.75, 0.5, 0.25, 0.0, 0.0, 0.0],
    "yield_pedestrian": [0.8, 0.6, 0.45, 0.35, 0.3, 0.3],
}

# keep-out margin between any agent and the ego ground-truth plan, per step
_PLAN_MARGIN = 4.0
_SPECIAL_MARGIN = 3.5

MAGIC = b"ALN3"
FORMAT_VERSION = 1


class CorpusError(ValueError):
    """Invalid corpus construction or a malformed corpus file."""


@dataclass
class WorldConfig:
    n_agents: int = 4
    t_h: int = 4
    t_f: int = 6
    dt: float = 0.5
    grid: int = 32
    channels: int = 4
    moving_prob: float = 0.7

    def half_extent(self) -> float:
        return self.grid / 2.0


@dataclass(eq=False)
class Agent:
    id: int
    cls: str
    status: str  # "moving" | "stopped"
    past: np.ndarray  # (t_h, 2)
    future: np.ndarray  # (t_f, 2)

    def position(self) -> np.ndarray:
        return self.past[-1]

    def velocity(self, dt: float) -> np.ndarray:
        if self.status == "stopped":
            return np.zeros(2)
        return (self.past[-1] - self.past[-2]) / dt


@dataclass(eq=False)
class Scene:
    seed: int
    scenario: str
    agents: list[Agent]
    ego_past: np.ndarray  # (t_h, 2)
    ego_future: np.ndarray  # (t_f, 2)
    lane: np.ndarray  # (n, 2)


@dataclass
class LanguageSample:
    category: str
    prompt: list[int]
    target: list[int]
    agent_id: Optional[int] = None


@dataclass
class QASample:
    question: list[int]
    answer: list[int]
    hop: str  # "H0" | "H1"


@dataclass
class SceneBundle:
    split: str  # "train" | "val"
    scene: Scene
    language: list[LanguageSample]
    qa: list[QASample]


@dataclass
class Corpus:
    world: WorldConfig
    bundles: list[SceneBundle] = field(default_factory=list)

    def split(self, name: str) -> list[SceneBundle]:
        return [b for b in self.bundles if b.split == name]


def octant(dx: float, dy: float) -> str:
    """Eight-way direction name for an offset in the ego frame."""
    a = math.degrees(math.atan2(dy, dx))
    if -22.5 <= a < 22.5:
        return "front"
    if 22.5 <= a < 67.5:
        return "front left"
    if 67.5 <= a < 112.5:
        return "left"
    if 112.5 <= a < 157.5:
        return "back left"
    if a >= 157.5 or a < -157.5:
        return "back"
    if -157.5 <= a < -112.5:
        return "back right"
    if -112.5 <= a < -67.5:
        return "right"
    return "front right"


def _linear_track(pos: np.ndarray, vel: np.ndarray, cfg: WorldConfig) -> tuple[np.ndarray, np.ndarray]:
    steps = np.arange(-(cfg.t_h - 1), cfg.t_f + 1, dtype=np.float64)
    points = pos[None, :] + steps[:, None] * (vel * cfg.dt)[None, :]
    return points[: cfg.t_h], points[cfg.t_h:]


def _ego_tracks(speed: float, scenario: str, cfg: WorldConfig) -> tuple[np.ndarray, np.ndarray]:
    back = np.arange(-(cfg.t_h - 1), 1, dtype=np.float64) * speed * cfg.dt
    past = np.stack([back, np.zeros_like(back)], axis=1)
    fractions = np.asarray(_EGO_PROFILE[scenario][: cfg.t_f])
    x = np.cumsum(fractions * speed * cfg.dt)
    future = np.stack([x, np.zeros_like(x)], axis=1)
    return past, future


def _clear_of_plan(future: np.ndarray, ego_future: np.ndarray, margin: float) -> bool:
    gaps = np.linalg.norm(future - ego_future, axis=1)
    return bool(gaps.min() >= margin)


def _in_forward_corridor(pos: np.ndarray) -> bool:
    return abs(pos[1]) < 2.5 and 0.0 < pos[0] < 21.0


def generate_scene(seed: int, n_agents: int, cfg: WorldConfig | None = None) -> Scene:
    """Build the deterministic scene for ``seed``.

    Agents are placed without initial overlap, moving agents keep a
    clearance margin from the ego plan at every matched step, and ids are
    assigned by bearing so slot order correlates with geometry.
    """
    cfg = cfg or WorldConfig(n_agents=n_agents)
    if not 1 <= n_agents <= 16:
        raise CorpusError(f"n_agents must be in [1, 16], got {n_agents}")

    rng = np.random.default_rng(seed)
    scenario = SCENARIOS[int(rng.integers(0, 3))]
    # well-separated approach-speed bands per scenario
    if scenario == "go_straight":
        speed = rng.uniform(4.8, 6.4)
    elif scenario == "stop_red_light":
        speed = rng.uniform(1.8, 2.6)
    else:
        speed = rng.uniform(3.2, 4.0)
    ego_past, ego_future = _ego_tracks(speed, scenario, cfg)

    agents: list[Agent] = []

    def placed_ok(pos: np.ndarray) -> bool:
        if np.linalg.norm(pos) < 2.5:
            return False
        for other in agents:
            if np.linalg.norm(pos - other.position()) < 2.0:
                return False
        return True

    if scenario == "stop_red_light":
        # queued car the ego is braking for
        pos = np.array([rng.uniform(8.0, 11.0), rng.uniform(-0.6, 0.6)])
        past, future = _linear_track(pos, np.zeros(2), cfg)
        agents.append(Agent(0, "car", "stopped", past, future))
    elif scenario == "yield_pedestrian":
        side = 1.0 if rng.random() < 0.5 else -1.0
        ped = None
        for _ in range(500):
            pos = np.array([rng.uniform(4.5, 7.0), side * rng.uniform(1.8, 3.0)])
            vel = np.array([0.0, -side * rng.uniform(0.8, 1.5)])
            past, future = _linear_track(pos, vel, cfg)
            if _clear_of_plan(future, ego_future, _SPECIAL_MARGIN) and placed_ok(pos):
                ped = Agent(0, "pedestrian", "moving", past, future)
                break
        if ped is None:
            past, future = _linear_track(np.array([10.0, 3.0 * side]),
                                          np.array([0.0, -side * 0.8]), cfg)
            ped = Agent(0, "pedestrian", "moving", past, future)
        agents.append(ped)

    while len(agents) < n_agents:
        agent = None
        for _ in range(500):
            cls = CLASSES[int(rng.integers(0, len(CLASSES)))]
            moving = cls != "barrier" and rng.random() < cfg.moving_prob
            pos = rng.uniform(-14.0, 14.0, size=2)
            heading = rng.uniform(0.0, 2.0 * math.pi)
            mag = rng.uniform(0.3, 0.9) * V_MAX[cls] if moving else 0.0
            vel = mag * np.array([math.cos(heading), math.sin(heading)])
            if not placed_ok(pos):
                continue
            if not moving and _in_forward_corridor(pos):
                continue
            past, future = _linear_track(pos, vel, cfg)
            if not _clear_of_plan(future, ego_future, _PLAN_MARGIN):
                continue
            agent = Agent(len(agents), cls, "moving" if moving else "stopped", past, future)
            break
        if agent is None:
            # deterministic fallback: park it on a ring behind the ego
            k = len(agents)
            r = 12.0 + 0.5 * (k % 3)
            ang = math.pi + (k - n_agents / 2.0) * 0.35
            pos = r * np.array([math.cos(ang), math.sin(ang)])
            while not placed_ok(pos):
                r += 0.9
                pos = r * np.array([math.cos(ang), math.sin(ang)])
            past, future = _linear_track(pos, np.zeros(2), cfg)
            agent = Agent(k, "barrier", "stopped", past, future)
        agents.append(agent)

    agents.sort(key=lambda a: (math.atan2(a.position()[1], a.position()[0]),
                               float(np.linalg.norm(a.position()))))
    for i, agent in enumerate(agents):
        agent.id = i

    lane_x = np.linspace(-cfg.half_extent(), cfg.half_extent(), 9)
    lane = np.stack([lane_x, np.zeros_like(lane_x)], axis=1)
    return Scene(seed=int(seed), scenario=scenario, agents=agents,
                 ego_past=ego_past, ego_future=ego_future, lane=lane)


def render_bev(scene: Scene, cfg: WorldConfig) -> np.ndarray:
    """Rasterize the scene into a (grid, grid, 4) array.

    Cell (i, j) covers y in [i-H, i-H+1) and x in [j-H, j-H+1) with
    H = grid/2.  Channels: occupancy, class id scaled to (0, 1],
    velocity x (m/s), velocity y (m/s).  Each agent occupies the single
    cell under its current position; agents outside the grid are clipped.
    The ego's own velocity is stamped into the velocity channels of its
    cell as a motion cue (occupancy and class stay zero there); an agent
    sharing that cell overwrites it.
    """
    bev = np.zeros((cfg.grid, cfg.grid, cfg.channels))
    half = cfg.half_extent()
    ego_vel = (scene.ego_past[-1] - scene.ego_past[-2]) / cfg.dt
    ej = int(math.floor(scene.ego_past[-1][0] + half))
    ei = int(math.floor(scene.ego_past[-1][1] + half))
    if 0 <= ei < cfg.grid and 0 <= ej < cfg.grid:
        bev[ei, ej, 2] = ego_vel[0]
        bev[ei, ej, 3] = ego_vel[1]
    for agent in scene.agents:
        x, y = agent.position()
        j = int(math.floor(x + half))
        i = int(math.floor(y + half))
        if not (0 <= i < cfg.grid and 0 <= j < cfg.grid):
            continue
        vel = agent.velocity(cfg.dt)
        bev[i, j, 0] = 1.0
        bev[i, j, 1] = (CLASSES.index(agent.cls) + 1) / len(CLASSES)
        bev[i, j, 2] = vel[0]
        bev[i, j, 3] = vel[1]
    return bev


def caption_agent(agent: Agent) -> list[int]:
    """Object caption tokens: class, rounded range, bearing, motion status."""
    x, y = agent.position()
    dist = int(round(math.hypot(x, y)))
    direction = octant(x, y)
    status = "moving" if agent.status == "moving" else "not moving"
    text = f"{agent.cls} about {dist} meters {direction} is {status}"
    return vocab.encode(text) + [vocab.EOS_ID]


def narrate_agent(agent: Agent) -> list[int]:
    """Motion forecast narration for one agent."""
    if agent.status == "stopped":
        text = f"the {agent.cls} will stay still"
    else:
        vel = agent.future[-1] - agent.past[-1]
        text = f"the {agent.cls} will keep moving {octant(vel[0], vel[1])}"
    return vocab.encode(text) + [vocab.EOS_ID]


def explain_plan(scene: Scene) -> list[int]:
    text = {
        "go_straight": "ego keeps going straight because the road ahead is clear",
        "stop_red_light": "ego stops because the traffic light is red",
        "yield_pedestrian": "ego slows down because a pedestrian is crossing",
    }[scene.scenario]
    return vocab.encode(text) + [vocab.EOS_ID]


def _prompt(text: str) -> list[int]:
    return [vocab.BOS_ID] + vocab.encode(text)


def make_language_samples(scene: Scene) -> list[LanguageSample]:
    """One caption and one narration per agent plus one plan explanation."""
    samples = []
    for agent in scene.agents:
        samples.append(LanguageSample("perception", _prompt(f"describe agent {agent.id}"),
                                      caption_agent(agent), agent.id))
    for agent in scene.agents:
        samples.append(LanguageSample("prediction", _prompt(f"predict agent {agent.id}"),
                                      narrate_agent(agent), agent.id))
    samples.append(LanguageSample("planning", _prompt("explain the plan"),
                                  explain_plan(scene), None))
    return samples


def _closest_agent(scene: Scene) -> Agent:
    return min(scene.agents, key=lambda a: (float(np.linalg.norm(a.position())), a.id))


def make_qa_samples(scene: Scene) -> list[QASample]:
    """Two zero-hop and two one-hop questions, all answerable from the scene."""
    agents = scene.agents
    closest = _closest_agent(scene)
    status_words = {"moving": "moving", "stopped": "not moving"}

    n_moving = sum(1 for a in agents if a.status == "moving")
    q1 = QASample(_prompt("how many agents are moving"),
                  vocab.encode(str(n_moving)) + [vocab.EOS_ID], "H0")
    q2 = QASample(_prompt("what is the status of the closest agent"),
                  vocab.encode(status_words[closest.status]) + [vocab.EOS_ID], "H0")

    n_same = sum(1 for a in agents if a.status == closest.status and a.id != closest.id)
    q3 = QASample(_prompt("how many other agents have the same status as the closest agent"),
                  vocab.encode(str(n_same)) + [vocab.EOS_ID], "H1")

    movers = [a for a in agents if a.status == "moving"]
    if movers:
        far = max(movers, key=lambda a: (float(np.linalg.norm(a.position())), a.id))
        answer = vocab.encode(far.cls)
    else:
        answer = vocab.encode("none")
    q4 = QASample(_prompt("what is the class of the farthest moving agent"),
                  answer + [vocab.EOS_ID], "H1")
    return [q1, q2, q3, q4]


def make_bundle(seed: int, split: str, cfg: WorldConfig) -> SceneBundle:
    scene = generate_scene(seed, cfg.n_agents, cfg)
    return SceneBundle(split=split, scene=scene,
                       language=make_language_samples(scene),
                       qa=make_qa_samples(scene))


def build_corpus(train_seeds, val_seeds, cfg: WorldConfig) -> Corpus:
    """Generate one bundle per seed; train/val seed ranges must be disjoint."""
    train = list(train_seeds)
    val = list(val_seeds) if val_seeds is not None else []
    overlap = set(train) & set(val)
    if overlap:
        raise CorpusError(f"train/val seed ranges overlap: {sorted(overlap)[:5]}")
    bundles = [make_bundle(s, "train", cfg) for s in train]
    bundles += [make_bundle(s, "val", cfg) for s in val]
    return Corpus(world=cfg, bundles=bundles)


# ---------------------------------------------------------------------------
# serialization: length-prefixed little-endian records behind an ALN3 header
# ---------------------------------------------------------------------------

def _pack_points(points: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(points, dtype="<f8")
    return struct.pack("<H", arr.shape[0]) + arr.tobytes()


def _unpack_points(buf: memoryview, offset: int, width: int = 2) -> tuple[np.ndarray, int]:
    (n,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    arr = np.frombuffer(buf, dtype="<f8", count=n * width, offset=offset).reshape(n, width).copy()
    return arr, offset + 8 * n * width


def _pack_tokens(tokens: list[int]) -> bytes:
    return struct.pack(f"<H{len(tokens)}H", len(tokens), *tokens)


def _unpack_tokens(buf: memoryview, offset: int) -> tuple[list[int], int]:
    (n,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    toks = list(struct.unpack_from(f"<{n}H", buf, offset))
    return toks, offset + 2 * n


def _pack_bundle(b: SceneBundle) -> bytes:
    out = [struct.pack("<BqB", 0 if b.split == "train" else 1,
                       b.scene.seed, SCENARIOS.index(b.scene.scenario))]
    out.append(_pack_points(b.scene.ego_past))
    out.append(_pack_points(b.scene.ego_future))
    out.append(_pack_points(b.scene.lane))
    out.append(struct.pack("<B", len(b.scene.agents)))
    for a in b.scene.agents:
        out.append(struct.pack("<HBB", a.id, CLASSES.index(a.cls),
                               0 if a.status == "moving" else 1))
        out.append(_pack_points(a.past))
        out.append(_pack_points(a.future))
    out.append(struct.pack("<H", len(b.language)))
    for s in b.language:
        aid = -1 if s.agent_id is None else s.agent_id
        out.append(struct.pack("<Bh", CATEGORIES.index(s.category), aid))
        out.append(_pack_tokens(s.prompt))
        out.append(_pack_tokens(s.target))
    out.append(struct.pack("<H", len(b.qa)))
    for q in b.qa:
        out.append(struct.pack("<B", 0 if q.hop == "H0" else 1))
        out.append(_pack_tokens(q.question))
        out.append(_pack_tokens(q.answer))
    return b"".join(out)


def _unpack_bundle(buf: memoryview) -> SceneBundle:
    split_id, seed, scn = struct.unpack_from("<BqB", buf, 0)
    offset = struct.calcsize("<BqB")
    ego_past, offset = _unpack_points(buf, offset)
    ego_future, offset = _unpack_points(buf, offset)
    lane, offset = _unpack_points(buf, offset)
    (n_agents,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    agents = []
    for _ in range(n_agents):
        aid, cls_id, status_id = struct.unpack_from("<HBB", buf, offset)
        offset += struct.calcsize("<HBB")
        past, offset = _unpack_points(buf, offset)
        future, offset = _unpack_points(buf, offset)
        agents.append(Agent(aid, CLASSES[cls_id],
                            "moving" if status_id == 0 else "stopped", past, future))
    scene = Scene(seed=seed, scenario=SCENARIOS[scn], agents=agents,
                  ego_past=ego_past, ego_future=ego_future, lane=lane)
    (n_lang,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    language = []
    for _ in range(n_lang):
        cat_id, aid = struct.unpack_from("<Bh", buf, offset)
        offset += struct.calcsize("<Bh")
        prompt, offset = _unpack_tokens(buf, offset)
        target, offset = _unpack_tokens(buf, offset)
        language.append(LanguageSample(CATEGORIES[cat_id], prompt, target,
                                       None if aid < 0 else aid))
    (n_qa,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    qa = []
    for _ in range(n_qa):
        (hop_id,) = struct.unpack_from("<B", buf, offset)
        offset += 1
        question, offset = _unpack_tokens(buf, offset)
        answer, offset = _unpack_tokens(buf, offset)
        qa.append(QASample(question, answer, "H0" if hop_id == 0 else "H1"))
    return SceneBundle("train" if split_id == 0 else "val", scene, language, qa)


def save_corpus(corpus: Corpus, path) -> None:
    cfg = corpus.world
    header = struct.pack("<HHHHdHHI", FORMAT_VERSION, cfg.n_agents, cfg.t_h, cfg.t_f,
                         cfg.dt, cfg.grid, vocab.vocab_size(), len(corpus.bundles))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header)
        for bundle in corpus.bundles:
            payload = _pack_bundle(bundle)
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)


def load_corpus(path) -> Corpus:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CorpusError(f"{path}: bad magic, not a corpus file")
    version, n_agents, t_h, t_f, dt, grid, vsize, n_records = struct.unpack_from(
        "<HHHHdHHI", blob, 4)
    if version != FORMAT_VERSION:
        raise CorpusError(f"{path}: unsupported corpus version {version}")
    if vsize != vocab.vocab_size():
        raise CorpusError(f"{path}: corpus vocabulary size {vsize} does not match "
                          f"this build ({vocab.vocab_size()})")
    cfg = WorldConfig(n_agents=n_agents, t_h=t_h, t_f=t_f, dt=dt, grid=grid)
    offset = 4 + struct.calcsize("<HHHHdHHI")
    view = memoryview(blob)
    bundles = []
    for _ in range(n_records):
        (length,) = struct.unpack_from("<I", view, offset)
        offset += 4
        bundles.append(_unpack_bundle(view[offset:offset + length]))
        offset += length
    return Corpus(world=cfg, bundles=bundles)


def export_jsonl(corpus: Corpus, path) -> None:
    """Human-readable mirror of the binary corpus, one scene per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for b in corpus.bundles:
            record = {
                "split": b.split,
                "seed": b.scene.seed,
                "scenario": b.scene.scenario,
                "ego_past": b.scene.ego_past.tolist(),
                "ego_future": b.scene.ego_future.tolist(),
                "agents": [
                    {
                        "id": a.id,
                        "class": a.cls,
                        "status": a.status,
                        "past": a.past.tolist(),
                        "future": a.future.tolist(),
                    }
                    for a in b.scene.agents
                ],
                "language": [
                    {
                        "category": s.category,
                        "agent_id": s.agent_id,
                        "prompt": vocab.decode(s.prompt),
                        "target": vocab.decode(s.target),
                    }
                    for s in b.language
                ],
                "qa": [
                    {
                        "hop": q.hop,
                        "question": vocab.decode(q.question),
                        "answer": vocab.decode(q.answer),
                    }
                    for q in b.qa
                ],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
