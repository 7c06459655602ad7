"""Joint co-distillation training: task + language losses plus routed alignment.

Each step samples a batch of scenes and one language sample per scene,
cycling prompt categories round-robin so every alignment loss sees
gradient.  The optimizer is plain Adam with global-norm clipping; parameter
updates run in sorted name order, which together with the seeded sampling
makes two runs with the same config bitwise identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import alignment, language
from .autodiff import Tensor, backward, reshape
from .config import TrainConfig
from .model import Model, ModelConfig, build_model
from .nn import vconcat
from .stack import task_loss
from .world import CATEGORIES, Corpus, CorpusError, LanguageSample, SceneBundle
from . import vocab

CLIP_NORM = 5.0
LOSS_NAMES = ("task", "lm", "p1a", "p2a", "p3a")


class TrainError(RuntimeError):
    """Training-time contract violation (bad corpus pairing, non-finite update)."""


@dataclass
class StepReport:
    step: int
    task: float
    lm: float
    p1a: float
    p2a: float
    p3a: float
    total: float
    grad_norm: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class Adam:
    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named = named_params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in named_params}
        self.v = {name: np.zeros_like(t.data) for name, t in named_params}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, tensor in self.named:
            g = grads[name]
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            tensor.data = tensor.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# the eval suite holds QA exact-match against the decoder, so QA pairs join
# the step cycle as language-loss-only items (no alignment route fires)
SLOT_CYCLE = CATEGORIES + ["qa"]


def _sample_for(bundle: SceneBundle, category: str, agent_idx: int):
    if category == "qa":
        q = bundle.qa[agent_idx % len(bundle.qa)]
        return LanguageSample("qa", q.question, q.answer, None)
    for s in bundle.language:
        if s.category == category and (category == "planning" or s.agent_id == agent_idx):
            return s
    raise TrainError(f"scene {bundle.scene.seed} has no {category} sample "
                     f"for agent {agent_idx}")


def _captions_by_agent(bundle: SceneBundle) -> list[list[int]]:
    caps = {s.agent_id: s.target for s in bundle.language if s.category == "perception"}
    try:
        return [caps[a.id] for a in bundle.scene.agents]
    except KeyError as exc:
        raise TrainError(f"scene {bundle.scene.seed}: missing caption for agent {exc}")


def scene_losses(model: Model, bundle: SceneBundle, sample, tau: float) -> dict[str, Tensor]:
    """Forward one scene and its chosen language sample; returns loss tensors."""
    scene = bundle.scene
    out = model.fast_forward(scene)
    ctx = model.mix(out)
    logits = model.teacher_logits(ctx, sample.prompt, sample.target)
    losses = {
        "task": task_loss(out, scene),
        "lm": language.lm_loss(logits, sample.target),
    }
    if not model.align_enabled or sample.category == "qa":
        return losses
    n_vocab = vocab.vocab_size()
    for name in alignment.route(sample.category):
        if name == "p1a":
            losses["p1a"] = alignment.p1a_loss(model.params, ctx.q_instance,
                                               _captions_by_agent(bundle), model.embedder)
        elif name == "p2a":
            rows = []
            for agent in scene.agents:
                s_k = _sample_for(bundle, "prediction", agent.id)
                lg = logits if s_k is sample else model.teacher_logits(ctx, s_k.prompt, s_k.target)
                rows.append(reshape(lg.mean(axis=0), (1, n_vocab)))
            losses["p2a"] = alignment.p2a_loss(model.params, out.v_agents_flat,
                                               vconcat(rows), tau)
        else:
            losses["p3a"] = alignment.p3a_loss(model.params, out.v_ego_flat,
                                               reshape(logits.mean(axis=0), (1, n_vocab)))
    return losses


def _global_norm(named: list[tuple[str, Tensor]], grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for name, _ in named:
        g = grads[name]
        total += float((g * g).sum())
    return math.sqrt(total)


def train(corpus: Corpus, tcfg: TrainConfig, on_step=None) -> tuple[Model, list[StepReport]]:
    """Run the co-distillation loop; returns the model and per-step reports."""
    tcfg.validate()
    if corpus.world.n_agents != tcfg.n_agents:
        raise CorpusError(f"corpus has n_agents={corpus.world.n_agents}, "
                          f"config expects {tcfg.n_agents}")
    train_bundles = corpus.split("train")
    if not train_bundles:
        raise CorpusError("corpus has no training scenes")

    mcfg = ModelConfig(world=corpus.world)
    model = build_model(mcfg, tcfg.align_enabled, tcfg.seed)
    named = model.trainable()
    optim = Adam(named, lr=tcfg.learning_rate)
    weights = tcfg.loss_weights()
    reports: list[StepReport] = []

    for step in range(tcfg.steps):
        rng = np.random.default_rng([tcfg.seed, 3, step])
        picks = rng.integers(0, len(train_bundles), size=tcfg.batch_scenes)

        sums = {name: 0.0 for name in LOSS_NAMES}
        batch_terms = None
        for b, idx in enumerate(picks):
            bundle = train_bundles[int(idx)]
            category = SLOT_CYCLE[(step * tcfg.batch_scenes + b) % len(SLOT_CYCLE)]
            agent_idx = (step + b) % tcfg.n_agents
            sample = _sample_for(bundle, category, agent_idx)
            losses = scene_losses(model, bundle, sample, tcfg.tau)
            for name, tensor in losses.items():
                sums[name] += tensor.item()
                term = tensor * weights[name]
                batch_terms = term if batch_terms is None else batch_terms + term
        batch_loss = batch_terms * (1.0 / tcfg.batch_scenes)

        leaf_map = backward(batch_loss, leaves=[t for _, t in named])
        grads = {name: leaf_map[t] for name, t in named}
        norm = _global_norm(named, grads)
        if norm > CLIP_NORM:
            scale = CLIP_NORM / norm
            for name, _ in named:
                grads[name] = grads[name] * scale
        optim.step(grads)
        for name, tensor in named:
            if not np.isfinite(tensor.data).all():
                raise TrainError(f"non-finite update for {name} at step {step}")

        report = StepReport(
            step=step,
            total=float(batch_loss.item()),
            grad_norm=norm,
            **{name: sums[name] / tcfg.batch_scenes for name in LOSS_NAMES},
        )
        reports.append(report)
        if on_step is not None:
            on_step(report)
    return model, reports


def train_to_dir(corpus: Corpus, tcfg: TrainConfig, out_dir) -> tuple[Model, list[StepReport]]:
    """Train and write ``checkpoint.bin`` plus ``steps.jsonl`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    steps_path = out_dir / "steps.jsonl"
    with open(steps_path, "w", encoding="utf-8") as fh:
        model, reports = train(corpus, tcfg, on_step=lambda r: fh.write(r.to_json() + "\n"))
    model.save(out_dir / "checkpoint.bin")
    return model, reports


def ablate(corpus: Corpus, tcfg: TrainConfig, out_dir) -> dict:
    """Train alignment-on and alignment-off arms from one seed and compare."""
    from .evaluate import evaluate

    out_dir = Path(out_dir)
    results = {}
    for arm, enabled in (("align", True), ("noalign", False)):
        arm_cfg = replace(tcfg, align_enabled=enabled)
        model, reports = train_to_dir(corpus, arm_cfg, out_dir / arm)
        report = evaluate(model, corpus, split="val", bank_seed=tcfg.seed)
        (out_dir / arm / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
        results[arm] = {
            "eval": report.to_dict(),
            "step0": asdict(reports[0]) if reports else None,
            "final": asdict(reports[-1]) if reports else None,
        }
    comparison = {"metrics": results, "seed": tcfg.seed, "steps": tcfg.steps}
    (out_dir / "ablation.json").write_text(
        json.dumps(comparison, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return comparison
