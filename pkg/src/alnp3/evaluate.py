"""Metric suite: horizon collision rates, corpus BLEU-4, QA accuracy, and the
cross-modal consistency probe.

Evaluation is read-only over a checkpoint: forwards run with graph recording
off and the report is a plain JSON document, so repeated runs on the same
inputs are byte-identical.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import alignment, vocab
from .autodiff import DomainError, no_grad, reshape
from .model import Model
from .util import parallel_map
from .world import Corpus, CorpusError, SceneBundle

RADII = {"car": 1.0, "truck": 1.5, "pedestrian": 0.3, "barrier": 0.5}
EGO_RADIUS = 1.0
HORIZONS_S = (1.0, 2.0, 3.0)

_CAPTION_MAX_LEN = 16
_ANSWER_MAX_LEN = 6


@dataclass
class EvalReport:
    collision_rate: dict[str, float]
    bleu4: float
    qa_acc: dict[str, float]
    consistency: float
    n_scenes: int

    def to_dict(self) -> dict:
        return {
            "collision_rate": self.collision_rate,
            "bleu4": self.bleu4,
            "qa_acc": self.qa_acc,
            "consistency": self.consistency,
            "n_scenes": self.n_scenes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def horizon_steps(dt: float, t_f: int) -> dict[str, int]:
    steps = {}
    for sec in HORIZONS_S:
        n = int(round(sec / dt))
        if n > t_f:
            raise DomainError(f"horizon {sec}s needs {n} steps but plans have {t_f}")
        steps[f"{int(sec)}s"] = n
    return steps


def collision_rate(plans: list[np.ndarray], scenes, dt: float, t_f: int) -> dict[str, float]:
    """Fraction of scenes whose plan passes within disc range of any agent.

    A scene collides at a horizon if any plan point up to that horizon's
    step is within ``EGO_RADIUS + RADII[class]`` of the same-step
    ground-truth position of any agent.
    """
    if len(plans) != len(scenes):
        raise DomainError(f"collision_rate: {len(plans)} plans vs {len(scenes)} scenes")
    steps = horizon_steps(dt, t_f)
    hits = {label: 0 for label in steps}
    for plan, scene in zip(plans, scenes):
        for label, n in steps.items():
            collided = False
            for agent in scene.agents:
                reach = EGO_RADIUS + RADII[agent.cls]
                gaps = np.linalg.norm(plan[:n] - agent.future[:n], axis=1)
                if (gaps <= reach).any():
                    collided = True
                    break
            hits[label] += int(collided)
    total = max(1, len(scenes))
    rates = {label: hits[label] / total for label in steps}
    rates["avg"] = float(np.mean([rates[f"{int(s)}s"] for s in HORIZONS_S]))
    return rates


def _ngrams(tokens: list[int], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidates: list[list[int]], references: list[list[int]]) -> float:
    """Corpus BLEU with uniform 1..4-gram weights, add-one smoothing for
    n >= 2, and the standard brevity penalty."""
    if not candidates:
        raise DomainError("bleu4: empty candidate set")
    if len(candidates) != len(references):
        raise DomainError(f"bleu4: {len(candidates)} candidates vs "
                          f"{len(references)} references")
    matches = [0] * 5
    totals = [0] * 5
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, 5):
            grams = _ngrams(cand, n)
            ref_grams = _ngrams(ref, n)
            totals[n] += max(0, len(cand) - n + 1)
            matches[n] += sum(min(count, ref_grams[g]) for g, count in grams.items())
    if totals[1] == 0 or matches[1] == 0:
        return 0.0
    log_sum = math.log(matches[1] / totals[1])
    for n in range(2, 5):
        log_sum += math.log((matches[n] + 1) / (totals[n] + 1))
    brevity = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return brevity * math.exp(log_sum / 4.0)


def strip_eos(tokens: list[int]) -> list[int]:
    toks = list(tokens)
    while toks and toks[-1] == vocab.EOS_ID:
        toks.pop()
    return toks


def qa_scores(triples: list[tuple[list[int], list[int], str]]) -> dict[str, float]:
    """Exact-match accuracy per hop class from (predicted, gold, hop) triples."""
    correct = {"H0": 0, "H1": 0}
    counts = {"H0": 0, "H1": 0}
    for predicted, gold, hop in triples:
        counts[hop] += 1
        correct[hop] += int(strip_eos(predicted) == strip_eos(gold))
    out = {}
    for hop in ("H0", "H1"):
        out[hop] = correct[hop] / counts[hop] if counts[hop] else 0.0
    total = counts["H0"] + counts["H1"]
    out["All"] = (correct["H0"] + correct["H1"]) / total if total else 0.0
    return out


def _pooled_cosine(model: Model, params: dict, bundle: SceneBundle) -> float:
    out = model.fast_forward(bundle.scene)
    ctx = model.mix(out)
    sample = next(s for s in bundle.language if s.category == "planning")
    logits = model.teacher_logits(ctx, sample.prompt, sample.target)
    mean_row = reshape(logits.mean(axis=0), (1, vocab.vocab_size()))
    loss = alignment.p3a_loss(params, out.v_ego_flat, mean_row)
    return -loss.item()


def consistency_probe(model: Model, bundles: list[SceneBundle], bank_seed: int = 0) -> float:
    """Mean cosine between the pooled ego plan and pooled planning answer.

    Models without alignment tensors are probed with freshly initialized
    banks (seeded by ``bank_seed``), reporting the raw untrained value.
    """
    if model.align_enabled:
        params = model.params
    else:
        fresh = alignment.init_align_params(model.cfg, np.random.default_rng([bank_seed, 2]))
        params = {**model.params, **fresh}
    with no_grad():
        values = parallel_map(lambda b: _pooled_cosine(model, params, b), bundles)
    return float(np.mean(values)) if values else 0.0


def evaluate(model: Model, corpus: Corpus, split: str = "val", bank_seed: int = 0) -> EvalReport:
    """Full metric pass over one corpus split."""
    bundles = corpus.split(split)
    if not bundles:
        raise CorpusError(f"corpus has no {split!r} scenes to evaluate")
    w = corpus.world

    def scene_metrics(bundle: SceneBundle):
        with no_grad():
            out = model.fast_forward(bundle.scene)
            ctx = model.mix(out)
            plan = out.v_ego.data.copy()
            captions = []
            for s in bundle.language:
                if s.category != "perception":
                    continue
                decoded = model.decode(ctx, s.prompt, _CAPTION_MAX_LEN)
                captions.append((decoded.tokens, s.target))
            answers = []
            for q in bundle.qa:
                decoded = model.decode(ctx, q.question, _ANSWER_MAX_LEN)
                answers.append((decoded.tokens, q.answer, q.hop))
        return plan, captions, answers

    per_scene = parallel_map(scene_metrics, bundles)
    plans = [p for p, _, _ in per_scene]
    cand, refs = [], []
    qa_triples = []
    for _, captions, answers in per_scene:
        for decoded, gold in captions:
            cand.append(strip_eos(decoded))
            refs.append(strip_eos(gold))
        qa_triples.extend(answers)

    return EvalReport(
        collision_rate=collision_rate(plans, [b.scene for b in bundles], w.dt, w.t_f),
        bleu4=bleu4(cand, refs),
        qa_acc=qa_scores(qa_triples),
        consistency=consistency_probe(model, bundles, bank_seed=bank_seed),
        n_scenes=len(bundles),
    )
