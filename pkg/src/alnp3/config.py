"""Flat key-value training configuration and the run manifest.

Config files are one ``key = value`` per line; blank lines and ``#``
comments are allowed, unknown keys are hard errors so typos cannot silently
fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import sha256_file


class ConfigError(ValueError):
    """Bad configuration file or invalid field value."""


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    steps: int = 2000
    batch_scenes: int = 4
    seed: int = 0
    align_enabled: bool = True
    tau: float = 0.07
    n_agents: int = 4
    weight_task: float = 1.0
    weight_lm: float = 1.0
    weight_p1a: float = 1.0
    weight_p2a: float = 1.0
    weight_p3a: float = 1.0

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.steps < 0:
            raise ConfigError(f"steps must be non-negative, got {self.steps}")
        if self.batch_scenes < 1:
            raise ConfigError(f"batch_scenes must be >= 1, got {self.batch_scenes}")
        if not 1 <= self.n_agents <= 16:
            raise ConfigError(f"n_agents must be in [1, 16], got {self.n_agents}")
        return self

    def loss_weights(self) -> dict[str, float]:
        return {
            "task": self.weight_task,
            "lm": self.weight_lm,
            "p1a": self.weight_p1a,
            "p2a": self.weight_p2a,
            "p3a": self.weight_p3a,
        }

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return int(raw) if kind == "int" else float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc


def parse_config(text: str) -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = _coerce(key, raw)
    return TrainConfig(**values).validate()


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: TrainConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(TrainConfig)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    config: dict
    corpus_sha256: str
    checkpoints: dict[str, str] = field(default_factory=dict)
    version: str = ""
    timings: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


class PhaseTimer:
    """Wall-clock accumulator for manifest timings."""

    def __init__(self):
        self.timings: dict[str, float] = {}

    def time(self, phase: str):
        timer = self

        class _Span:
            def __enter__(self):
                self.start = time.monotonic()
                return self

            def __exit__(self, *exc):
                timer.timings[phase] = timer.timings.get(phase, 0.0) + (
                    time.monotonic() - self.start)
                return False

        return _Span()


def write_manifest(path, manifest: RunManifest) -> None:
    Path(path).write_text(manifest.to_json() + "\n", encoding="utf-8")


def load_manifest(path) -> RunManifest:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return RunManifest(**data)


def verify_manifest(run_dir) -> RunManifest:
    """Recompute artifact hashes for a run directory and compare to stored."""
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir / "manifest.json")
    for rel, recorded in manifest.checkpoints.items():
        actual = sha256_file(run_dir / rel)
        if actual != recorded:
            raise ConfigError(f"manifest hash mismatch for {rel}: "
                              f"recorded {recorded[:12]}, recomputed {actual[:12]}")
    return manifest
