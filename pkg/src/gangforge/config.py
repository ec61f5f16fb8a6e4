"""Experiment configuration: one JSON file plus GANGFORGE_* environment overrides."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .ablation import AblationConfig
from .attack import AttackConfig
from .data import SynthConfig
from .detector import DetectorConfig
from .graph import ConfigError

ENV_PREFIX = "GANGFORGE_"
REQUIRED = ("dataset", "rho", "xi", "p", "detector", "victim", "attack", "output_dir", "seeds")


@dataclass
class ExperimentConfig:
    dataset_path: Path | None
    synth: SynthConfig | None
    rho: float
    xi: float
    p: float
    detector: DetectorConfig
    victim: DetectorConfig
    attack: AttackConfig
    output_dir: Path
    seeds: list[int]
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def seed_offset(self, seed_index: int) -> int:
        if not 0 <= seed_index < len(self.seeds):
            raise ConfigError(f"seed index {seed_index} outside seeds list of length {len(self.seeds)}")
        return self.seeds[seed_index]

    def seeded(self, seed_index: int) -> "ExperimentConfig":
        """Copy with detector, victim and attack seeds shifted by ``seeds[seed_index]``."""
        s = self.seed_offset(seed_index)
        return dataclasses.replace(
            self,
            detector=dataclasses.replace(self.detector, seed=self.detector.seed + s),
            victim=dataclasses.replace(self.victim, seed=self.victim.seed + s),
            attack=dataclasses.replace(self.attack, seed=self.attack.seed + s),
        )


def _build(cls, raw, where: str, required: tuple[str, ...] = ()):
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    missing = [k for k in required if k not in raw]
    if missing:
        raise ConfigError(f"{where}: missing required field(s) {', '.join(missing)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _coerce_env(value: str) -> Any:
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def apply_env_overrides(raw: dict, environ: Mapping[str, str] | None = None) -> dict:
    """GANGFORGE_RHO=0.2 sets ``rho``; GANGFORGE_ATTACK__EPOCHS=5 sets ``attack.epochs``."""
    environ = os.environ if environ is None else environ
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: cannot override inside non-object field")
        node[path[-1]] = _coerce_env(environ[key])
    return raw


def config_from_dict(raw: Mapping) -> ExperimentConfig:
    raw = dict(raw)
    missing = [k for k in REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"missing required field(s): {', '.join(missing)}")
    unknown = sorted(set(raw) - set(REQUIRED) - {"ablation"})
    if unknown:
        raise ConfigError(f"unknown field(s): {', '.join(unknown)}")

    ds = raw["dataset"]
    if not isinstance(ds, Mapping) or len(ds) != 1 or not ({"path", "synth"} & set(ds)):
        raise ConfigError("dataset: expected exactly one of {'path': ...} or {'synth': {...}}")
    dataset_path = Path(ds["path"]) if "path" in ds else None
    synth = _build(SynthConfig, ds["synth"], "dataset.synth", ("seed",)) if "synth" in ds else None

    for name in ("rho", "xi", "p"):
        if not isinstance(raw[name], (int, float)) or isinstance(raw[name], bool):
            raise ConfigError(f"{name}: expected a number")
    if not 0 < raw["rho"] <= 1:
        raise ConfigError("rho: must be in (0, 1]")
    if raw["xi"] <= 0:
        raise ConfigError("xi: must be positive")
    if not 0 < raw["p"] < 1:
        raise ConfigError("p: must be in (0, 1)")

    detector = _build(DetectorConfig, raw["detector"], "detector", ("architecture", "seed"))
    victim = _build(DetectorConfig, raw["victim"], "victim", ("architecture", "seed"))
    if detector.seed == victim.seed:
        raise ConfigError("victim.seed: surrogate and victim detectors must use different seeds")
    attack = _build(AttackConfig, raw["attack"], "attack", ("seed",))
    ablation = _build(AblationConfig, raw.get("ablation", {}), "ablation")

    seeds = raw["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds: expected a nonempty list of integers")
    if not isinstance(raw["output_dir"], str) or not raw["output_dir"]:
        raise ConfigError("output_dir: expected a path string")
    return ExperimentConfig(
        dataset_path, synth, float(raw["rho"]), float(raw["xi"]), float(raw["p"]),
        detector, victim, attack, Path(raw["output_dir"]), seeds, ablation,
    )


def load_config(path: str | Path, environ: Mapping[str, str] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(apply_env_overrides(raw, environ))


def reference_config(output_dir: str | Path, epochs: int = 100) -> dict:
    """The bundled 2,000-node synthetic experiment, as a plain dict."""
    return {
        "dataset": {"synth": SynthConfig().to_dict()},
        "rho": 0.1,
        "xi": 0.5,
        "p": 0.4,
        "detector": {"architecture": "gcn", "seed": 0},
        "victim": {"architecture": "gcn", "seed": 1},
        "attack": {"seed": 0, "epochs": epochs},
        "ablation": {"random_attributes": True, "random_edges": True, "fixed_budget": True},
        "output_dir": str(output_dir),
        "seeds": [0, 1, 2],
    }
