"""Experiment configuration: one JSON document, validated on load.

Component seeds in the document are local; the effective seed of each
component is derived from ``master_seed`` so that ``--seed`` reseeds the
whole pipeline.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .. import rng
from ..datagen import GenSpec, ShiftSpec
from ..errors import ConfigError, WiselabError
from ..model import ModelSpec
from ..train import TrainConfig

CONFIG_VERSION = 1
BASELINE_NAMES = (
    "distill",
    "reg_to_init",
    "label_smoothing",
    "l1",
    "wd",
    "random_interp",
    "ose_logits",
    "ose_softmax",
    "ema",
)


@dataclass(frozen=True)
class EmaConfig:
    decay: float = 0.99


@dataclass(frozen=True)
class BaselineParams:
    distill_alpha: float = 0.5
    reg_to_init: float = 1e-2
    label_smoothing: float = 0.1
    l1: float = 1e-4
    weight_decay: float = 1.0
    random_interp_seed: int = 0


@dataclass(frozen=True)
class ZooMember:
    """One reference-only model for the effective-robustness baseline."""

    epochs: int
    per_class: int


@dataclass(frozen=True)
class ExperimentConfig:
    gen: GenSpec
    model: ModelSpec
    shifts: tuple[tuple[str, ShiftSpec], ...]
    pretrain: TrainConfig
    finetune: TrainConfig
    alpha_grid: tuple[float, ...]
    k_shot: int | None = None
    ema: EmaConfig | None = None
    baselines_to_run: tuple[str, ...] = ()
    baseline_params: BaselineParams = field(default_factory=BaselineParams)
    zoo: tuple[ZooMember, ...] = ()
    diversity_alpha: float = 0.5
    output_dir: str = "wiselab-out"
    master_seed: int = 0
    version: int = CONFIG_VERSION

    def __post_init__(self):
        grid = self.alpha_grid
        if list(grid) != sorted(set(grid)):
            raise ConfigError("alpha_grid must be sorted and unique")
        if not grid or grid[0] != 0.0 or grid[-1] != 1.0:
            raise ConfigError("alpha_grid must include both endpoints 0 and 1")
        if any(not 0.0 <= a <= 1.0 for a in grid):
            raise ConfigError("alpha_grid values must lie in [0, 1]")
        if self.model.d_in != self.gen.d_in or self.model.k != self.gen.k:
            raise ConfigError("model input width / class count disagree with gen spec")
        names = [n for n, _ in self.shifts]
        if len(set(names)) != len(names) or not names:
            raise ConfigError("shift names must be unique and at least one shift is required")
        for n in names:
            if not n.replace("_", "").replace("-", "").isalnum() or n in ("ref", "avg"):
                raise ConfigError(f"bad shift name {n!r}")
        unknown = set(self.baselines_to_run) - set(BASELINE_NAMES)
        if unknown:
            raise ConfigError(f"unknown baselines: {sorted(unknown)}")
        if self.k_shot is not None and self.k_shot <= 0:
            raise ConfigError("k_shot must be positive")
        if not 0.0 <= self.diversity_alpha <= 1.0:
            raise ConfigError("diversity_alpha must lie in [0, 1]")
        if "ema" in self.baselines_to_run and self.ema is None:
            raise ConfigError("the ema baseline needs an 'ema' section")
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")

    # effective seeds --------------------------------------------------------

    def seed_for(self, purpose: str, local: int = 0) -> int:
        return rng.stream_seed(self.master_seed, f"harness.{purpose}", local) & ((1 << 63) - 1)

    @property
    def effective_gen(self) -> GenSpec:
        return replace(self.gen, seed=self.seed_for("gen", self.gen.seed))

    def effective_shift(self, name: str) -> ShiftSpec:
        s = dict(self.shifts)[name]
        return replace(s, seed=self.seed_for(f"shift.{name}", s.seed))

    def effective_train(self, which: str) -> TrainConfig:
        cfg = getattr(self, which)
        return replace(cfg, seed=self.seed_for(which, cfg.seed))

    @property
    def shift_names(self) -> list[str]:
        return [n for n, _ in self.shifts]

    # (de)serialization -------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "master_seed": self.master_seed,
            "output_dir": self.output_dir,
            "gen": asdict(self.gen),
            "model": {
                "layer_widths": list(self.model.layer_widths),
                "activation": self.model.activation,
                "normalize_features": self.model.normalize_features,
            },
            "shifts": [dict(name=n, **asdict(s)) for n, s in self.shifts],
            "pretrain": self.pretrain.to_dict(),
            "finetune": self.finetune.to_dict(),
            "alpha_grid": list(self.alpha_grid),
            "k_shot": self.k_shot,
            "ema": None if self.ema is None else asdict(self.ema),
            "baselines_to_run": list(self.baselines_to_run),
            "baseline_params": asdict(self.baseline_params),
            "zoo": [asdict(z) for z in self.zoo],
            "diversity_alpha": self.diversity_alpha,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        try:
            return _from_dict(data)
        except ConfigError:
            raise
        except (WiselabError, TypeError, KeyError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _strict(dc, data: dict, what: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{what} must be an object")
    known = {f.name for f in fields(dc)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {what}: {sorted(unknown)}")
    return dc(**data)


_TOP_KEYS = {
    "version", "master_seed", "output_dir", "gen", "model", "shifts", "pretrain", "finetune",
    "alpha_grid", "k_shot", "ema", "baselines_to_run", "baseline_params", "zoo", "diversity_alpha",
}


def _from_dict(data: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    for key in ("gen", "model", "shifts", "pretrain", "finetune", "alpha_grid"):
        if key not in data:
            raise ConfigError(f"missing required key {key!r}")
    gen = _strict(GenSpec, data["gen"], "gen")
    m = dict(data["model"])
    unknown = set(m) - {"layer_widths", "activation", "normalize_features"}
    if unknown:
        raise ConfigError(f"unknown keys in model: {sorted(unknown)}")
    model = ModelSpec(
        layer_widths=tuple(m.get("layer_widths", (gen.d_in, 64, 32))),
        activation=m.get("activation", "relu"),
        k=gen.k,
        normalize_features=bool(m.get("normalize_features", True)),
    )
    shifts = []
    for entry in data["shifts"]:
        entry = dict(entry)
        name = entry.pop("name", None)
        if not isinstance(name, str):
            raise ConfigError("every shift needs a string 'name'")
        shifts.append((name, _strict(ShiftSpec, entry, f"shift {name!r}")))
    ema = data.get("ema")
    return ExperimentConfig(
        gen=gen,
        model=model,
        shifts=tuple(shifts),
        pretrain=TrainConfig.from_dict(data["pretrain"]),
        finetune=TrainConfig.from_dict(data["finetune"]),
        alpha_grid=tuple(float(a) for a in data["alpha_grid"]),
        k_shot=data.get("k_shot"),
        ema=None if ema is None else _strict(EmaConfig, ema, "ema"),
        baselines_to_run=tuple(data.get("baselines_to_run", ())),
        baseline_params=_strict(BaselineParams, data.get("baseline_params", {}), "baseline_params"),
        zoo=tuple(_strict(ZooMember, z, "zoo member") for z in data.get("zoo", ())),
        diversity_alpha=float(data.get("diversity_alpha", 0.5)),
        output_dir=str(data.get("output_dir", "wiselab-out")),
        master_seed=int(data.get("master_seed", 0)),
        version=int(data.get("version", CONFIG_VERSION)),
    )


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        return ExperimentConfig.from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"config {path}: {exc}") from exc


def default_config() -> ExperimentConfig:
    """The shipped desk-scale experiment; tuned so every stage finishes in seconds."""
    gen = GenSpec(
        k=10,
        d_in=16,
        per_class_train=60,
        per_class_test=100,
        cluster_spread=1.6,
        pretrain_style_count=8,
        seed=0,
        style_rotation=1.0,
        style_mean_shift=10.0,
        style_noise=0.5,
    )
    shifts = (
        ("rotated", ShiftSpec(rotation_angle=0.96, mean_shift=1.44, seed=1)),
        ("noisy", ShiftSpec(noise_sigma=0.768, mean_shift=1.44, seed=2)),
        ("displaced", ShiftSpec(mean_shift=2.88, seed=3)),
        ("masked", ShiftSpec(mask_fraction=0.24, mean_shift=1.44, seed=4)),
        ("mixed", ShiftSpec(rotation_angle=0.672, mean_shift=2.016, noise_sigma=0.384, seed=5)),
    )
    return ExperimentConfig(
        gen=gen,
        model=ModelSpec(layer_widths=(16, 64, 32), activation="relu", k=10, normalize_features=True),
        shifts=shifts,
        pretrain=TrainConfig(
            mode="end2end", epochs=8, batch_size=64, lr_max=3e-3, warmup_steps=50, weight_decay=0.01
        ),
        finetune=TrainConfig(
            mode="linear_head", epochs=10, batch_size=64, lr_max=3e-2, warmup_steps=20, weight_decay=0.1
        ),
        alpha_grid=tuple(round(0.05 * i, 2) for i in range(21)),
        k_shot=None,
        ema=EmaConfig(decay=0.99),
        baselines_to_run=BASELINE_NAMES,
        zoo=(
            ZooMember(epochs=1, per_class=5),
            ZooMember(epochs=2, per_class=10),
            ZooMember(epochs=4, per_class=20),
            ZooMember(epochs=8, per_class=30),
            ZooMember(epochs=8, per_class=60),
            ZooMember(epochs=16, per_class=60),
        ),
        master_seed=0,
    )
