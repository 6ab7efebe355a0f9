"""Flat key=value run configuration.

One plain-text file configures every subcommand: dotted ``section.key``
names, one per line, ``#`` comments allowed. Unknown keys are hard errors so
typos cannot silently fall back to defaults, and every run writes the fully
resolved configuration (defaults included) next to its outputs.
"""

from __future__ import annotations

from pathlib import Path

from .data import AugmentParams, SynthParams
from .interpret import AscentConfig
from .model import DenseNetConfig
from .train import PretextConfig, TrainConfig


class ConfigError(ValueError):
    """Bad key, bad value, or unparsable config file."""


def _parse_bool(raw: str) -> bool:
    if raw == "true":
        return True
    if raw == "false":
        return False
    raise ValueError(f"expected true/false, got {raw!r}")


def _parse_intlist(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in raw.split(","))


_PARSERS = {"int": int, "float": float, "bool": _parse_bool, "str": str,
            "intlist": _parse_intlist}

# name -> (kind, default); None defaults mean "unset"
KEYS: dict[str, tuple[str, object]] = {
    "seed": ("int", 0),
    "jobs": ("int", 1),
    "out": ("str", "runs/latest"),
    "data.manifest": ("str", None),

    "model.input_size": ("int", 64),
    "model.stem_filters": ("int", 8),
    "model.growth_rate": ("int", 4),
    "model.block_layout": ("intlist", (2, 2, 2)),
    "model.compression": ("float", 0.5),
    "model.kernel_size": ("int", 3),

    "synth.size": ("int", 64),
    "synth.n_loose": ("int", 100),
    "synth.n_well_fixed": ("int", 100),
    "synth.noise_scale": ("float", 2.5),
    "synth.noise_amp": ("float", 0.06),
    "synth.lucency_width_min": ("int", 2),
    "synth.lucency_width_max": ("int", 4),
    "synth.lucency_contrast": ("float", 0.25),
    "synth.stem_len_min": ("float", 0.38),
    "synth.stem_len_max": ("float", 0.50),
    "synth.stem_width_min": ("float", 0.11),
    "synth.stem_width_max": ("float", 0.16),
    "synth.stem_taper_min": ("float", 0.45),
    "synth.stem_taper_max": ("float", 0.75),
    "synth.stem_angle_min": ("float", -8.0),
    "synth.stem_angle_max": ("float", 8.0),
    "synth.cup_radius_min": ("float", 0.10),
    "synth.cup_radius_max": ("float", 0.14),

    "augment.rotation_deg": ("float", 5.0),
    "augment.scale_delta": ("float", 0.1),
    "augment.translate_frac": ("float", 0.05),
    "augment.intensity": ("float", 0.05),

    "train.epochs": ("int", 10),
    "train.batch_size": ("int", 2),
    "train.lr": ("float", 1e-4),
    "train.regime": ("str", "retrained"),
    "train.pretext_checkpoint": ("str", None),

    "pretext.n_images": ("int", 2000),
    "pretext.holdout_frac": ("float", 0.2),
    "pretext.epochs": ("int", 6),
    "pretext.batch_size": ("int", 16),
    "pretext.lr": ("float", 3e-3),
    "pretext.use_dropout": ("bool", False),

    "eval.k": ("int", 5),
    "eval.stratified": ("bool", True),
    "eval.reader_sensitivity": ("float", None),
    "eval.reader_specificity": ("float", None),

    "ascent.steps": ("int", 128),
    "ascent.step_size": ("float", 0.1),
    "ascent.weight_decay": ("float", 1e-3),
}


def parse_config_file(path) -> dict[str, str]:
    """Raw key=value pairs; unknown keys and malformed lines are errors."""
    raw: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for n, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}: line {n}: expected key=value")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"{path}: line {n}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{path}: line {n}: duplicate key {key!r}")
        raw[key] = value.strip()
    return raw


class RunConfig:
    """Fully resolved configuration: every known key has a final value."""

    def __init__(self, values: dict[str, object]):
        self.values = values

    @classmethod
    def resolve(cls, file_values: dict[str, str] | None = None,
                overrides: dict[str, object] | None = None) -> "RunConfig":
        values: dict[str, object] = {}
        for key, (kind, default) in KEYS.items():
            raw = (file_values or {}).get(key)
            if raw is None or raw == "":
                values[key] = default
            else:
                try:
                    values[key] = _PARSERS[kind](raw)
                except ValueError as exc:
                    raise ConfigError(f"key {key!r}: {exc}") from exc
        for key, value in (overrides or {}).items():
            if key not in KEYS:
                raise ConfigError(f"unknown override key {key!r}")
            if value is not None:
                values[key] = value
        return cls(values)

    def __getitem__(self, key: str):
        return self.values[key]

    def resolved_text(self) -> str:
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            if value is None:
                rendered = ""
            elif isinstance(value, bool):
                rendered = "true" if value else "false"
            elif isinstance(value, tuple):
                rendered = ",".join(str(v) for v in value)
            else:
                rendered = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{key}={rendered}")
        return "\n".join(lines) + "\n"

    def write_resolved(self, path) -> None:
        Path(path).write_text(self.resolved_text(), encoding="utf-8")

    # ---- builders for the runtime dataclasses ----

    def model_config(self) -> DenseNetConfig:
        return DenseNetConfig(
            input_size=self["model.input_size"],
            stem_filters=self["model.stem_filters"],
            growth_rate=self["model.growth_rate"],
            block_layout=self["model.block_layout"],
            compression=self["model.compression"],
            kernel_size=self["model.kernel_size"],
        )

    def synth_params(self) -> SynthParams:
        return SynthParams(
            size=self["synth.size"],
            n_loose=self["synth.n_loose"],
            n_well_fixed=self["synth.n_well_fixed"],
            seed=self["seed"],
            stem_len_frac=(self["synth.stem_len_min"], self["synth.stem_len_max"]),
            stem_width_frac=(self["synth.stem_width_min"],
                             self["synth.stem_width_max"]),
            stem_taper=(self["synth.stem_taper_min"], self["synth.stem_taper_max"]),
            stem_angle_deg=(self["synth.stem_angle_min"],
                            self["synth.stem_angle_max"]),
            cup_radius_frac=(self["synth.cup_radius_min"],
                             self["synth.cup_radius_max"]),
            noise_scale=self["synth.noise_scale"],
            noise_amp=self["synth.noise_amp"],
            lucency_width=(self["synth.lucency_width_min"],
                           self["synth.lucency_width_max"]),
            lucency_contrast=self["synth.lucency_contrast"],
        )

    def augment_params(self) -> AugmentParams:
        return AugmentParams(
            rotation_deg=self["augment.rotation_deg"],
            scale_delta=self["augment.scale_delta"],
            translate_frac=self["augment.translate_frac"],
            intensity=self["augment.intensity"],
        )

    def train_config(self, regime: str) -> TrainConfig:
        return TrainConfig(
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            lr=self["train.lr"],
            regime=regime,
            seed=self["seed"],
            augment=self.augment_params(),
            pretext_checkpoint=self["train.pretext_checkpoint"],
        )

    def pretext_config(self) -> PretextConfig:
        return PretextConfig(
            n_images=self["pretext.n_images"],
            holdout_frac=self["pretext.holdout_frac"],
            epochs=self["pretext.epochs"],
            batch_size=self["pretext.batch_size"],
            lr=self["pretext.lr"],
            seed=self["seed"],
            use_dropout=self["pretext.use_dropout"],
        )

    def ascent_config(self) -> AscentConfig:
        return AscentConfig(
            steps=self["ascent.steps"],
            step_size=self["ascent.step_size"],
            weight_decay=self["ascent.weight_decay"],
            seed=self["seed"],
        )

    def reader_point(self) -> tuple[float, float] | None:
        sens = self["eval.reader_sensitivity"]
        spec = self["eval.reader_specificity"]
        if sens is None and spec is None:
            return None
        if sens is None or spec is None:
            raise ConfigError("eval.reader_sensitivity and "
                              "eval.reader_specificity must be set together")
        return (1.0 - spec, sens)
