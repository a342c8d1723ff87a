"""Flat ``key = value`` run configuration.

Every accepted key is declared in :data:`KEYS` with its parser and default;
unknown keys are errors so typos never pass silently.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable

from .augment import TRANSFORMS, AugmentConfig
from .model import TASKS, ModelConfig
from .phantom import PhantomSpec


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _real(s: str) -> float:
    return float(Fraction(s.strip()))


def _dims(s: str) -> tuple[int, int, int]:
    parts = [int(p) for p in s.replace("x", ",").split(",") if p.strip()]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise ValueError(f"expected 1 or 3 sizes, got {s!r}")
    return tuple(parts)


def _reals(s: str) -> tuple[float, ...]:
    return tuple(_real(p) for p in s.split(",") if p.strip())


def _names(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        s = s.strip()
        if s not in options:
            raise ValueError(f"must be one of {', '.join(options)}; got {s!r}")
        return s
    return parse


VARIANTS = ("BAPM", "BAPM-R", "BAPM-S", "BAPM-B", "BAPMw/oA")

# key -> (parser, default as text, help)
KEYS: dict[str, tuple[Callable, str, str]] = {
    "seed": (int, "0", "master random seed"),
    "model.width_factor": (_real, "1/8", "channel scaling (1 = published size)"),
    "model.input_dims": (_dims, "32", "network input size, multiples of 16"),
    "model.num_classes": (int, "2", "downstream classes"),
    "phantom.dims": (_dims, "32", "phantom volume size"),
    "phantom.gm_thickness": (_real, "0.12", "gray-matter shell width (fraction of dims)"),
    "phantom.atrophy_delta": (_real, "0.3", "relative shell thinning of class 1"),
    "phantom.deformation": (_real, "2.0", "smooth deformation amplitude (voxels)"),
    "phantom.noise": (_real, "0.03", "tissue intensity std"),
    "augment.enabled": (_bool, "true", "master switch for pretext augmentation"),
    "augment.affine.rotation_max": (_real, "10", "degrees"),
    "augment.affine.scale_min": (_real, "0.9", ""),
    "augment.affine.scale_max": (_real, "1.1", ""),
    "augment.affine.translation_max": (_real, "5", "voxels"),
    "augment.blur.sigma_max": (_real, "2", "voxels"),
    "augment.noise.sigma_max": (_real, "0.05", "fraction of intensity range"),
    "augment.bias.order": (int, "3", "polynomial degree"),
    "augment.bias.coef_max": (_real, "0.3", ""),
    "augment.motion.movements_min": (int, "1", ""),
    "augment.motion.movements_max": (int, "3", ""),
    "augment.motion.rotation_max": (_real, "5", "degrees"),
    "augment.motion.translation_max": (_real, "3", "voxels"),
    "augment.motion.ghost_weight_max": (_real, "0.2", "largest weight of one moved copy"),
    **{f"augment.{t}.probability": (_real, "0.5", "chance the transform fires") for t in TRANSFORMS},
    **{f"augment.{t}.enabled": (_bool, "true", "") for t in TRANSFORMS},
    "train.pretext.tasks": (_choice(*TASKS), "both", "both | rec_only | seg_only"),
    "train.pretext.epochs": (int, "30", ""),
    "train.pretext.batch_size": (int, "4", ""),
    "train.pretext.lr": (_real, "1e-4", ""),
    "train.pretext.fraction": (_real, "1.0", "share of the pretext set used"),
    "train.finetune.epochs": (int, "90", ""),
    "train.finetune.batch_size": (int, "2", ""),
    "train.finetune.lr": (_real, "1e-4", "start learning rate"),
    "train.finetune.decay": (_real, "0.1", "learning-rate factor per decay step"),
    "train.finetune.decay_every": (int, "30", "epochs between decays"),
    "eval.train_fraction": (_real, "0.8", "per-class training share of each split"),
    "eval.repeats": (int, "5", "independent splits"),
    "eval.threshold": (_real, "0.5", "positive-class probability cut"),
    "data.pretext_count": (int, "100", "pretext phantoms per class"),
    "data.target_count": (int, "30", "downstream phantoms per class"),
    "data.heldout_count": (int, "10", "held-out pretext phantoms per class"),
    "ablate.variants": (_names, "BAPM,BAPM-R,BAPM-S,BAPM-B", ", ".join(VARIANTS)),
    "ablate.fractions": (_reals, "0.2,0.6,1.0", "pretext fractions to sweep"),
}


@dataclass(frozen=True)
class PretextSettings:
    tasks: str = "both"
    epochs: int = 30
    batch_size: int = 4
    lr: float = 1e-4
    fraction: float = 1.0


@dataclass(frozen=True)
class FinetuneSettings:
    epochs: int = 90
    batch_size: int = 2
    lr: float = 1e-4
    decay: float = 0.1
    decay_every: int = 30


@dataclass(frozen=True)
class EvalSettings:
    train_fraction: float = 0.8
    repeats: int = 5
    threshold: float = 0.5


class Settings:
    """Resolved configuration: defaults, then file values, then overrides."""

    def __init__(self, values: dict | None = None):
        self.values = {k: spec[0](spec[1]) for k, spec in KEYS.items()}
        self.text = {k: spec[1] for k, spec in KEYS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)
        self.validate()

    def set(self, key: str, raw) -> None:
        if key not in KEYS:
            raise ConfigError(key, "unknown configuration key")
        parser = KEYS[key][0]
        try:
            value = parser(raw) if isinstance(raw, str) else raw
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(key, str(exc)) from None
        self.values[key] = value
        self.text[key] = raw if isinstance(raw, str) else _format(value)

    def __getitem__(self, key: str):
        return self.values[key]

    def updated(self, **overrides) -> "Settings":
        """Copy with keys replaced; dots in keys are written as double underscores."""
        s = Settings.__new__(Settings)
        s.values = dict(self.values)
        s.text = dict(self.text)
        for k, v in overrides.items():
            s.set(k.replace("__", "."), v)
        s.validate()
        return s

    def validate(self) -> None:
        v = self.values
        for key in ("train.pretext.fraction", "eval.train_fraction"):
            if not 0 < v[key] <= 1:
                raise ConfigError(key, f"must be in (0, 1], got {v[key]}")
        for key in ("eval.repeats", "train.pretext.batch_size", "train.finetune.batch_size",
                    "train.finetune.decay_every"):
            if v[key] < 1:
                raise ConfigError(key, f"must be >= 1, got {v[key]}")
        for key in ("train.pretext.epochs", "train.finetune.epochs", "data.pretext_count", "data.target_count",
                    "data.heldout_count"):
            if v[key] < 0:
                raise ConfigError(key, f"must be >= 0, got {v[key]}")
        bad = [n for n in v["ablate.variants"] if n not in VARIANTS]
        if bad:
            raise ConfigError("ablate.variants", f"unknown variants {bad}")
        if any(not 0 < f <= 1 for f in v["ablate.fractions"]):
            raise ConfigError("ablate.fractions", "fractions must be in (0, 1]")
        for key, build in (("model", self.model), ("augment", self.augment), ("phantom", self.phantom)):
            try:
                build()
            except ValueError as exc:
                raise ConfigError(key, str(exc)) from None

    # ------------------------------------------------------------ builders

    def model(self) -> ModelConfig:
        return ModelConfig(self["model.width_factor"], self["model.input_dims"], self["model.num_classes"])

    def augment(self) -> AugmentConfig:
        v = self.values
        enabled = frozenset(t for t in TRANSFORMS if v[f"augment.{t}.enabled"]) if v["augment.enabled"] else frozenset()
        fields = {f.name for f in dataclasses.fields(AugmentConfig)}
        kwargs = {}
        for key, value in v.items():
            if key.startswith("augment.") and key.count(".") == 2:
                name = key[len("augment."):].replace(".", "_")
                if name in fields:
                    kwargs[name] = value
        kwargs["probability"] = {t: v[f"augment.{t}.probability"] for t in TRANSFORMS}
        return AugmentConfig(enabled=enabled, **kwargs)

    def phantom(self) -> PhantomSpec:
        v = self.values
        sd = v["phantom.noise"]
        base = PhantomSpec()
        return PhantomSpec(dims=v["phantom.dims"], gm_thickness=v["phantom.gm_thickness"],
                           atrophy_delta=v["phantom.atrophy_delta"], deformation=v["phantom.deformation"],
                           csf=(base.csf[0], sd), gm=(base.gm[0], sd), wm=(base.wm[0], sd))

    def pretext(self) -> PretextSettings:
        v = self.values
        return PretextSettings(v["train.pretext.tasks"], v["train.pretext.epochs"], v["train.pretext.batch_size"],
                               v["train.pretext.lr"], v["train.pretext.fraction"])

    def finetune(self) -> FinetuneSettings:
        v = self.values
        return FinetuneSettings(v["train.finetune.epochs"], v["train.finetune.batch_size"], v["train.finetune.lr"],
                                v["train.finetune.decay"], v["train.finetune.decay_every"])

    def evaluation(self) -> EvalSettings:
        v = self.values
        return EvalSettings(v["eval.train_fraction"], v["eval.repeats"], v["eval.threshold"])

    def render(self) -> str:
        """Fully resolved configuration in file syntax."""
        return "".join(f"{k} = {self.text[k]}\n" for k in sorted(self.text))

    def digest(self) -> str:
        import hashlib
        return hashlib.sha256(self.render().encode()).hexdigest()[:16]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(x) for x in value)
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(key, f"unknown configuration key ({source}:{lineno})")
        out[key] = value
    return out


def load_settings(path=None, overrides: dict[str, str] | None = None) -> Settings:
    values: dict[str, str] = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)))
    values.update(overrides or {})
    return Settings(values)
