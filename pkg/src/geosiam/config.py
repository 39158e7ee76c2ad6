"""Run configuration: nested sections with a global seed, stored as JSON."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .segnet import FROM_SIAMESE, RANDOM
from .siamese import COMBINED, COORD_ONLY, DIST_ONLY, LOSS_MODES
from .synthworld import WorldSpec


class ConfigError(ValueError):
    pass


@dataclass
class SamplerSection:
    n_patches: int = 2000
    n_pairs: int = 2000
    n_test_pairs: int = 400
    gamma: float = 2.5
    split_fraction: float = 1 / 12
    strip_mm: float = 0.4
    n_labeled: int = 2400
    n_labeled_train: int = 64


@dataclass
class SiameseSection:
    loss_modes: tuple = (DIST_ONLY, COORD_ONLY, COMBINED)
    alpha: float = 10.0
    lam: float = 0.001
    epochs: int = 5
    batch_size: int = 8
    lr: float = 0.005
    lr_decay: float = 2.0
    decay_every: int = 1


@dataclass
class SegnetSection:
    init_modes: tuple = (RANDOM, FROM_SIAMESE)
    phase1_iters: int = 800
    phase2_iters: int = 1000
    batch_size: int = 8
    phase1_lr: float = 0.01
    phase2_lr: float = 0.005
    lr_decay: float = 2.0
    milestones: tuple = (300, 500, 600)
    atlas_lr_mult: float = 10.0
    lam: float = 0.001


@dataclass
class BordersSection:
    loss_mode: str = COMBINED
    spacing_mm: float = 0.2
    block: int = 9
    threshold_sigma: float = 4.0
    tolerance_mm: float = 1.5


_SECTIONS = {
    "sampler": SamplerSection,
    "siamese": SiameseSection,
    "segnet": SegnetSection,
    "borders": BordersSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    n_seeds: int = 1
    world: WorldSpec = field(default_factory=WorldSpec)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    siamese: SiameseSection = field(default_factory=SiameseSection)
    segnet: SegnetSection = field(default_factory=SegnetSection)
    borders: BordersSection = field(default_factory=BordersSection)

    @property
    def seeds(self) -> list:
        return [self.seed + i for i in range(self.n_seeds)]

    def validate(self) -> "RunConfig":
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        for m in self.siamese.loss_modes:
            if m not in LOSS_MODES:
                raise ConfigError(f"unknown loss mode {m!r}")
        for m in self.segnet.init_modes:
            if m not in (RANDOM, FROM_SIAMESE):
                raise ConfigError(f"unknown init mode {m!r}")
        if FROM_SIAMESE in self.segnet.init_modes and not self.siamese.loss_modes:
            raise ConfigError("from_siamese fine-tuning needs at least one Siamese loss mode")
        if self.borders.loss_mode not in self.siamese.loss_modes:
            raise ConfigError(f"borders.loss_mode {self.borders.loss_mode!r} is not trained")
        if self.sampler.n_labeled_train < 1 or self.sampler.n_patches < 2:
            raise ConfigError("sampler sizes too small")
        return self

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "n_seeds": self.n_seeds, "world": self.world.to_dict()}
        for name in _SECTIONS:
            sec = asdict(getattr(self, name))
            d[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        allowed = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kw = {k: d[k] for k in ("seed", "n_seeds") if k in d}
        if "world" in d:
            _reject_unknown("world", d["world"], {f.name for f in fields(WorldSpec)})
            try:
                kw["world"] = WorldSpec.from_dict(d["world"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"world: {exc}") from exc
        for name, sec_cls in _SECTIONS.items():
            if name in d:
                sec = d[name]
                _reject_unknown(name, sec, {f.name for f in fields(sec_cls)})
                defaults = sec_cls()
                vals = {
                    k: tuple(v) if isinstance(getattr(defaults, k), tuple) else v
                    for k, v in sec.items()
                }
                kw[name] = sec_cls(**vals)
        return cls(**kw).validate()

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(data)


def _reject_unknown(section: str, d, allowed: set) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {', '.join(unknown)}")


def load_config(path) -> RunConfig:
    return RunConfig.from_json(Path(path).read_text(encoding="utf-8"))


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(config.to_json(), encoding="utf-8")
