"""Experiment configuration as a JSON document.

Every field has a default; a config file only needs the keys it changes::

    {"step_one": {"epochs": 10}, "grid": {"snrs": [0.0]}}
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from demixkit.demix import DIRECTIONS, VARIANTS, StepTwoConfig, check_direction, check_variant
from demixkit.embedding import ExtractorConfig, StepOneConfig
from demixkit.errors import UsageError


@dataclass
class CorpusConfig:
    """Synthetic corpus parameters, or a path to an existing manifest."""

    manifest: str | None = None
    speakers: int = 20
    utts_per_speaker: int = 8
    duration_s: float = 3.0
    seed: int = 0


@dataclass
class BankConfig:
    segments_per_speaker: int = 200
    crop_frames: int = 200
    seed: int = 0


@dataclass
class GridConfig:
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    snrs: list[float] = field(default_factory=lambda: [-5.0, 0.0, 5.0])
    directions: list[str] = field(default_factory=lambda: list(DIRECTIONS))
    # candidate interferers per target utterance; training draws one per epoch
    train_interferers: int = 5
    test_interferers: int = 5
    pair_seed: int = 0


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ExtractorConfig = field(default_factory=ExtractorConfig)
    step_one: StepOneConfig = field(default_factory=StepOneConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    step_two: StepTwoConfig = field(default_factory=StepTwoConfig)
    grid: GridConfig = field(default_factory=GridConfig)

    def validate(self) -> "ExperimentConfig":
        for v in self.grid.variants:
            check_variant(v)
        for d in self.grid.directions:
            check_direction(d)
        if self.step_one.classifier_mode not in ("joint", "probe"):
            raise UsageError(f"classifier_mode must be joint or probe, not {self.step_one.classifier_mode!r}")
        if self.step_one.batch_size < 2 or self.step_two.batch_size < 1:
            raise UsageError("batch sizes must be positive (step one needs at least 2 for batch norm)")
        if self.corpus.speakers < 2:
            raise UsageError("mixing needs at least 2 speakers")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _build(cls, data, "config").validate()

    @classmethod
    def load(cls, path: str | Path | None) -> "ExperimentConfig":
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"{path}: unreadable config ({exc})") from exc
        return cls.from_dict(data)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise UsageError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise UsageError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}")
        else:
            kwargs[name] = _coerce(value, current, f"{where}.{name}")
    return cls(**kwargs)


def _coerce(value, default, where):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list)
        if ok and default and isinstance(default[0], float):
            value = [float(v) for v in value]
    elif isinstance(default, str) or default is None:
        ok = value is None or isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise UsageError(f"{where}: bad value {value!r}")
    return value
