"""Two-speaker mixtures at a prescribed target-to-interferer SNR."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from demixkit.audio import Waveform
from demixkit.corpus import CorpusManifest
from demixkit.errors import DataError, UsageError


@dataclass(frozen=True)
class MixSpec:
    target_utt: str
    interferer_utt: str
    snr_db: float


@dataclass
class Mixture:
    waveform: Waveform
    scale: float
    clipped: bool


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def snr_scale(p_target: float, p_interferer: float, snr_db: float) -> float:
    """Gain on the interferer so that P_target / (gain^2 P_interferer) = 10^(snr/10)."""
    if p_target <= 0 or p_interferer <= 0:
        raise DataError("cannot mix at an SNR with a zero-power signal")
    return float(np.sqrt(p_target / (p_interferer * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(x1: Waveform, x2: Waveform, snr_db: float) -> Mixture:
    """``x1 + scale * x2`` after cropping both to the shorter length (offset 0).

    No peak normalisation is applied; ``clipped`` records whether the float
    result leaves [-1, 1].
    """
    if x1.sample_rate != x2.sample_rate:
        raise DataError(f"sample-rate mismatch: {x1.sample_rate} vs {x2.sample_rate}")
    n = min(len(x1), len(x2))
    a, b = x1.samples[:n], x2.samples[:n]
    scale = snr_scale(power(a), power(b), snr_db)
    out = a + scale * b
    return Mixture(Waveform(out, x1.sample_rate), scale, bool(np.abs(out).max() > 1.0))


def measure_snr(x1: np.ndarray, scaled_x2: np.ndarray) -> float:
    """10 log10 of the power ratio, in dB."""
    x1, scaled_x2 = np.asarray(x1), np.asarray(scaled_x2)
    if x1.shape != scaled_x2.shape:
        raise UsageError(f"measure_snr: lengths differ {x1.shape} vs {scaled_x2.shape}")
    p1, p2 = power(x1), power(scaled_x2)
    if p1 <= 0 or p2 <= 0:
        raise DataError("measure_snr: zero-power signal")
    return float(10.0 * np.log10(p1 / p2))


def _split_index(manifest: CorpusManifest, split: str) -> tuple[list, dict[str, list]]:
    utts = manifest.split(split)
    by_spk: dict[str, list] = {}
    for e in utts:
        by_spk.setdefault(e.speaker_id, []).append(e)
    if len(by_spk) < 2:
        raise DataError(f"split {split!r} has {len(by_spk)} speaker(s); mixing needs at least 2")
    return utts, by_spk


def _draw_interferer(utts, target, rng):
    others = [e for e in utts if e.speaker_id != target.speaker_id]
    return others[int(rng.integers(len(others)))]


def sample_pairs(manifest: CorpusManifest, split: str, count: int, seed: int, snr_db: float = 0.0) -> list[MixSpec]:
    """``count`` random (target, interferer) pairs from one split.

    The target is uniform over the split; the interferer is uniform over the
    split's utterances from other speakers.
    """
    utts, _ = _split_index(manifest, split)
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        target = utts[int(rng.integers(len(utts)))]
        pairs.append(MixSpec(target.utterance_id, _draw_interferer(utts, target, rng).utterance_id, float(snr_db)))
    return pairs


def pairs_per_target(
    manifest: CorpusManifest, split: str, per_target: int, seed: int, snr_db: float = 0.0
) -> list[MixSpec]:
    """Every utterance of ``split`` as target, each with ``per_target`` random interferers."""
    utts, _ = _split_index(manifest, split)
    rng = np.random.default_rng(seed)
    return [
        MixSpec(t.utterance_id, _draw_interferer(utts, t, rng).utterance_id, float(snr_db))
        for t in utts
        for _ in range(per_target)
    ]


def check_pairs(manifest: CorpusManifest, pairs: list[MixSpec]) -> None:
    for p in pairs:
        t, i = manifest[p.target_utt], manifest[p.interferer_utt]
        if t.speaker_id == i.speaker_id:
            raise DataError(f"pair {p}: target and interferer share speaker {t.speaker_id}")
        if t.split != i.split:
            raise DataError(f"pair {p}: crosses the {t.split}/{i.split} boundary")


def save_pairs(path: str | Path, pairs: list[MixSpec]) -> None:
    Path(path).write_text(json.dumps([asdict(p) for p in pairs], indent=1) + "\n")


def load_pairs(path: str | Path) -> list[MixSpec]:
    try:
        return [MixSpec(d["target_utt"], d["interferer_utt"], float(d["snr_db"])) for d in json.loads(Path(path).read_text())]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: not a pair list ({exc})") from exc
