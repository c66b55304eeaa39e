"""Corpus manifests and the license-free synthetic speaker corpus."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.signal import lfilter

from demixkit.audio import SAMPLE_RATE, Waveform, read_wav, write_wav
from demixkit.errors import DataError, UsageError

log = logging.getLogger(__name__)

SPLITS = ("train", "test")


@dataclass(frozen=True)
class Utterance:
    utterance_id: str
    speaker_id: str
    path: str
    split: str


@dataclass
class CorpusManifest:
    """Utterance list plus a contiguous integer label per speaker.

    ``path`` entries are relative to ``root`` (the manifest's directory) unless
    absolute.
    """

    entries: list[Utterance]
    root: Path = field(default_factory=Path)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.utterance_id in seen:
                raise DataError(f"duplicate utterance id {e.utterance_id!r}")
            if e.split not in SPLITS:
                raise DataError(f"utterance {e.utterance_id!r}: unknown split {e.split!r}")
            seen.add(e.utterance_id)
        self.speaker_index = {s: i for i, s in enumerate(sorted({e.speaker_id for e in self.entries}))}
        self._by_id = {e.utterance_id: e for e in self.entries}
        for spk in self.speaker_index:
            splits = {e.split for e in self.entries if e.speaker_id == spk}
            for missing in sorted(set(SPLITS) - splits):
                msg = f"speaker {spk} has no {missing} utterances"
                if msg not in self.warnings:
                    self.warnings.append(msg)
                    log.warning(msg)

    def __getitem__(self, utterance_id: str) -> Utterance:
        return self._by_id[utterance_id]

    @property
    def speakers(self) -> list[str]:
        return list(self.speaker_index)

    def split(self, name: str) -> list[Utterance]:
        return [e for e in self.entries if e.split == name]

    def label(self, speaker_id: str) -> int:
        return self.speaker_index[speaker_id]

    def resolve(self, e: Utterance) -> Path:
        p = Path(e.path)
        return p if p.is_absolute() else self.root / p

    def load(self, e: Utterance) -> Waveform:
        return read_wav(self.resolve(e))

    def to_json(self) -> str:
        doc = {
            "entries": [
                {"utterance_id": e.utterance_id, "speaker_id": e.speaker_id, "path": e.path, "split": e.split}
                for e in self.entries
            ],
            "speaker_index": self.speaker_index,
            "warnings": self.warnings,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load_json(cls, path: str | Path) -> "CorpusManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
            entries = [Utterance(**e) for e in doc["entries"]]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: not a corpus manifest ({exc})") from exc
        return cls(entries, root=path.parent, warnings=list(doc.get("warnings", [])))


def split_counts(n_utts: int) -> int:
    """Training utterances per speaker under the 6-of-8 ratio."""
    if n_utts == 1:
        return 1
    return min(n_utts - 1, max(1, round(n_utts * 0.75)))


def manifest_from_directory(
    root: str | Path,
    n_train: int = 6,
    n_test: int = 2,
    seed: int = 0,
    exclude: Iterable[str] = (),
    pattern: str = "*.wav",
) -> CorpusManifest:
    """Build a manifest from ``root/<speaker>/<utt>.wav`` (TIMIT-style layout).

    Each speaker directory contributes ``n_train`` randomly chosen training
    utterances and ``n_test`` test utterances from the remainder. File stems
    listed in ``exclude`` (e.g. ``{"SA1", "SA2"}``) are skipped first.
    """
    root = Path(root)
    excluded = {s.upper() for s in exclude}
    by_speaker: dict[str, list[Path]] = {}
    for p in sorted(root.rglob(pattern)) + sorted(root.rglob(pattern.upper())):
        if p.stem.upper() in excluded:
            continue
        by_speaker.setdefault(p.parent.name, []).append(p)
    if not by_speaker:
        raise DataError(f"no files matching {pattern!r} under {root}")
    rng = np.random.default_rng(seed)
    entries = []
    for spk in sorted(by_speaker):
        files = sorted(set(by_speaker[spk]))
        if len(files) < n_train + n_test:
            raise DataError(f"speaker {spk}: {len(files)} utterances, need {n_train + n_test}")
        order = rng.permutation(len(files))
        for k, i in enumerate(order[: n_train + n_test]):
            f = files[i]
            entries.append(
                Utterance(f"{spk}_{f.stem}", spk, str(f.relative_to(root)), "train" if k < n_train else "test")
            )
    return CorpusManifest(entries, root=root)


# ---------------------------------------------------------------- synthesis

N_VOWELS = 4
FORMANT_RANGES = ((300.0, 850.0), (900.0, 2300.0), (2300.0, 3400.0))


@dataclass(frozen=True)
class VoiceRecipe:
    """Fixed per-speaker generator settings."""

    f0: float
    tract_scale: float
    vowels: tuple[tuple[float, float, float], ...]
    bandwidths: tuple[float, float, float]
    glottal_pole: float
    noise_pole: float
    noise_level: float

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "VoiceRecipe":
        scale = rng.uniform(0.85, 1.2)
        vowels = tuple(
            tuple(float(scale * rng.uniform(lo, hi)) for lo, hi in FORMANT_RANGES) for _ in range(N_VOWELS)
        )
        return cls(
            f0=float(rng.uniform(85.0, 260.0)),
            tract_scale=float(scale),
            vowels=vowels,
            bandwidths=tuple(float(b) for b in rng.uniform([50, 70, 90], [110, 150, 200])),
            glottal_pole=float(rng.uniform(0.80, 0.97)),
            noise_pole=float(rng.uniform(0.0, 0.9)),
            noise_level=float(rng.uniform(0.01, 0.05)),
        )


def _resonator(x: np.ndarray, freq: float, bandwidth: float) -> np.ndarray:
    r = np.exp(-np.pi * bandwidth / SAMPLE_RATE)
    theta = 2 * np.pi * freq / SAMPLE_RATE
    return lfilter([1.0 - r], [1.0, -2.0 * r * np.cos(theta), r * r], x)


def synth_utterance(recipe: VoiceRecipe, duration_s: float, rng: np.random.Generator) -> Waveform:
    """One utterance: a random syllable sequence over the speaker's vowels."""
    n = int(round(duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE

    # pitch contour: slow vibrato-like drift plus declination
    contour = 1.0 + rng.uniform(0.04, 0.12) * np.sin(2 * np.pi * rng.uniform(0.3, 1.5) * t + rng.uniform(0, 2 * np.pi))
    contour *= 1.0 + rng.uniform(-0.12, 0.02) * t / max(duration_s, 1e-9)
    f0 = recipe.f0 * rng.uniform(0.92, 1.08) * contour
    phase = np.cumsum(f0 / SAMPLE_RATE)
    pulses = np.diff(np.floor(phase), prepend=0.0)
    source = lfilter([1.0], [1.0, -recipe.glottal_pole], pulses)
    source -= source.mean()

    # syllables: each picks a vowel; raised-cosine envelope with short gaps
    weights = np.zeros((N_VOWELS, n))
    pos = int(rng.integers(0, int(0.05 * SAMPLE_RATE)))
    while pos < n:
        length = int(rng.uniform(0.12, 0.30) * SAMPLE_RATE)
        v = int(rng.integers(N_VOWELS))
        seg = np.sin(np.pi * np.arange(length) / length) ** 0.6
        end = min(n, pos + length)
        weights[v, pos:end] += seg[: end - pos] * rng.uniform(0.5, 1.0)
        pos = end + int(rng.uniform(0.0, 0.08) * SAMPLE_RATE)

    jitter = rng.uniform(0.97, 1.03, size=3)
    voiced = np.zeros(n)
    for v, formants in enumerate(recipe.vowels):
        if not weights[v].any():
            continue
        y = source
        for f, b, j in zip(formants, recipe.bandwidths, jitter):
            y = _resonator(y, f * j, b)
        voiced += weights[v] * y
    voiced /= np.sqrt(np.mean(voiced**2)) + 1e-12

    noise = lfilter([1.0 - recipe.noise_pole], [1.0, -recipe.noise_pole], rng.standard_normal(n))
    noise *= recipe.noise_level / (np.sqrt(np.mean(noise**2)) + 1e-12)
    x = voiced + noise
    x *= 0.7 / np.max(np.abs(x))
    return Waveform(x, SAMPLE_RATE)


def synth_corpus(
    out_dir: str | Path,
    n_speakers: int = 20,
    utt_per_speaker: int = 8,
    duration_s: float = 3.0,
    seed: int = 0,
) -> CorpusManifest:
    """Generate WAV files plus ``manifest.json`` under ``out_dir``.

    Each speaker is a seed-derived :class:`VoiceRecipe`; utterances vary the
    syllable sequence, pitch contour and amplitude envelope. Per speaker,
    ``split_counts(utt_per_speaker)`` randomly chosen utterances go to train
    and the rest to test.
    """
    if n_speakers < 2:
        raise UsageError(f"need at least 2 speakers for mixing, got {n_speakers}")
    if utt_per_speaker < 1:
        raise UsageError(f"need at least 1 utterance per speaker, got {utt_per_speaker}")
    if duration_s * SAMPLE_RATE < 400:
        raise UsageError(f"duration {duration_s} s is shorter than one analysis frame")
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    n_train = split_counts(utt_per_speaker)
    entries = []
    for s in range(n_speakers):
        spk = f"spk{s:03d}"
        recipe = VoiceRecipe.draw(np.random.default_rng([seed, s, 0]))
        train_set = set(np.random.default_rng([seed, s, 1]).permutation(utt_per_speaker)[:n_train].tolist())
        for u in range(utt_per_speaker):
            utt = f"{spk}_u{u:02d}"
            rel = f"wav/{utt}.wav"
            write_wav(out / rel, synth_utterance(recipe, duration_s, np.random.default_rng([seed, s, 2, u])))
            entries.append(Utterance(utt, spk, rel, "train" if u in train_set else "test"))
    manifest = CorpusManifest(entries, root=out)
    manifest.save(out / "manifest.json")
    return manifest
