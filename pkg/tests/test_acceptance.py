"""Acceptance criteria 1-10, one PASS/FAIL line each.

The full-scale experiment (20 speakers, 8 utterances of 3 s, 512-wide
extractor, 20 epochs) trains once per session and takes roughly 20 minutes on
one core.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import time

import numpy as np
import pytest

from demixkit.autodiff import Tensor, mae_loss, stats_pool
from demixkit.config import ExperimentConfig
from demixkit.demix import DISPLAY_NAMES, DIRECTIONS, VARIANTS, DemixHead, MixturePool, StepTwoConfig, train_step_two
from demixkit.embedding import (
    EmbeddingBank,
    ExtractorConfig,
    SpeakerModel,
    StepOneConfig,
    build_bank,
    evenly_spaced_windows,
    train_step_one,
)
from demixkit.errors import CorruptFileError
from demixkit.evaluation import ROW_ORDER, EvalReport, cosine, evaluate_before, evaluate_clean, evaluate_head
from demixkit.gradsuite import TOLERANCE, run_suite
from demixkit.mixer import MixSpec, mix_at_snr, snr_scale
from demixkit.audio import Waveform
from demixkit.pipeline import clean_test_embeddings, mixture_pool, run_grid
from demixkit.store import (
    MAGIC,
    load_bank,
    load_head,
    load_pool,
    load_speaker_model,
    save_bank,
    save_head,
    save_pool,
    save_speaker_model,
)

SEEDS = (0, 1, 2)


def verdict(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


class Experiment:
    """Step one once, then mixture pools and heads on demand."""

    def __init__(self, manifest, features, root):
        self.manifest = manifest
        self.features = features
        self.root = root
        t = time.perf_counter()
        self.model, opt, self.history = train_step_one(manifest, StepOneConfig(), ExtractorConfig(), features)
        self.step_one_seconds = time.perf_counter() - t
        self.sha = save_speaker_model(root / "extractor.sedm", self.model, manifest.speakers, opt)
        self.bank = build_bank(self.model.extractor, manifest, features)
        self.labels = manifest.speaker_index
        self.clean = clean_test_embeddings(self.model, manifest, features)
        self._pools = {}

    def pool(self, split: str, snr: float, seed: int = 0) -> MixturePool:
        key = (split, snr, seed)
        if key not in self._pools:
            cache = self.root / f"pools{seed}"
            cache.mkdir(exist_ok=True)
            self._pools[key] = mixture_pool(self.model, self.manifest, split, snr, 5, seed, cache, self.sha)
        return self._pools[key]

    def head(self, variant: str, snr: float, direction: str, seed: int = 0, final_activation: str = "none"):
        """Train one head; returns (result, test cell, wall seconds)."""
        t = time.perf_counter()
        res = train_step_two(variant, self.pool("train", snr, seed), self.bank, direction,
                             StepTwoConfig(final_activation=final_activation, seed=seed))
        seconds = time.perf_counter() - t
        cell = evaluate_head(res.head, self.pool("test", snr, seed), self.bank, self.model.classifier, self.labels, direction)
        return res, cell, seconds

    def before(self, snr: float, direction: str, seed: int = 0):
        return evaluate_before(self.pool("test", snr, seed), self.bank, self.model.classifier, self.labels, direction)


@pytest.fixture(scope="module")
def experiment(small_corpus, small_features, tmp_path_factory):
    return Experiment(small_corpus, small_features, tmp_path_factory.mktemp("acceptance"))


# ---------------------------------------------------------------- 1


def test_criterion_1_gradient_suite(capsys):
    t = time.perf_counter()
    results = run_suite(points=10, seed=0)
    seconds = time.perf_counter() - t
    worst = max(results, key=lambda r: r.worst_error)
    ok = all(r.worst_error < TOLERANCE for r in results) and seconds < 60
    verdict(capsys, 1, ok, f"{len(results)} graphs, worst {worst.name} {worst.worst_error:.2e} < 1e-4, {seconds:.1f}s < 60s")


# ---------------------------------------------------------------- 2


def test_criterion_2_mixer_snr(capsys):
    rng = np.random.default_rng(2)
    worst = 0.0
    for snr in (-5.0, 0.0, 5.0):
        for _ in range(100):
            n1, n2 = rng.integers(800, 4000, size=2)
            x1 = Waveform(rng.normal(0, rng.uniform(0.01, 0.5), n1))
            x2 = Waveform(rng.normal(0, rng.uniform(0.01, 0.5), n2))
            mix = mix_at_snr(x1, x2, snr)
            n = min(n1, n2)
            scaled = mix.waveform.samples - x1.samples[:n]
            measured = 10 * math.log10(math.fsum(x1.samples[:n] ** 2) / math.fsum(scaled**2))
            worst = max(worst, abs(measured - snr))
    verdict(capsys, 2, worst < 1e-9, f"300 pairs at -5/0/5 dB, worst deviation {worst:.2e} dB < 1e-9")


# ---------------------------------------------------------------- 4


@pytest.mark.slow
def test_criterion_4_step_one_identification(experiment, capsys):
    acc = experiment.history[-1]["holdout_accuracy"]
    epochs = len(experiment.history)
    minutes = experiment.step_one_seconds / 60
    ok = acc >= 0.95 and epochs <= 20 and minutes <= 15
    verdict(capsys, 4, ok, f"held-out clean-segment accuracy {acc:.3f} >= 0.95 after {epochs} epochs, {minutes:.1f} min <= 15")


# ---------------------------------------------------------------- 5


@pytest.mark.slow
def test_criterion_5_separate_concat_improves_on_before(experiment, capsys):
    d = "known-interferer"
    before = experiment.before(0.0, d)
    _, cell, seconds = experiment.head("separate-concat", 0.0, d)
    _, relu_cell, _ = experiment.head("separate-concat", 0.0, d, final_activation="relu")
    gain = 100 * (cell.accuracy - before.accuracy)
    ok = gain >= 25 and cell.cosine >= 0.75 and seconds <= 600
    verdict(capsys, 5, ok,
            f"0 dB: accuracy {100 * cell.accuracy:.1f}% vs Before {100 * before.accuracy:.1f}% (+{gain:.1f} >= 25), "
            f"cosine {cell.cosine:.3f} >= 0.75, {seconds:.0f}s per head "
            f"[linear output; with final ReLU: {100 * relu_cell.accuracy:.1f}%, cosine {relu_cell.cosine:.3f}]")


# ---------------------------------------------------------------- 6


@pytest.mark.slow
def test_criterion_6_ordering_at_5db(experiment, capsys):
    d = "known-interferer"
    holds, lines = 0, []
    for seed in SEEDS:
        before = experiment.before(5.0, d, seed).accuracy
        acc = {v: experiment.head(v, 5.0, d, seed)[1].accuracy for v in ("sub", "concat1", "separate-concat")}
        sep_gap = 100 * (acc["separate-concat"] - acc["concat1"])
        sub_gap = 100 * (acc["sub"] - before)
        holds += sep_gap >= 10 and sub_gap >= 10
        lines.append(f"seed {seed}: SepConcat-Concat1 {sep_gap:+.1f}, Sub-Before {sub_gap:+.1f}")
    verdict(capsys, 6, holds >= 2, f"property held for {holds}/3 seeds (need 2); " + "; ".join(lines))


# ---------------------------------------------------------------- 7


@pytest.mark.slow
def test_criterion_7_direction_symmetry(experiment, capsys):
    worst, failures, trained = 0.0, [], True
    for snr in (-5.0, 0.0, 5.0):
        for v in VARIANTS:
            maes = {}
            for d in DIRECTIONS:
                res = experiment.head(v, snr, d)[0]
                trained &= res.final_mae < res.history[0]["mae"]
                maes[d] = res.final_mae
            ratio = maes["known-target"] / maes["known-interferer"]
            worst = max(worst, ratio)
            if ratio > 2:
                failures.append(f"{DISPLAY_NAMES[v]} {snr:g} dB {ratio:.2f}x")
    ok = trained and not failures
    verdict(capsys, 7, ok, f"known-target/known-interferer final MAE, worst ratio {worst:.2f} <= 2 over 6 variants x 3 SNRs"
            + (f"; over 2x: {', '.join(failures)}" if failures else ""))


# ---------------------------------------------------------------- 3


@pytest.mark.slow
def test_criterion_3_analogue_table(experiment, capsys):
    report = EvalReport()
    snr, seed = 0.0, 0
    for d in DIRECTIONS:
        report.add("Before", snr, d, experiment.before(snr, d, seed))
        for v in VARIANTS:
            report.add(DISPLAY_NAMES[v], snr, d, experiment.head(v, snr, d, seed)[1])
        report.add("Clean", snr, d, evaluate_clean(experiment.clean, experiment.pool("test", snr, seed), experiment.bank,
                                                   experiment.model.classifier, experiment.labels, d))
    ok = [r for r, _, _ in report.ordered_keys()][: len(ROW_ORDER)] == list(ROW_ORDER)
    ok &= all(report.get("Clean", snr, d).cosine == 1.0 for d in DIRECTIONS)
    verdict(capsys, 3, ok, "exact corpus-scale figures are non-goals; the synthetic analogue table is produced "
            f"with all {len(ROW_ORDER)} rows per direction and properties are checked by criteria 4-7")


# ---------------------------------------------------------------- model properties


@pytest.mark.slow
def test_bank_separates_fresh_clean_segments(experiment):
    ext, bank = experiment.model.extractor, experiment.bank
    hits = total = 0
    for e in experiment.manifest.split("test"):
        frames = experiment.features[e.utterance_id]
        out = ext.frame_outputs(frames)
        for emb in ext.embed_windows(out, evenly_spaced_windows(len(frames), 200, 4)):
            scores = [cosine(emb, v) for v in bank.vectors]
            hits += bank.speakers[int(np.argmax(scores))] == e.speaker_id
            total += 1
    assert hits / total >= 0.90, (hits, total)


@pytest.mark.slow
def test_mixture_embedding_is_closer_to_both_constituents(experiment):
    pool, bank = experiment.pool("test", 0.0), experiment.bank
    rng = np.random.default_rng(11)
    closer = 0
    for e, t, i in zip(pool.e_mix, pool.target_speakers, pool.interferer_speakers):
        third = str(rng.choice([s for s in bank.speakers if s not in (t, i)]))
        far = cosine(e, bank[third])
        closer += cosine(e, bank[t]) > far and cosine(e, bank[i]) > far
    assert closer / len(pool.e_mix) >= 0.80, (closer, len(pool.e_mix))


# ---------------------------------------------------------------- 8

DETERMINISM_CONFIG = {
    "corpus": {"speakers": 4, "utts_per_speaker": 8, "duration_s": 1.0, "seed": 3},
    "model": {"width": 16, "pool_width": 24, "embed_dim": 16},
    "step_one": {"epochs": 2, "batch_size": 8, "crop_frames": 60, "holdout_crops": 2},
    "bank": {"segments_per_speaker": 10, "crop_frames": 60},
    "step_two": {"epochs": 5, "batch_size": 8},
    "grid": {"snrs": [-5.0, 5.0], "train_interferers": 2, "test_interferers": 2},
}


def _artifacts(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.suffix in (".sedm", ".json", ".csv", ".txt", ".jsonl")
            and "corpus" not in p.parts}


def test_criterion_8_determinism(tmp_path, capsys):
    cfg = ExperimentConfig.from_dict(DETERMINISM_CONFIG)
    run_grid(cfg, tmp_path / "a")
    run_grid(cfg, tmp_path / "b")
    a, b = _artifacts(tmp_path / "a"), _artifacts(tmp_path / "b")
    heads = [k for k in a if k.startswith("heads/") and k.endswith(".sedm")]
    required = {"extractor.sedm", "bank.sedm", "report.json", "report.csv", "report.txt"}
    ok = a == b and required <= set(a) and len(heads) == 2 * 2 * len(VARIANTS)
    diff = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    verdict(capsys, 8, ok, f"two seeded runs, {len(a)} artifacts ({len(heads)} heads, checkpoint, bank, reports) "
            f"byte-identical" + (f"; differing: {diff}" if diff else ""))


# ---------------------------------------------------------------- 9


def _seed_files(root):
    tiny = ExtractorConfig(width=8, pool_width=10, embed_dim=6)
    save_speaker_model(root / "m.sedm", SpeakerModel.create(3, tiny, seed=1), ["a", "b", "c"])
    save_bank(root / "b.sedm", EmbeddingBank(["a", "b"], np.arange(6.0).reshape(2, 3)))
    save_head(root / "h.sedm", DemixHead("separate-concat", dim=3))
    save_pool(root / "p.sedm", MixturePool([MixSpec("u", "v", 0.0)], np.ones((1, 3)), ["a"], ["b"]), {"seed": 0})
    return [((root / n).read_bytes(), f) for n, f in
            (("m.sedm", load_speaker_model), ("b.sedm", load_bank), ("h.sedm", load_head), ("p.sedm", load_pool))]


def _mutate(raw: bytes, kind: int, rng) -> bytes:
    raw = bytearray(raw)
    if kind == 0:
        for _ in range(int(rng.integers(1, 8))):
            raw[int(rng.integers(len(raw)))] = int(rng.integers(256))
    elif kind == 1:
        raw = raw[: int(rng.integers(len(raw)))]
    elif kind == 2:
        raw += rng.integers(0, 256, int(rng.integers(1, 64)), dtype=np.uint8).tobytes()
    elif kind == 3:
        hlen = struct.unpack_from("<I", raw, 8)[0]
        hdr = raw[12 : 12 + hlen].decode(errors="replace")
        pos = int(rng.integers(len(hdr)))
        body = (hdr[:pos] + str(rng.choice(list('0123456789{}[]",:-x'))) + hdr[pos + 1 :]).encode()
        raw = bytearray(MAGIC + struct.pack("<II", 1, len(body)) + body + raw[12 + hlen :])
    elif kind == 4:
        # valid JSON with a wrong value and the checksum still matching
        hlen = struct.unpack_from("<I", raw, 8)[0]
        hdr = json.loads(raw[12 : 12 + hlen])
        key = ["meta", "tensors", "format", "payload_bytes"][int(rng.integers(4))]
        hdr[key] = [None, -1, "x", {}, [], [{"name": 3}]][int(rng.integers(6))]
        body = json.dumps(hdr).encode()
        raw = bytearray(MAGIC + struct.pack("<II", 1, len(body)) + body + raw[12 + hlen :])
    else:
        raw = bytearray(rng.integers(0, 256, int(rng.integers(0, 200)), dtype=np.uint8).tobytes())
    return bytes(raw)


def test_criterion_9_persistence_fuzz(tmp_path, capsys):
    rng = np.random.default_rng(9)
    files = _seed_files(tmp_path)
    crashes, rejected, intact = [], 0, 0
    for i in range(1000):
        raw, loader = files[i % len(files)]
        mutated = _mutate(raw, int(rng.integers(6)), rng)
        path = tmp_path / "fuzz.sedm"
        path.write_bytes(mutated)
        try:
            loader(path)
            intact += 1
        except CorruptFileError:
            rejected += 1
        except Exception as exc:  # anything else is a crash
            crashes.append(f"{loader.__name__}: {type(exc).__name__}: {exc}")
    ok = not crashes and rejected > 0
    verdict(capsys, 9, ok, f"1000 mutated loads: {rejected} clean rejections, {intact} loaded, {len(crashes)} crashes"
            + (f"; first: {crashes[0]}" if crashes else ""))


# ---------------------------------------------------------------- 10


def _loop_stats_pool(x):
    T, D = len(x), len(x[0])
    means = [sum(x[t][d] for t in range(T)) / T for d in range(D)]
    stds = [math.sqrt(sum((x[t][d] - means[d]) ** 2 for t in range(T)) / T + 1e-10) for d in range(D)]
    return means + stds


def _loop_mae(p, q):
    total, n = 0.0, 0
    for row_p, row_q in zip(p, q):
        for a, b in zip(row_p, row_q):
            total += abs(a - b)
            n += 1
    return total / n


def _loop_cosine(a, b):
    dot = na = nb = 0.0
    for x, y in zip(a, b):
        dot += x * y
        na += x * x
        nb += y * y
    return dot / (math.sqrt(na) * math.sqrt(nb))


def _loop_scale(x1, x2, snr_db):
    n = min(len(x1), len(x2))
    p1 = sum(v * v for v in x1[:n]) / n
    p2 = sum(v * v for v in x2[:n]) / n
    return math.sqrt(p1 / p2 / 10 ** (snr_db / 10))


def test_criterion_10_brute_force_equivalences(capsys):
    rng = np.random.default_rng(10)
    worst = {"stats_pool": 0.0, "mae": 0.0, "cosine": 0.0, "snr_scale": 0.0}
    for _ in range(50):
        T, D = rng.integers(1, 30), rng.integers(1, 12)
        x = rng.normal(size=(T, D)) * rng.uniform(0.1, 5)
        got = stats_pool(Tensor(x)).data.ravel()
        worst["stats_pool"] = max(worst["stats_pool"], float(np.max(np.abs(got - _loop_stats_pool(x.tolist())))))
        p, q = rng.normal(size=(3, D)), rng.normal(size=(3, D))
        worst["mae"] = max(worst["mae"], abs(float(mae_loss(Tensor(p), Tensor(q)).data) - _loop_mae(p.tolist(), q.tolist())))
        a, b = rng.normal(size=D + 1), rng.normal(size=D + 1)
        worst["cosine"] = max(worst["cosine"], abs(cosine(a, b) - _loop_cosine(a.tolist(), b.tolist())))
        x1, x2 = rng.normal(size=rng.integers(10, 400)), rng.normal(size=rng.integers(10, 400)) * 0.3
        snr = float(rng.uniform(-10, 10))
        n = min(len(x1), len(x2))
        lib = snr_scale(float(np.mean(x1[:n] ** 2)), float(np.mean(x2[:n] ** 2)), snr)
        loop = _loop_scale(x1.tolist(), x2.tolist(), snr)
        mixed = mix_at_snr(Waveform(x1), Waveform(x2), snr).waveform.samples
        loop_mixed = [x1[i] + loop * x2[i] for i in range(n)]
        worst["snr_scale"] = max(worst["snr_scale"], abs(lib - loop), float(np.max(np.abs(mixed - loop_mixed))))
    ok = all(v <= 1e-12 for v in worst.values())
    verdict(capsys, 10, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (all <= 1e-12)")
