"""End-to-end experiment: corpus, step one, bank, mixture pools, de-mixing
heads and the evaluation report, each stage writing its artifact to disk.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from demixkit.config import ExperimentConfig
from demixkit.corpus import CorpusManifest, synth_corpus
from demixkit.demix import MixturePool, build_pool, train_step_two
from demixkit.errors import DataError
from demixkit.embedding import EmbeddingBank, SpeakerModel, build_bank, compute_features, train_step_one
from demixkit.evaluation import (
    DISPLAY_NAMES,
    EvalReport,
    evaluate_before,
    evaluate_clean,
    evaluate_head,
    render_report,
)
from demixkit.mixer import pairs_per_target
from demixkit.store import (
    load_pool,
    load_speaker_model,
    save_bank,
    save_head,
    save_pool,
    save_speaker_model,
)

log = logging.getLogger(__name__)


class JsonLog:
    """Line-delimited JSON records, appended as they arrive."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def __call__(self, record: dict) -> None:
        if self.path:
            with self.path.open("a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


def head_filename(variant: str, snr_db: float, direction: str) -> str:
    return f"{variant}_{snr_db:g}dB_{direction}.sedm"


def pool_seed(base: int, snr_db: float, split: str) -> list[int]:
    # one pair list per (snr, split) regardless of the order stages run in
    return [base, int(round(snr_db * 1000)) + 100_000, 0 if split == "train" else 1]


def prepare_corpus(cfg: ExperimentConfig, out: Path) -> CorpusManifest:
    if cfg.corpus.manifest:
        return CorpusManifest.load_json(cfg.corpus.manifest)
    c = cfg.corpus
    return synth_corpus(out / "corpus", c.speakers, c.utts_per_speaker, c.duration_s, c.seed)


def run_step_one(manifest: CorpusManifest, cfg: ExperimentConfig, ckpt: Path, features=None) -> tuple[SpeakerModel, str]:
    model, opt, _ = train_step_one(manifest, cfg.step_one, cfg.model, features, on_epoch=JsonLog(ckpt.with_suffix(".log.jsonl")))
    sha = save_speaker_model(ckpt, model, manifest.speakers, opt, cfg.step_one.seed, {"step_one": vars(cfg.step_one)})
    return model, sha


def run_bank(model: SpeakerModel, manifest: CorpusManifest, cfg: ExperimentConfig, path: Path,
             extractor_sha: str, features=None) -> tuple[EmbeddingBank, str]:
    b = cfg.bank
    bank = build_bank(model.extractor, manifest, features, b.segments_per_speaker, b.crop_frames, b.seed)
    bank.provenance["extractor_sha256"] = extractor_sha
    return bank, save_bank(path, bank)


def mixture_pool(model: SpeakerModel, manifest: CorpusManifest, split: str, snr_db: float, per_target: int,
                 seed: int, cache: Path | None, extractor_sha: str) -> MixturePool:
    """Mixture embeddings for one split and SNR, cached on disk per extractor."""
    path = cache / f"{split}_{snr_db:g}dB.sedm" if cache else None
    if path and path.exists():
        pool, info = load_pool(path)
        if info.get("extractor_sha256") == extractor_sha and info.get("per_target") == per_target and info.get("seed") == seed:
            return pool
    specs = pairs_per_target(manifest, split, per_target, pool_seed(seed, snr_db, split), snr_db)
    pool = build_pool(model.extractor, manifest, specs)
    if path:
        save_pool(path, pool, {"extractor_sha256": extractor_sha, "per_target": per_target, "seed": seed})
    return pool


def clean_test_embeddings(model: SpeakerModel, manifest: CorpusManifest, features=None) -> dict[str, np.ndarray]:
    test = manifest.split("test")
    feats = features if features is not None else compute_features(manifest, test)
    return {e.utterance_id: model.extractor.embed(feats[e.utterance_id]) for e in test}


@dataclass
class GridResult:
    report: EvalReport
    final_mae: dict[tuple[str, float, str], float]


def run_heads(model: SpeakerModel, manifest: CorpusManifest, bank: EmbeddingBank, cfg: ExperimentConfig,
              out: Path, extractor_sha: str, bank_sha: str, features=None) -> GridResult:
    g = cfg.grid
    labels = manifest.speaker_index
    clean = clean_test_embeddings(model, manifest, features)
    report = EvalReport()
    final_mae = {}
    for snr in g.snrs:
        train = mixture_pool(model, manifest, "train", snr, g.train_interferers, g.pair_seed, out / "pools", extractor_sha)
        test = mixture_pool(model, manifest, "test", snr, g.test_interferers, g.pair_seed, out / "pools", extractor_sha)
        for direction in g.directions:
            report.add("Before", snr, direction, evaluate_before(test, bank, model.classifier, labels, direction))
            for variant in g.variants:
                res = train_step_two(variant, train, bank, direction, cfg.step_two,
                                     on_epoch=JsonLog(out / "heads" / (head_filename(variant, snr, direction)[:-5] + ".log.jsonl")))
                save_head(out / "heads" / head_filename(variant, snr, direction), res.head, res.optimizer, {
                    "snr_db": snr,
                    "direction": direction,
                    "extractor_sha256": extractor_sha,
                    "bank_sha256": bank_sha,
                    "final_mae": res.final_mae,
                    "step_two": vars(cfg.step_two),
                })
                final_mae[(variant, snr, direction)] = res.final_mae
                report.add(DISPLAY_NAMES[variant], snr, direction,
                           evaluate_head(res.head, test, bank, model.classifier, labels, direction))
            report.add("Clean", snr, direction, evaluate_clean(clean, test, bank, model.classifier, labels, direction))
    return GridResult(report, final_mae)


def write_report(report: EvalReport, out: Path) -> None:
    (out / "report.json").write_text(render_report(report, "json"))
    (out / "report.csv").write_text(render_report(report, "csv"))
    (out / "report.txt").write_text(render_report(report, "table"))


def run_grid(cfg: ExperimentConfig, out: str | Path) -> GridResult:
    """The whole two-step protocol; artifacts land under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.validate()
    (out / "config.json").write_text(cfg.to_json())
    manifest = prepare_corpus(cfg, out)
    features = compute_features(manifest)
    ckpt = out / "extractor.sedm"
    if ckpt.exists() and _resumable(ckpt, cfg):
        loaded = load_speaker_model(ckpt)
        model, extractor_sha = loaded.model, loaded.sha256
    else:
        model, extractor_sha = run_step_one(manifest, cfg, ckpt, features)
    bank, bank_sha = run_bank(model, manifest, cfg, out / "bank.sedm", extractor_sha, features)
    result = run_heads(model, manifest, bank, cfg, out, extractor_sha, bank_sha, features)
    write_report(result.report, out)
    return result


def _resumable(ckpt: Path, cfg: ExperimentConfig) -> bool:
    """Reuse a finished step-one checkpoint trained with the same settings."""
    try:
        meta = load_speaker_model(ckpt).meta
    except DataError:
        return False
    return meta.get("info", {}).get("step_one") == json.loads(json.dumps(vars(cfg.step_one))) and meta.get("extractor") == vars(cfg.model)

