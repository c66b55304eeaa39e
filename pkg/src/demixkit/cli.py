"""``demixkit`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from demixkit.audio import write_wav
from demixkit.config import ExperimentConfig
from demixkit.corpus import CorpusManifest, synth_corpus
from demixkit.demix import DIRECTIONS, DISPLAY_NAMES, FINAL_ACTIVATIONS, VARIANTS, build_pool, train_step_two
from demixkit.embedding import build_bank
from demixkit.errors import DataError, DemixError, UsageError
from demixkit.evaluation import (
    FORMATS,
    EvalReport,
    evaluate_before,
    evaluate_clean,
    evaluate_head,
    render_report,
)
from demixkit.mixer import check_pairs, load_pairs, mix_at_snr, pairs_per_target, sample_pairs, save_pairs
from demixkit.pipeline import (
    JsonLog,
    clean_test_embeddings,
    mixture_pool,
    pool_seed,
    run_grid,
    run_step_one,
    write_report,
)
from demixkit.store import (
    file_sha256,
    load_bank,
    load_head,
    load_speaker_model,
    read_container,
    require_provenance,
    save_bank,
    save_head,
)

log = logging.getLogger("demixkit")


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _empty_or_force(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} is not empty (use --force to write into it)")


def _config(args) -> ExperimentConfig:
    return ExperimentConfig.load(getattr(args, "config", None))


# ---------------------------------------------------------------- commands


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    if args.speakers < 2:
        raise UsageError("--speakers must be at least 2: mixing needs two speakers")
    _empty_or_force(out, args.force)
    m = synth_corpus(out, args.speakers, args.utts_per_speaker, args.duration, args.seed)
    print(f"wrote {len(m.entries)} utterances of {len(m.speakers)} speakers to {out}")
    return 0


def cmd_sample_pairs(args) -> int:
    m = CorpusManifest.load_json(args.manifest)
    pairs = []
    for snr in args.snr_db:
        if args.count:
            pairs += sample_pairs(m, args.split, args.count, pool_seed(args.seed, snr, args.split), snr)
        else:
            pairs += pairs_per_target(m, args.split, args.per_target, pool_seed(args.seed, snr, args.split), snr)
    save_pairs(args.out, pairs)
    if args.wav_dir:
        wav_dir = Path(args.wav_dir)
        wav_dir.mkdir(parents=True, exist_ok=True)
        for i, p in enumerate(pairs):
            mix = mix_at_snr(m.load(m[p.target_utt]), m.load(m[p.interferer_utt]), p.snr_db)
            write_wav(wav_dir / f"{i:05d}_{p.target_utt}+{p.interferer_utt}_{p.snr_db:g}dB.wav", mix.waveform)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def cmd_train_extractor(args) -> int:
    cfg = _config(args)
    if args.epochs is not None:
        cfg.step_one.epochs = args.epochs
    if args.seed is not None:
        cfg.step_one.seed = args.seed
    if args.probe:
        cfg.step_one.classifier_mode = "probe"
    cfg.validate()
    m = CorpusManifest.load_json(args.manifest)
    _, sha = run_step_one(m, cfg, Path(args.out))
    print(f"wrote {args.out} (sha256 {sha[:12]}) and {Path(args.out).with_suffix('.log.jsonl')}")
    return 0


def cmd_build_bank(args) -> int:
    loaded = load_speaker_model(args.extractor)
    m = CorpusManifest.load_json(args.manifest)
    bank = build_bank(loaded.model.extractor, m, None, args.segments, args.crop_frames, args.seed)
    bank.provenance["extractor_sha256"] = loaded.sha256
    save_bank(args.out, bank)
    print(f"wrote bank of {len(bank.speakers)} speakers to {args.out}")
    return 0


def cmd_train_demix(args) -> int:
    cfg = _config(args)
    s2 = cfg.step_two
    for name in ("epochs", "seed", "learning_rate", "final_activation"):
        if getattr(args, name) is not None:
            setattr(s2, name, getattr(args, name))
    loaded = load_speaker_model(args.extractor)
    bank = load_bank(args.bank)
    require_provenance(bank.provenance.get("extractor_sha256"), loaded.sha256, "extractor")
    m = CorpusManifest.load_json(args.manifest)
    cache = Path(args.cache) if args.cache else None
    pool = mixture_pool(loaded.model, m, "train", args.snr_db, cfg.grid.train_interferers, cfg.grid.pair_seed, cache, loaded.sha256)
    res = train_step_two(args.variant, pool, bank, args.direction, s2,
                         on_epoch=JsonLog(Path(args.out).with_suffix(".log.jsonl")))
    save_head(args.out, res.head, res.optimizer, {
        "snr_db": args.snr_db,
        "direction": args.direction,
        "extractor_sha256": loaded.sha256,
        "bank_sha256": file_sha256(args.bank),
        "final_mae": res.final_mae,
        "step_two": vars(s2),
    })
    print(f"{args.variant} {args.direction} {args.snr_db:g} dB: MAE {res.history[0]['mae']:.4f} -> {res.final_mae:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    loaded = load_speaker_model(args.extractor)
    bank = load_bank(args.bank)
    require_provenance(bank.provenance.get("extractor_sha256"), loaded.sha256, "extractor")
    bank_sha = file_sha256(args.bank)
    m = CorpusManifest.load_json(args.manifest)
    pairs = load_pairs(args.test_pairs)
    check_pairs(m, pairs)
    if any(m[p.target_utt].split != "test" for p in pairs):
        raise DataError("evaluation pairs must come from the test split")
    heads = {}
    for path in sorted(Path(args.heads).glob("*.sedm")):
        if read_container(path).format != "head":
            continue
        h = load_head(path)
        info = h.meta.get("info", {})
        require_provenance(info.get("extractor_sha256"), loaded.sha256, f"{path.name}: extractor")
        require_provenance(info.get("bank_sha256"), bank_sha, f"{path.name}: bank")
        heads[(h.head.variant, float(info["snr_db"]), info["direction"])] = h.head
    if not heads:
        raise DataError(f"no de-mixing heads in {args.heads}")
    labels = m.speaker_index
    clean = clean_test_embeddings(loaded.model, m)
    report = EvalReport()
    for snr in sorted({p.snr_db for p in pairs}):
        directions = [d for d in DIRECTIONS if any(k[1] == snr and k[2] == d for k in heads)]
        if not directions:
            continue
        pool = build_pool(loaded.model.extractor, m, [p for p in pairs if p.snr_db == snr])
        clf = loaded.model.classifier
        for d in directions:
            report.add("Before", snr, d, evaluate_before(pool, bank, clf, labels, d))
            for v in VARIANTS:
                if (v, snr, d) in heads:
                    report.add(DISPLAY_NAMES[v], snr, d, evaluate_head(heads[(v, snr, d)], pool, bank, clf, labels, d))
            report.add("Clean", snr, d, evaluate_clean(clean, pool, bank, clf, labels, d))
    if not report.cells:
        raise DataError("no head matches the SNRs of the test pairs")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_report(report, "json"))
    print(render_report(report, "table"))
    return 0


def cmd_report(args) -> int:
    try:
        text = Path(args.report).read_text()
    except OSError as exc:
        raise DataError(f"{args.report}: {exc.strerror}") from None
    sys.stdout.write(render_report(EvalReport.from_json(text), args.format))
    return 0


def cmd_gradcheck(args) -> int:
    from demixkit.gradsuite import TOLERANCE, run_suite

    results = run_suite(points=args.points, seed=args.seed)
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:34s} worst relative error {r.worst_error:.2e}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"{len(failed)} case(s) above {TOLERANCE:g}: {', '.join(failed)}", file=sys.stderr)
        return 3
    return 0


def cmd_run_grid(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.step_one.seed = cfg.step_two.seed = cfg.bank.seed = cfg.grid.pair_seed = cfg.corpus.seed = args.seed
    result = run_grid(cfg, args.out)
    write_report(result.report, Path(args.out))
    print(render_report(result.report, "table"))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="demixkit", description="Speaker-embedding de-mixing toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("synth-data", help="write a synthetic speaker corpus and manifest")
    s.add_argument("--speakers", type=int, default=20)
    s.add_argument("--utts-per-speaker", type=int, default=8)
    s.add_argument("--duration", type=float, default=3.0, help="seconds per utterance")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true", help="allow a nonempty output directory")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("sample-pairs", help="draw (target, interferer) pairs from one split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--snr-db", type=float, action="append", required=True, help="repeat for several SNRs")
    s.add_argument("--per-target", type=int, default=5, help="interferers per target utterance")
    s.add_argument("--count", type=int, default=0, help="draw this many uniform pairs instead")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--wav-dir", help="also write each mixture as a WAV file here")
    s.set_defaults(func=cmd_sample_pairs)

    s = sub.add_parser("train-extractor", help="step one: train extractor and classifier")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--probe", action="store_true", help="refit the classifier on frozen embeddings afterwards")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_extractor)

    s = sub.add_parser("build-bank", help="average clean segment embeddings per training speaker")
    s.add_argument("--extractor", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--segments", type=int, default=200)
    s.add_argument("--crop-frames", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_bank)

    s = sub.add_parser("train-demix", help="step two: train one de-mixing head")
    s.add_argument("--extractor", required=True)
    s.add_argument("--bank", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--variant", required=True, choices=VARIANTS)
    s.add_argument("--snr-db", type=float, required=True)
    s.add_argument("--direction", required=True, choices=DIRECTIONS)
    s.add_argument("--config")
    s.add_argument("--epochs", type=int)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--final-activation", choices=FINAL_ACTIVATIONS)
    s.add_argument("--seed", type=int)
    s.add_argument("--cache", help="directory for cached mixture embeddings")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_demix)

    s = sub.add_parser("evaluate", help="score heads, Before and Clean on test pairs")
    s.add_argument("--extractor", required=True)
    s.add_argument("--bank", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--heads", required=True, help="directory of head files")
    s.add_argument("--test-pairs", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="render a saved report")
    s.add_argument("--report", required=True)
    s.add_argument("--format", choices=FORMATS, default="table")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and model graph")
    s.add_argument("--points", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("run-grid", help="the full two-step protocol over variants x SNRs x directions")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_run_grid)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except DemixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: no such file", file=sys.stderr)
        return DataError.exit_code
    except np.linalg.LinAlgError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
