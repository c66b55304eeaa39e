"""Cosine similarity and identification accuracy of de-mixed embeddings,
and the Before/Sub/.../Clean results table.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from demixkit.demix import DIRECTIONS, DISPLAY_NAMES, VARIANTS, DemixHead, MixturePool
from demixkit.embedding import Classifier, EmbeddingBank
from demixkit.errors import DataError, UsageError

ROW_ORDER = ("Before",) + tuple(DISPLAY_NAMES[v] for v in VARIANTS) + ("Clean",)
FORMATS = ("table", "json", "csv")


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    aa, bb = float(a @ a), float(b @ b)
    if aa == 0.0 or bb == 0.0:
        raise DataError("cosine of a zero vector is undefined")
    # sqrt(aa * bb) rather than |a| |b|: exact 1.0 for identical inputs
    return float(a @ b) / float(np.sqrt(aa * bb))


def cosine_rows(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.array([cosine(a, b) for a, b in zip(A, B)])


def accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    predicted, labels = np.asarray(predicted), np.asarray(labels)
    if predicted.size == 0:
        raise DataError("accuracy over an empty set")
    return float(np.mean(predicted == labels))


@dataclass(frozen=True)
class Cell:
    cosine: float
    accuracy: float
    n_examples: int


@dataclass
class EvalReport:
    """Cells keyed by (row name, snr_db, direction)."""

    cells: dict[tuple[str, float, str], Cell] = field(default_factory=dict)

    def add(self, row: str, snr_db: float, direction: str, cell: Cell) -> None:
        if row not in ROW_ORDER:
            raise UsageError(f"unknown report row {row!r}")
        if direction not in DIRECTIONS:
            raise UsageError(f"unknown direction {direction!r}")
        if cell.n_examples <= 0:
            raise DataError(f"{row} at {snr_db} dB has no examples")
        self.cells[(row, float(snr_db), direction)] = cell

    def get(self, row: str, snr_db: float, direction: str) -> Cell:
        return self.cells[(row, float(snr_db), direction)]

    def snrs(self) -> list[float]:
        return sorted({k[1] for k in self.cells})

    def directions(self) -> list[str]:
        present = {k[2] for k in self.cells}
        return [d for d in DIRECTIONS if d in present]

    def rows(self, direction: str | None = None) -> list[str]:
        present = {k[0] for k in self.cells if direction is None or k[2] == direction}
        return [r for r in ROW_ORDER if r in present]

    def ordered_keys(self) -> list[tuple[str, float, str]]:
        return sorted(self.cells, key=lambda k: (DIRECTIONS.index(k[2]), ROW_ORDER.index(k[0]), k[1]))

    def to_dict(self) -> dict:
        return {
            "cells": [
                {"row": r, "snr_db": s, "direction": d, **asdict(self.cells[(r, s, d)])}
                for r, s, d in self.ordered_keys()
            ]
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        report = cls()
        try:
            for c in json.loads(text)["cells"]:
                report.add(c["row"], c["snr_db"], c["direction"], Cell(float(c["cosine"]), float(c["accuracy"]), int(c["n_examples"])))
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"not an evaluation report: {exc}") from exc
        return report


# ---------------------------------------------------------------- cells


def score(predicted: np.ndarray, speakers: list[str], bank: EmbeddingBank, classifier: Classifier, labels: dict[str, int]) -> Cell:
    """Mean per-sample cosine to the bank entry, and classifier accuracy."""
    if len(speakers) == 0:
        raise DataError("empty test set")
    cos = cosine_rows(predicted, bank.rows(speakers))
    acc = accuracy(classifier.predict(predicted), np.array([labels[s] for s in speakers]))
    return Cell(float(np.mean(cos)), acc, len(speakers))


def evaluate_head(head: DemixHead, pool: MixturePool, bank: EmbeddingBank, classifier: Classifier,
                  labels: dict[str, int], direction: str) -> Cell:
    known, predicted = pool.roles(direction)
    return score(head(pool.e_mix, bank.rows(known)), predicted, bank, classifier, labels)


def evaluate_before(pool: MixturePool, bank: EmbeddingBank, classifier: Classifier,
                    labels: dict[str, int], direction: str) -> Cell:
    """The untouched mixture embedding scored against the speaker to be predicted."""
    _, predicted = pool.roles(direction)
    return score(pool.e_mix, predicted, bank, classifier, labels)


def evaluate_clean(clean: dict[str, np.ndarray], pool: MixturePool, bank: EmbeddingBank,
                   classifier: Classifier, labels: dict[str, int], direction: str) -> Cell:
    """Reference row.

    Cosine compares each predicted speaker's bank entry with itself, so it is
    1.0 exactly. Accuracy classifies the clean embedding of the predicted
    speaker's own test utterance in each mixture; ``clean`` maps utterance id
    to that embedding.
    """
    _, predicted = pool.roles(direction)
    utts = [s.target_utt if direction == "known-interferer" else s.interferer_utt for s in pool.specs]
    targets = bank.rows(predicted)
    cos = cosine_rows(targets, targets)
    acc = accuracy(classifier.predict(np.stack([clean[u] for u in utts])), np.array([labels[s] for s in predicted]))
    return Cell(float(np.mean(cos)), acc, len(utts))


# ---------------------------------------------------------------- rendering


def _snr_label(s: float) -> str:
    return f"{s:g}dB"


def render_report(report: EvalReport, fmt: str = "table") -> str:
    if fmt == "json":
        return report.to_json()
    if fmt == "csv":
        return _render_csv(report)
    if fmt == "table":
        return _render_table(report)
    raise UsageError(f"unknown format {fmt!r}; choose from {', '.join(FORMATS)}")


def _render_csv(report: EvalReport) -> str:
    snrs = report.snrs()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["direction", "method"] + [f"cosine_{_snr_label(s)}" for s in snrs] + [f"accuracy_{_snr_label(s)}" for s in snrs])
    for d in report.directions():
        for r in report.rows(d):
            cells = [report.cells.get((r, s, d)) for s in snrs]
            w.writerow(
                [d, r]
                + [repr(c.cosine) if c else "" for c in cells]
                + [repr(c.accuracy) if c else "" for c in cells]
            )
    return buf.getvalue()


def _render_table(report: EvalReport) -> str:
    snrs = report.snrs()
    name_w = max(len(r) for r in ROW_ORDER)
    col = 7
    lines = []
    for d in report.directions():
        known = "interferer" if d == "known-interferer" else "target"
        lines.append(f"direction: {d} (known {known} embedding)")
        half = col * len(snrs)
        lines.append(" " * name_w + " | " + "Cosine Similarity".center(half) + " | " + "Identification Accuracy (%)".center(half))
        heads = "".join(_snr_label(s).rjust(col) for s in snrs)
        lines.append("Method".ljust(name_w) + " | " + heads.ljust(half) + " | " + heads)
        lines.append("-" * len(lines[-1]))
        for r in report.rows(d):
            cells = [report.cells.get((r, s, d)) for s in snrs]
            cos = "".join((f"{c.cosine:.2f}" if c else "-").rjust(col) for c in cells)
            acc = "".join((f"{100 * c.accuracy:.1f}" if c else "-").rjust(col) for c in cells)
            lines.append(r.ljust(name_w) + " | " + cos.ljust(half) + " | " + acc)
        lines.append("")
    return "\n".join(lines)
