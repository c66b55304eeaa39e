"""De-mixing heads (step two): recover one speaker's embedding from the
mixture embedding and the other speaker's clean bank embedding.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from demixkit.audio import mfcc
from demixkit.autodiff import Adam, Tape, Tensor, backward, concat, linear, mae_loss, mul, relu, sub
from demixkit.corpus import CorpusManifest
from demixkit.embedding import EmbeddingBank, Extractor
from demixkit.errors import DataError, NumericalError, ShapeError, UsageError
from demixkit.mixer import MixSpec, mix_at_snr
from demixkit.parallel import worker_count

log = logging.getLogger(__name__)

VARIANTS = ("sub", "mul", "concat1", "concat2", "share-concat", "separate-concat")
DISPLAY_NAMES = {
    "sub": "Sub",
    "mul": "Mul",
    "concat1": "Concat1",
    "concat2": "Concat2",
    "share-concat": "Share-Concat",
    "separate-concat": "Separate-Concat",
}
# known speaker's bank embedding -> which speaker the head predicts
DIRECTIONS = ("known-interferer", "known-target")
FINAL_ACTIVATIONS = ("relu", "none")


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    return variant


def check_direction(direction: str) -> str:
    if direction not in DIRECTIONS:
        raise UsageError(f"unknown direction {direction!r}; choose from {', '.join(DIRECTIONS)}")
    return direction


def _shapes(variant: str, d: int) -> dict[str, tuple[int, int]]:
    if variant in ("sub", "mul"):
        return {"W": (d, d), "b": (1, d)}
    if variant == "concat1":
        return {"W": (2 * d, d), "b": (1, d)}
    if variant == "concat2":
        return {"W0": (2 * d, d), "b0": (1, d), "W1": (d, d), "b1": (1, d)}
    if variant == "share-concat":
        return {"W0": (d, d), "b0": (1, d), "W1": (2 * d, d), "b1": (1, d)}
    return {"W00": (d, d), "b00": (1, d), "W01": (d, d), "b01": (1, d), "W2": (2 * d, d), "b2": (1, d)}


class DemixHead:
    """One de-mixing function f(e_mix, e_known) -> estimate of the other speaker.

    ``final_activation`` only affects the two branch-concatenation variants,
    whose published form ends in a ReLU.
    """

    def __init__(self, variant: str, dim: int = 512, seed: int = 0, final_activation: str = "relu"):
        self.variant = check_variant(variant)
        if final_activation not in FINAL_ACTIVATIONS:
            raise UsageError(f"final_activation must be one of {FINAL_ACTIVATIONS}")
        self.final_activation = final_activation
        self.dim = dim
        rng = np.random.default_rng([seed, 606, VARIANTS.index(variant)])
        self.params: dict[str, Tensor] = {}
        for name, shape in _shapes(variant, dim).items():
            if name.startswith("W"):
                data = rng.normal(0.0, np.sqrt(1.0 / shape[0]), size=shape)
            else:
                data = np.zeros(shape)
            self.params[name] = Tensor(data, requires_grad=True, name=name)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _out(self, h: Tensor) -> Tensor:
        return relu(h) if self.final_activation == "relu" else h

    def forward(self, e_mix: Tensor, e_known: Tensor) -> Tensor:
        if e_mix.shape != e_known.shape or e_mix.shape[-1] != self.dim:
            raise ShapeError(f"{self.variant}: expected two {self.dim}-dim inputs, got {e_mix.shape} and {e_known.shape}")
        p = self.params
        v = self.variant
        if v == "sub":
            return linear(sub(e_mix, e_known), p["W"], p["b"])
        if v == "mul":
            return linear(mul(e_mix, e_known), p["W"], p["b"])
        if v == "concat1":
            return linear(concat(e_mix, e_known), p["W"], p["b"])
        if v == "concat2":
            h = relu(linear(concat(e_mix, e_known), p["W0"], p["b0"]))
            return linear(h, p["W1"], p["b1"])
        if v == "share-concat":
            k_mix = relu(linear(e_mix, p["W0"], p["b0"]))
            k_known = relu(linear(e_known, p["W0"], p["b0"]))
            return self._out(linear(concat(k_mix, k_known), p["W1"], p["b1"]))
        k_mix = relu(linear(e_mix, p["W00"], p["b00"]))
        k_known = relu(linear(e_known, p["W01"], p["b01"]))
        return self._out(linear(concat(k_mix, k_known), p["W2"], p["b2"]))

    def __call__(self, e_mix: np.ndarray, e_known: np.ndarray) -> np.ndarray:
        a, b = np.atleast_2d(e_mix), np.atleast_2d(e_known)
        out = self.forward(Tensor(a), Tensor(b)).data
        return out[0] if np.ndim(e_mix) == 1 else out


def demix(head: DemixHead, e_mix: np.ndarray, e_known: np.ndarray) -> np.ndarray:
    return head(e_mix, e_known)


# ---------------------------------------------------------------- mixtures


def compute_e_mix(extractor: Extractor, frames: np.ndarray) -> np.ndarray:
    """Eval-mode embedding of mixture features; the extractor is never updated here."""
    return extractor.embed(frames)


@dataclass
class MixturePool:
    """Mixture embeddings for a list of pairs at one SNR.

    Embeddings are rounded through float32 so a pool loaded from disk is
    indistinguishable from a freshly computed one.
    """

    specs: list[MixSpec]
    e_mix: np.ndarray
    target_speakers: list[str]
    interferer_speakers: list[str]

    def __post_init__(self):
        if not (len(self.specs) == self.e_mix.shape[0] == len(self.target_speakers) == len(self.interferer_speakers)):
            raise ShapeError("mixture pool columns have different lengths")

    def __len__(self) -> int:
        return len(self.specs)

    def roles(self, direction: str) -> tuple[list[str], list[str]]:
        """(known speakers, predicted speakers) for one direction."""
        if check_direction(direction) == "known-interferer":
            return self.interferer_speakers, self.target_speakers
        return self.target_speakers, self.interferer_speakers


def mixture_features(manifest: CorpusManifest, spec: MixSpec) -> np.ndarray:
    t, i = manifest[spec.target_utt], manifest[spec.interferer_utt]
    return mfcc(mix_at_snr(manifest.load(t), manifest.load(i), spec.snr_db).waveform).frames


def build_pool(extractor: Extractor, manifest: CorpusManifest, specs: Sequence[MixSpec]) -> MixturePool:
    specs = list(specs)
    if not specs:
        raise DataError("no mixtures to embed")

    def one(spec):
        return compute_e_mix(extractor, mixture_features(manifest, spec))

    with ThreadPoolExecutor(worker_count()) as pool:
        emb = np.stack(list(pool.map(one, specs)))
    return MixturePool(
        specs,
        emb.astype(np.float32).astype(np.float64),
        [manifest[s.target_utt].speaker_id for s in specs],
        [manifest[s.interferer_utt].speaker_id for s in specs],
    )


# ---------------------------------------------------------------- training


@dataclass
class StepTwoConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.95
    beta2: float = 0.999
    epsilon: float = 1e-8
    final_activation: str = "relu"
    seed: int = 0


def pool_mae(head: DemixHead, pool: MixturePool, bank: EmbeddingBank, direction: str) -> float:
    known, predicted = pool.roles(direction)
    out = head(pool.e_mix, bank.rows(known))
    return float(np.mean(np.abs(out - bank.rows(predicted))))


@dataclass
class StepTwoResult:
    head: DemixHead
    optimizer: Adam
    history: list[dict] = field(default_factory=list)

    @property
    def final_mae(self) -> float:
        return self.history[-1]["mae"]


def train_step_two(
    variant: str,
    pool: MixturePool,
    bank: EmbeddingBank,
    direction: str,
    config: StepTwoConfig = StepTwoConfig(),
    on_epoch: Callable[[dict], None] | None = None,
) -> StepTwoResult:
    """Fit one head with MAE against the predicted speaker's bank embedding.

    The pool may hold several interferers per target utterance; each epoch
    uses one of them per target, drawn afresh. Record 0 is the MAE of the
    untrained head over the whole pool; every later record is the epoch's
    mean training MAE.
    """
    check_direction(direction)
    known, predicted = pool.roles(direction)
    for spk in set(known) | set(predicted):
        bank[spk]
    head = DemixHead(variant, bank.dim, config.seed, config.final_activation)
    if pool.e_mix.shape[1] != bank.dim:
        raise ShapeError(f"mixture embeddings are {pool.e_mix.shape[1]}-dim, bank is {bank.dim}-dim")
    opt = Adam(head.parameters(), config.learning_rate, config.beta1, config.beta2, config.epsilon)
    by_target: dict[str, list[int]] = {}
    for i, s in enumerate(pool.specs):
        by_target.setdefault(s.target_utt, []).append(i)
    groups = list(by_target.values())
    K, P = bank.rows(known), bank.rows(predicted)
    history = [{"epoch": 0, "mae": pool_mae(head, pool, bank, direction)}]
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, 707, epoch])
        rows = np.array([g[int(rng.integers(len(g)))] for g in groups])
        rows = rows[rng.permutation(len(rows))]
        losses, weights = [], []
        for i in range(0, len(rows), config.batch_size):
            idx = rows[i : i + config.batch_size]
            with Tape() as tape:
                loss = mae_loss(head.forward(Tensor(pool.e_mix[idx]), Tensor(K[idx])), Tensor(P[idx]))
            if not np.isfinite(loss.item()):
                raise NumericalError(f"{variant} epoch {epoch}: non-finite loss")
            backward(loss, tape, head.parameters())
            opt.step()
            losses.append(loss.item())
            weights.append(len(idx))
        record = {"epoch": epoch, "mae": float(np.average(losses, weights=weights))}
        history.append(record)
        if on_epoch:
            on_epoch(record)
    log.info("%s %s: MAE %.4f -> %.4f", variant, direction, history[0]["mae"], history[-1]["mae"])
    return StepTwoResult(head, opt, history)
