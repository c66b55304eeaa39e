"""Residual-TDNN speaker embedding extractor, speaker classifier, and the
clean embedding bank (step one of the two-step protocol).
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from demixkit.audio import N_CEPS, FeatureMatrix, mfcc
from demixkit.autodiff import (
    Adam,
    BatchNormState,
    Tape,
    Tensor,
    add,
    backward,
    batch_norm,
    crop_time,
    linear,
    log_softmax,
    relu,
    softmax_cross_entropy,
    stats_pool,
    tdnn_splice,
)
from demixkit.corpus import CorpusManifest, Utterance
from demixkit.errors import DataError, NumericalError, SegmentTooShortError, ShapeError
from demixkit.parallel import worker_count

log = logging.getLogger(__name__)

RES_CONTEXT = (-2, -1, 0, 1, 2)
N_RES_BLOCKS = 3
# valid splicing: layer 1 loses 2 frames, every residual block loses 4
TOTAL_SHRINK = 2 + 4 * N_RES_BLOCKS
MIN_FRAMES = TOTAL_SHRINK + 1


@dataclass(frozen=True)
class ExtractorConfig:
    """Layer widths; the defaults are the published architecture."""

    feat_dim: int = N_CEPS
    width: int = 512
    pool_width: int = 1500
    embed_dim: int = 512

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        """(fan_in, fan_out) of every affine layer, in forward order."""
        w = self.width
        shapes = {"layer1": (3 * self.feat_dim, w), "layer2": (w, w)}
        for i in range(1, N_RES_BLOCKS + 1):
            shapes[f"res{i}.conv5"] = (len(RES_CONTEXT) * w, w)
            shapes[f"res{i}.conv1"] = (w, w)
        shapes["layer3"] = (w, self.pool_width)
        shapes["segment"] = (2 * self.pool_width, w)
        shapes["embedding"] = (w, self.embed_dim)
        return shapes


NO_BN_LAYERS = ("embedding", "output")


class ParamSet:
    """Named trainable tensors plus batch-norm running statistics."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}

    def _affine(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator, gain: float = 2.0):
        W = rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out))
        self.params[f"{name}.W"] = Tensor(W, requires_grad=True, name=f"{name}.W")
        self.params[f"{name}.b"] = Tensor(np.zeros((1, fan_out)), requires_grad=True, name=f"{name}.b")

    def _bn(self, name: str, dim: int):
        self.params[f"{name}.gamma"] = Tensor(np.ones((1, dim)), requires_grad=True, name=f"{name}.gamma")
        self.params[f"{name}.beta"] = Tensor(np.zeros((1, dim)), requires_grad=True, name=f"{name}.beta")
        self.bn[name] = BatchNormState.fresh(dim)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def block(self, x: Tensor, name: str, training: bool, activate: bool = True) -> Tensor:
        """affine -> batch norm -> (ReLU)."""
        p = self.params
        h = linear(x, p[f"{name}.W"], p[f"{name}.b"])
        h = batch_norm(h, p[f"{name}.gamma"], p[f"{name}.beta"], self.bn[name], training)
        return relu(h) if activate else h


class Extractor(ParamSet):
    """Frame-level TDNN stack, statistics pooling, two segment-level layers.

    The embedding is the output of the last segment-level layer, which has
    neither batch norm nor activation.
    """

    def __init__(self, config: ExtractorConfig = ExtractorConfig(), seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng([seed, 101])
        for name, (fan_in, fan_out) in config.layer_shapes().items():
            if name == "embedding":
                self._affine(name, fan_in, fan_out, rng, gain=1.0)
            else:
                self._affine(name, fan_in, fan_out, rng)
                self._bn(name, fan_out)

    def frame_level(self, x: Tensor, training: bool) -> Tensor:
        """(..., T, feat_dim) -> (..., T - 14, pool_width)."""
        if x.shape[-1] != self.config.feat_dim:
            raise ShapeError(f"extractor expects {self.config.feat_dim}-dim features, got {x.shape}")
        if x.shape[-2] < MIN_FRAMES:
            raise SegmentTooShortError(f"{x.shape[-2]} frames; the extractor needs at least {MIN_FRAMES}")
        h = self.block(tdnn_splice(x, (-1, 0, 1)), "layer1", training)
        h = self.block(h, "layer2", training)
        for i in range(1, N_RES_BLOCKS + 1):
            h = self.residual(h, i, training)
        return self.block(h, "layer3", training)

    def residual(self, x: Tensor, i: int, training: bool) -> Tensor:
        # splice-5 conv -> BN -> ReLU -> 1x1 conv -> BN -> + skip -> ReLU
        h = self.block(tdnn_splice(x, RES_CONTEXT), f"res{i}.conv5", training)
        h = self.block(h, f"res{i}.conv1", training, activate=False)
        skip = crop_time(x, -RES_CONTEXT[0], x.shape[-2] - (RES_CONTEXT[-1] - RES_CONTEXT[0]))
        return relu(add(h, skip))

    def segment_level(self, pooled: Tensor, training: bool) -> Tensor:
        h = self.block(pooled, "segment", training)
        p = self.params
        return linear(h, p["embedding.W"], p["embedding.b"])

    def forward(self, x: Tensor, training: bool) -> Tensor:
        """(B, T, feat_dim) -> (B, embed_dim); (T, feat_dim) -> (1, embed_dim)."""
        return self.segment_level(stats_pool(self.frame_level(x, training)), training)

    # -- eval-mode fast paths (no tape) --

    def frame_outputs(self, frames: np.ndarray) -> np.ndarray:
        return self.frame_level(Tensor(frames), training=False).data

    def embed_windows(self, frame_out: np.ndarray, windows: Sequence[tuple[int, int]]) -> np.ndarray:
        """Embeddings of input-frame windows ``(start, length)`` of one utterance.

        In eval mode every frame-level layer acts on a fixed receptive field,
        so the frame-level output of a crop equals rows ``start : start +
        length - 14`` of the whole-utterance output ``frame_out``.
        """
        pooled = []
        for start, length in windows:
            n = length - TOTAL_SHRINK
            if n < 1 or start < 0 or start + n > frame_out.shape[0]:
                raise SegmentTooShortError(f"window ({start}, {length}) does not fit {frame_out.shape[0] + TOTAL_SHRINK} frames")
            pooled.append(stats_pool(Tensor(frame_out[start : start + n])).data[0])
        return self.segment_level(Tensor(np.stack(pooled)), training=False).data

    def embed(self, frames: np.ndarray) -> np.ndarray:
        """Eval-mode embedding of one whole feature matrix."""
        return self.forward(Tensor(frames), training=False).data[0]


class Classifier(ParamSet):
    """One 512-unit hidden layer (batch norm, ReLU) and a softmax output layer."""

    def __init__(self, n_speakers: int, embed_dim: int = 512, hidden: int = 512, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng([seed, 202])
        self.n_speakers = n_speakers
        self.embed_dim = embed_dim
        self._affine("hidden", embed_dim, hidden, rng)
        self._bn("hidden", hidden)
        self._affine("output", hidden, n_speakers, rng, gain=1.0)

    def logits(self, e: Tensor, training: bool) -> Tensor:
        if e.shape[-1] != self.embed_dim:
            raise ShapeError(f"classifier expects {self.embed_dim}-dim embeddings, got {e.shape}")
        h = self.block(e, "hidden", training)
        return linear(h, self.params["output.W"], self.params["output.b"])

    def predict_proba(self, embeddings: np.ndarray) -> np.ndarray:
        e = np.atleast_2d(embeddings)
        return np.exp(log_softmax(self.logits(Tensor(e), training=False).data))

    def predict(self, embeddings: np.ndarray) -> np.ndarray:
        e = np.atleast_2d(embeddings)
        return np.argmax(self.logits(Tensor(e), training=False).data, axis=1)


def classify(classifier: Classifier, embedding: np.ndarray) -> np.ndarray:
    """Probability vector over speakers for one embedding."""
    return classifier.predict_proba(embedding)[0]


def extract_embedding(extractor: Extractor, f: FeatureMatrix, training: bool = False) -> np.ndarray:
    return extractor.forward(Tensor(f.frames), training=training).data[0]


@dataclass
class SpeakerModel:
    extractor: Extractor
    classifier: Classifier

    @classmethod
    def create(cls, n_speakers: int, config: ExtractorConfig = ExtractorConfig(), seed: int = 0) -> "SpeakerModel":
        return cls(Extractor(config, seed), Classifier(n_speakers, config.embed_dim, config.width, seed))

    def parameters(self) -> list[Tensor]:
        return self.extractor.parameters() + self.classifier.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"extractor.{k}": v for k, v in self.extractor.params.items()}
        out.update({f"classifier.{k}": v for k, v in self.classifier.params.items()})
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, ps in (("extractor", self.extractor), ("classifier", self.classifier)):
            for name, st in ps.bn.items():
                out[f"{prefix}.{name}.running_mean"] = st.running_mean
                out[f"{prefix}.{name}.running_var"] = st.running_var
        return out

    def load_arrays(self, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        if set(named) != set(params):
            raise ShapeError(f"parameter names differ from the architecture: {sorted(set(named) ^ set(params))[:4]}")
        for k, t in named.items():
            if params[k].shape != t.shape:
                raise ShapeError(f"{k}: stored shape {params[k].shape}, architecture {t.shape}")
            t.data[...] = params[k]
        for prefix, ps in (("extractor", self.extractor), ("classifier", self.classifier)):
            for name, st in ps.bn.items():
                st.running_mean = np.array(buffers[f"{prefix}.{name}.running_mean"], dtype=np.float64)
                st.running_var = np.array(buffers[f"{prefix}.{name}.running_var"], dtype=np.float64)


# ---------------------------------------------------------------- training


@dataclass
class StepOneConfig:
    epochs: int = 20
    batch_size: int = 32
    crop_frames: int = 200
    crops_per_utterance: int = 1
    learning_rate: float = 1e-3
    beta1: float = 0.95
    beta2: float = 0.999
    epsilon: float = 1e-8
    holdout_crops: int = 4
    classifier_mode: str = "joint"
    probe_epochs: int = 20
    # after each epoch, reset batch-norm running statistics to the average
    # batch statistics of that epoch's crops under the final weights
    recalibrate_bn: bool = True
    seed: int = 0


def compute_features(manifest: CorpusManifest, entries: Iterable[Utterance] | None = None) -> dict[str, np.ndarray]:
    """MFCC matrices keyed by utterance id, in manifest order."""
    entries = list(manifest.entries if entries is None else entries)
    with ThreadPoolExecutor(worker_count()) as pool:
        feats = list(pool.map(lambda e: mfcc(manifest.load(e)).frames, entries))
    return {e.utterance_id: f for e, f in zip(entries, feats)}


def evenly_spaced_windows(total: int, length: int, count: int) -> list[tuple[int, int]]:
    length = min(length, total)
    if count <= 1 or total == length:
        return [((total - length) // 2, length)]
    starts = np.linspace(0, total - length, count).round().astype(int)
    return [(int(s), length) for s in starts]


def holdout_accuracy(model: SpeakerModel, manifest: CorpusManifest, features: dict[str, np.ndarray],
                     crop_frames: int, crops: int) -> float:
    """Classifier accuracy on evenly spaced clean crops of the test split."""
    correct = total = 0
    for e in manifest.split("test"):
        f = features[e.utterance_id]
        emb = model.extractor.embed_windows(model.extractor.frame_outputs(f), evenly_spaced_windows(f.shape[0], crop_frames, crops))
        pred = model.classifier.predict(emb)
        correct += int((pred == manifest.label(e.speaker_id)).sum())
        total += pred.size
    return correct / total if total else float("nan")


def _crop_batch(features, utts, starts, length):
    return np.stack([features[u][s : s + length] for u, s in zip(utts, starts)])


def train_step_one(
    manifest: CorpusManifest,
    config: StepOneConfig = StepOneConfig(),
    model_config: ExtractorConfig = ExtractorConfig(),
    features: dict[str, np.ndarray] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[SpeakerModel, Adam, list[dict]]:
    """Joint training of extractor and classifier with softmax cross-entropy.

    Every epoch draws ``crops_per_utterance`` random ``crop_frames`` crops per
    training utterance, shuffles them and runs Adam on mini-batches. Returns
    the model, the optimizer (for checkpointing) and one log record per epoch.
    """
    train = manifest.split("train")
    if not train:
        raise DataError("manifest has no training utterances")
    if features is None:
        features = compute_features(manifest)
    for e in train:
        if features[e.utterance_id].shape[0] < config.crop_frames:
            raise SegmentTooShortError(f"{e.utterance_id}: shorter than the {config.crop_frames}-frame crop")
    model = SpeakerModel.create(len(manifest.speakers), model_config, config.seed)
    opt = Adam(model.parameters(), config.learning_rate, config.beta1, config.beta2, config.epsilon)
    history = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, 303, epoch])
        utts = [e.utterance_id for e in train for _ in range(config.crops_per_utterance)]
        labels = np.array([manifest.label(e.speaker_id) for e in train for _ in range(config.crops_per_utterance)])
        starts = [int(rng.integers(0, features[u].shape[0] - config.crop_frames + 1)) for u in utts]
        order = rng.permutation(len(utts))
        batches = [order[i : i + config.batch_size] for i in range(0, len(order), config.batch_size)]
        batches = [b for b in batches if len(b) >= 2]

        def crops(idx):
            return _crop_batch(features, [utts[j] for j in idx], [starts[j] for j in idx], config.crop_frames)

        losses = []
        for idx in batches:
            x = Tensor(crops(idx))
            with Tape() as tape:
                emb = model.extractor.forward(x, training=True)
                loss = softmax_cross_entropy(model.classifier.logits(emb, training=True), labels[idx])
            if not np.isfinite(loss.item()):
                raise NumericalError(f"epoch {epoch}: non-finite loss")
            backward(loss, tape, model.parameters())
            opt.step()
            losses.append(loss.item())
            del tape, loss, emb, x  # free this batch's graph before the next forward
        if config.recalibrate_bn:
            recalibrate_bn(model, (crops(idx) for idx in batches))
        record = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "holdout_accuracy": holdout_accuracy(model, manifest, features, config.crop_frames, config.holdout_crops),
        }
        history.append(record)
        log.info("step one epoch %d loss %.4f holdout %.3f (%.1fs)", epoch, record["loss"],
                 record["holdout_accuracy"], time.perf_counter() - t0)
        if on_epoch:
            on_epoch(record)
    if config.classifier_mode == "probe" and config.epochs > 0:
        train_probe(model, manifest, features, config)
        history.append({
            "epoch": "probe",
            "loss": None,
            "holdout_accuracy": holdout_accuracy(model, manifest, features, config.crop_frames, config.holdout_crops),
        })
    elif config.classifier_mode not in ("joint", "probe"):
        raise DataError(f"unknown classifier mode {config.classifier_mode!r}")
    return model, opt, history


def recalibrate_bn(model: SpeakerModel, batches: Iterable[np.ndarray]) -> None:
    """Set every running mean/variance to the average of its batch statistics.

    Runs train-mode forward passes (no tape, no parameter change); batch k
    enters the running average with weight 1/(k+1).
    """
    states = [st for ps in (model.extractor, model.classifier) for st in ps.bn.values()]
    saved = [st.momentum for st in states]
    try:
        for k, x in enumerate(batches):
            for st in states:
                st.momentum = k / (k + 1)
            model.classifier.logits(model.extractor.forward(Tensor(x), training=True), training=True)
    finally:
        for st, m in zip(states, saved):
            st.momentum = m


def train_probe(model: SpeakerModel, manifest: CorpusManifest, features: dict[str, np.ndarray], config: StepOneConfig) -> None:
    """Replace the classifier with one trained on frozen per-segment embeddings."""
    rng = np.random.default_rng([config.seed, 404])
    embs, labels = [], []
    for e in manifest.split("train"):
        f = features[e.utterance_id]
        windows = [(int(rng.integers(0, f.shape[0] - config.crop_frames + 1)), config.crop_frames) for _ in range(8)]
        embs.append(model.extractor.embed_windows(model.extractor.frame_outputs(f), windows))
        labels += [manifest.label(e.speaker_id)] * len(windows)
    X, y = np.concatenate(embs), np.array(labels)
    clf = Classifier(model.classifier.n_speakers, model.classifier.embed_dim, model.extractor.config.width, config.seed + 1)
    opt = Adam(clf.parameters(), config.learning_rate, config.beta1, config.beta2, config.epsilon)
    for _ in range(config.probe_epochs):
        order = rng.permutation(len(y))
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            if len(idx) < 2:
                continue
            with Tape() as tape:
                loss = softmax_cross_entropy(clf.logits(Tensor(X[idx]), training=True), y[idx])
            backward(loss, tape, clf.parameters())
            opt.step()
    if config.recalibrate_bn:
        st = clf.bn["hidden"]
        st.momentum, saved = 0.0, st.momentum
        clf.logits(Tensor(X), training=True)
        st.momentum = saved
    model.classifier = clf


# ---------------------------------------------------------------- bank


@dataclass
class EmbeddingBank:
    """Per-speaker mean of clean segment embeddings."""

    speakers: list[str]
    vectors: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.speakers):
            raise ShapeError(f"bank of {len(self.speakers)} speakers cannot hold vectors {self.vectors.shape}")
        self._row = {s: i for i, s in enumerate(self.speakers)}

    def __getitem__(self, speaker_id: str) -> np.ndarray:
        try:
            return self.vectors[self._row[speaker_id]]
        except KeyError:
            raise DataError(f"speaker {speaker_id!r} missing from the embedding bank") from None

    def __contains__(self, speaker_id: str) -> bool:
        return speaker_id in self._row

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def rows(self, speaker_ids: Sequence[str]) -> np.ndarray:
        return np.stack([self[s] for s in speaker_ids])


def build_bank(
    extractor: Extractor,
    manifest: CorpusManifest,
    features: dict[str, np.ndarray] | None = None,
    segments_per_speaker: int = 200,
    crop_frames: int = 200,
    seed: int = 0,
) -> EmbeddingBank:
    """Average ``segments_per_speaker`` eval-mode crop embeddings per training speaker.

    Each crop picks one of the speaker's training utterances uniformly, then a
    uniform start offset.
    """
    by_spk: dict[str, list[Utterance]] = {}
    for e in manifest.split("train"):
        by_spk.setdefault(e.speaker_id, []).append(e)
    if features is None:
        features = compute_features(manifest, manifest.split("train"))
    speakers = sorted(by_spk, key=manifest.label)
    vectors = []
    for spk in speakers:
        rng = np.random.default_rng([seed, 505, manifest.label(spk)])
        usable = [e for e in by_spk[spk] if features[e.utterance_id].shape[0] >= crop_frames]
        if not usable:
            raise DataError(f"speaker {spk}: no training utterance of at least {crop_frames} frames")
        picks: dict[int, list[tuple[int, int]]] = {}
        for _ in range(segments_per_speaker):
            k = int(rng.integers(len(usable)))
            total = features[usable[k].utterance_id].shape[0]
            picks.setdefault(k, []).append((int(rng.integers(0, total - crop_frames + 1)), crop_frames))
        embs = [
            extractor.embed_windows(extractor.frame_outputs(features[usable[k].utterance_id]), picks[k])
            for k in sorted(picks)
        ]
        vectors.append(np.concatenate(embs).mean(axis=0))
    return EmbeddingBank(
        speakers,
        np.stack(vectors),
        {"segments_per_speaker": segments_per_speaker, "crop_frames": crop_frames, "seed": seed},
    )
