"""Single-file binary container for checkpoints, banks and mixture pools.

Layout::

    b"SEDM" | u32 version (=1) | u32 header length | header JSON | payload

All integers are little-endian. The header is canonical JSON (sorted keys,
no whitespace) and lists every tensor as ``{name, kind, shape, offset}``;
the payload is the tensors' float32 little-endian bytes in header order.
``payload_sha256`` in the header guards the payload. Arrays are float64 in
memory, so a load/save cycle reproduces a file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from demixkit.autodiff import Adam, AdamState
from demixkit.demix import DemixHead, MixturePool, check_direction, check_variant
from demixkit.embedding import EmbeddingBank, ExtractorConfig, SpeakerModel
from demixkit.errors import CorruptFileError, NumericalError, ProvenanceError, ShapeError
from demixkit.mixer import MixSpec

MAGIC = b"SEDM"
VERSION = 1
PREFIX = struct.Struct("<4sII")
MAX_HEADER = 64 * 1024 * 1024
TENSOR_KINDS = ("param", "buffer", "optimizer", "data")


@dataclass
class Container:
    format: str
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    kinds: dict[str, str] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def put(self, name: str, array: np.ndarray, kind: str) -> None:
        self.arrays[name] = np.asarray(array, dtype=np.float64)
        self.kinds[name] = kind

    def of_kind(self, kind: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if self.kinds[k] == kind}


def encode(c: Container) -> bytes:
    descriptors, chunks, offset = [], [], 0
    for name, arr in c.arrays.items():
        f32 = arr.astype("<f4")
        if not np.all(np.isfinite(f32)):
            raise NumericalError(f"{name}: value not representable as a finite float32")
        raw = f32.tobytes()
        descriptors.append({"name": name, "kind": c.kinds[name], "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format": c.format,
        "meta": c.meta,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "tensors": descriptors,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    return PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + payload


def _fail(msg: str):
    raise CorruptFileError(msg)


def decode(data: bytes, expect: str | None = None) -> Container:
    if len(data) < PREFIX.size:
        _fail("file too short for the container prefix")
    magic, version, hlen = PREFIX.unpack_from(data)
    if magic != MAGIC:
        _fail(f"bad magic {magic!r}")
    if version != VERSION:
        _fail(f"unsupported format version {version}")
    if hlen > MAX_HEADER or PREFIX.size + hlen > len(data):
        _fail("header length exceeds file size")
    try:
        header = json.loads(data[PREFIX.size : PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CorruptFileError(f"header is not JSON: {exc}") from None
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        _fail("header lacks a tensor table")
    fmt, meta = header.get("format"), header.get("meta")
    if not isinstance(fmt, str) or not isinstance(meta, dict):
        _fail("header lacks format or metadata")
    if expect is not None and fmt != expect:
        _fail(f"expected a {expect} file, found {fmt!r}")
    payload = data[PREFIX.size + hlen :]
    if header.get("payload_bytes") != len(payload):
        _fail(f"payload is {len(payload)} bytes, header says {header.get('payload_bytes')}")
    if header.get("payload_sha256") != hashlib.sha256(payload).hexdigest():
        _fail("payload checksum mismatch")
    c = Container(fmt, meta=meta)
    offset = 0
    for d in header["tensors"]:
        if not isinstance(d, dict):
            _fail("malformed tensor descriptor")
        name, kind, shape = d.get("name"), d.get("kind"), d.get("shape")
        if not isinstance(name, str) or name in c.arrays or kind not in TENSOR_KINDS:
            _fail(f"malformed tensor descriptor {d!r:.80}")
        if not isinstance(shape, list) or not all(type(s) is int and s >= 0 for s in shape):
            _fail(f"{name}: malformed shape")
        if d.get("offset") != offset:
            _fail(f"{name}: offset {d.get('offset')} out of order (expected {offset})")
        n = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + n > len(payload):
            _fail(f"{name}: payload truncated")
        arr = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=offset).reshape(shape).astype(np.float64)
        if not np.all(np.isfinite(arr)):
            _fail(f"{name}: non-finite values")
        c.put(name, arr, kind)
        offset += n
    if offset != len(payload):
        _fail("payload longer than its tensor table")
    return c


def write_atomic(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path: str | Path, expect: str | None = None) -> Container:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptFileError(f"{path}: {exc.strerror or exc}") from None
    try:
        return decode(data, expect)
    except CorruptFileError as exc:
        raise CorruptFileError(f"{path}: {exc}") from None


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _jsonable(meta: dict) -> dict:
    return json.loads(json.dumps(meta, sort_keys=True, allow_nan=False))


# ---------------------------------------------------------------- optimizer


def _put_optimizer(c: Container, names: list[str], opt: Adam | None) -> None:
    if opt is None:
        return
    st = opt.state
    c.meta["optimizer"] = {
        "step": st.step,
        "beta1": st.beta1,
        "beta2": st.beta2,
        "epsilon": st.epsilon,
        "learning_rate": st.learning_rate,
    }
    for name, m, v in zip(names, st.m, st.v):
        c.put(f"adam.m/{name}", m, "optimizer")
        c.put(f"adam.v/{name}", v, "optimizer")


def _get_optimizer(c: Container, names: list[str]) -> AdamState | None:
    hyper = c.meta.get("optimizer")
    if hyper is None:
        return None
    try:
        return AdamState(
            step=int(hyper["step"]),
            m=[c.arrays[f"adam.m/{n}"] for n in names],
            v=[c.arrays[f"adam.v/{n}"] for n in names],
            beta1=float(hyper["beta1"]),
            beta2=float(hyper["beta2"]),
            epsilon=float(hyper["epsilon"]),
            learning_rate=float(hyper["learning_rate"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"incomplete optimizer state: {exc}") from None


# ---------------------------------------------------------------- speaker model


def save_speaker_model(path, model: SpeakerModel, speakers: list[str], optimizer: Adam | None = None,
                       seed: int = 0, metadata: dict | None = None) -> str:
    """Write extractor + classifier (+ Adam state); returns the file's sha256."""
    c = Container("checkpoint")
    c.meta = {
        "architecture": "residual-tdnn-xvector",
        "extractor": asdict(model.extractor.config),
        "speakers": list(speakers),
        "seed": seed,
        "info": _jsonable(metadata or {}),
    }
    named = model.named_parameters()
    for k, t in named.items():
        c.put(k, t.data, "param")
    for k, arr in model.named_buffers().items():
        c.put(k, arr, "buffer")
    _put_optimizer(c, list(named), optimizer)
    data = encode(c)
    write_atomic(path, data)
    return hashlib.sha256(data).hexdigest()


@dataclass
class LoadedModel:
    model: SpeakerModel
    speakers: list[str]
    optimizer: AdamState | None
    meta: dict
    sha256: str


def load_speaker_model(path) -> LoadedModel:
    c = read_container(path, "checkpoint")
    try:
        if c.meta.get("architecture") != "residual-tdnn-xvector":
            raise CorruptFileError(f"unknown architecture {c.meta.get('architecture')!r}")
        config = ExtractorConfig(**c.meta["extractor"])
        speakers = [str(s) for s in c.meta["speakers"]]
        model = SpeakerModel.create(len(speakers), config)
        model.load_arrays(c.of_kind("param"), c.of_kind("buffer"))
    except (KeyError, TypeError) as exc:
        raise CorruptFileError(f"{path}: incomplete checkpoint ({exc})") from None
    except ShapeError as exc:
        raise CorruptFileError(f"{path}: {exc}") from None
    return LoadedModel(model, speakers, _get_optimizer(c, list(model.named_parameters())), c.meta, file_sha256(path))


# ---------------------------------------------------------------- bank


def save_bank(path, bank: EmbeddingBank) -> str:
    c = Container("bank", meta={"speakers": list(bank.speakers), "provenance": _jsonable(bank.provenance)})
    c.put("vectors", bank.vectors, "data")
    data = encode(c)
    write_atomic(path, data)
    return hashlib.sha256(data).hexdigest()


def load_bank(path) -> EmbeddingBank:
    c = read_container(path, "bank")
    speakers = c.meta.get("speakers")
    if not isinstance(speakers, list) or not all(isinstance(s, str) for s in speakers):
        raise CorruptFileError(f"{path}: missing speaker-id table")
    if "vectors" not in c.arrays or c.arrays["vectors"].ndim != 2 or c.arrays["vectors"].shape[0] != len(speakers):
        raise CorruptFileError(f"{path}: vectors do not match the speaker-id table")
    if len(set(speakers)) != len(speakers):
        raise CorruptFileError(f"{path}: duplicate speaker ids")
    return EmbeddingBank(speakers, c.arrays["vectors"], dict(c.meta.get("provenance") or {}))


# ---------------------------------------------------------------- heads


def save_head(path, head: DemixHead, optimizer: Adam | None = None, metadata: dict | None = None) -> str:
    c = Container("head")
    c.meta = {
        "variant": head.variant,
        "dim": head.dim,
        "final_activation": head.final_activation,
        "info": _jsonable(metadata or {}),
    }
    for k, t in head.params.items():
        c.put(k, t.data, "param")
    _put_optimizer(c, list(head.params), optimizer)
    data = encode(c)
    write_atomic(path, data)
    return hashlib.sha256(data).hexdigest()


@dataclass
class LoadedHead:
    head: DemixHead
    optimizer: AdamState | None
    meta: dict


def load_head(path) -> LoadedHead:
    c = read_container(path, "head")
    try:
        head = DemixHead(check_variant(c.meta["variant"]), int(c.meta["dim"]), 0, c.meta["final_activation"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"{path}: bad head metadata ({exc})") from None
    params = c.of_kind("param")
    if set(params) != set(head.params):
        raise CorruptFileError(f"{path}: parameters {sorted(params)} do not fit variant {head.variant}")
    for k, t in head.params.items():
        if params[k].shape != t.shape:
            raise CorruptFileError(f"{path}: {k} has shape {params[k].shape}, expected {t.shape}")
        t.data[...] = params[k]
    info = c.meta.get("info")
    if isinstance(info, dict) and "direction" in info:
        try:
            check_direction(info["direction"])
        except ValueError as exc:
            raise CorruptFileError(f"{path}: {exc}") from None
    return LoadedHead(head, _get_optimizer(c, list(head.params)), c.meta)


# ---------------------------------------------------------------- mixture pools


def save_pool(path, pool: MixturePool, metadata: dict | None = None) -> str:
    c = Container("pool", meta={
        "specs": [asdict(s) for s in pool.specs],
        "target_speakers": pool.target_speakers,
        "interferer_speakers": pool.interferer_speakers,
        "info": _jsonable(metadata or {}),
    })
    c.put("e_mix", pool.e_mix, "data")
    data = encode(c)
    write_atomic(path, data)
    return hashlib.sha256(data).hexdigest()


def load_pool(path) -> tuple[MixturePool, dict]:
    c = read_container(path, "pool")
    try:
        specs = [MixSpec(str(s["target_utt"]), str(s["interferer_utt"]), float(s["snr_db"])) for s in c.meta["specs"]]
        pool = MixturePool(specs, c.arrays["e_mix"], list(c.meta["target_speakers"]), list(c.meta["interferer_speakers"]))
    except (KeyError, TypeError, ValueError, ShapeError) as exc:
        raise CorruptFileError(f"{path}: malformed mixture pool ({exc})") from None
    return pool, c.meta.get("info") or {}


def require_provenance(recorded: str | None, actual: str, what: str) -> None:
    if recorded != actual:
        raise ProvenanceError(f"{what} hash mismatch: recorded {recorded}, found {actual}")
