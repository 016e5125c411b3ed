"""Bit-exact file formats (embedding banks, weight manifests, checkpoints,
prototype banks) and the synthetic teacher-prompt dataset generator.

All formats are little-endian and platform-independent; every write/read pair
round-trips bit-exactly. Vectors are stored as 32-bit floats even when
computed in double.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .numerics import SINGLE, SeededRng
from .prompts import ClassTokenTable, PromptEnsemble, PrototypeBank, SpecialTokens

BANK_MAGIC = b"ECOBANK1"
MANIFEST_MAGIC = b"ECOWMAN1"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed file content; message carries the failing byte offset."""


# ---------------------------------------------------------------------------
# embedding banks
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingBank:
    """Labeled image-feature vectors plus the class table that defines the task."""

    class_table: ClassTokenTable
    labels: np.ndarray  # (n,) int
    vectors: np.ndarray  # (n, d) float32

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=SINGLE)
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise FormatError("bank label outside class table")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def num_classes(self) -> int:
        return self.class_table.num_classes

    def __len__(self) -> int:
        return len(self.labels)

    def class_indices(self, k: int) -> np.ndarray:
        return np.nonzero(self.labels == k)[0]


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what} at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def write_bank(bank: EmbeddingBank) -> bytes:
    out = bytearray()
    out += BANK_MAGIC
    out += struct.pack("<IIII", FORMAT_VERSION, bank.num_classes, bank.dim, len(bank))
    for name, ids in zip(bank.class_table.names, bank.class_table.token_ids):
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<H", len(ids))
        out += struct.pack(f"<{len(ids)}I", *ids)
    vecs = np.ascontiguousarray(bank.vectors, dtype="<f4")
    for label, vec in zip(bank.labels, vecs):
        out += struct.pack("<I", int(label))
        out += vec.tobytes()
    return bytes(out)


def read_bank(data: bytes) -> EmbeddingBank:
    r = _Reader(data)
    if r.take(8, "magic") != BANK_MAGIC:
        raise FormatError("bad magic at byte 0")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} at byte 8")
    k = r.u32("class count")
    dim = r.u32("dimension")
    count = r.u32("record count")
    names, tokens = [], []
    for i in range(k):
        nlen = r.u16(f"class {i} name length")
        names.append(r.take(nlen, f"class {i} name").decode("utf-8"))
        tcount = r.u16(f"class {i} token count")
        tok = struct.unpack(f"<{tcount}I", r.take(4 * tcount, f"class {i} tokens"))
        tokens.append(list(tok))
    labels = np.empty(count, dtype=np.int64)
    vectors = np.empty((count, dim), dtype=SINGLE)
    for i in range(count):
        labels[i] = r.u32(f"record {i} label")
        vectors[i] = np.frombuffer(r.take(4 * dim, f"record {i} vector"), dtype="<f4")
    if r.pos != len(data):
        raise FormatError(f"trailing bytes at byte {r.pos}")
    return EmbeddingBank(
        class_table=ClassTokenTable(names=names, token_ids=tokens),
        labels=labels,
        vectors=vectors,
    )


# ---------------------------------------------------------------------------
# weight manifests (shared container for encoder weights, checkpoints,
# prototype banks)
# ---------------------------------------------------------------------------

_DTYPES = {"f4": "<f4", "f8": "<f8"}


class SchemaError(ValueError):
    pass


def write_manifest(tensors: dict[str, np.ndarray], metadata: dict) -> bytes:
    """Length-prefixed UTF-8 directory (JSON) followed by the raw tensor blob."""
    directory = []
    blob = bytearray()
    for name, arr in tensors.items():
        code = "f8" if arr.dtype == np.float64 else "f4"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        directory.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": code,
                "offset": len(blob),
                "length": len(raw),
            }
        )
        blob += raw
    header = json.dumps(
        {"metadata": metadata, "tensors": directory}, sort_keys=True
    ).encode("utf-8")
    return MANIFEST_MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + bytes(blob)


def read_manifest(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(data)
    if r.take(8, "magic") != MANIFEST_MAGIC:
        raise FormatError("bad magic at byte 0")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} at byte 8")
    hlen = r.u32("header length")
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header at byte 16: {exc}") from exc
    blob = data[r.pos :]
    tensors: dict[str, np.ndarray] = {}
    spans = []
    for entry in header["tensors"]:
        name = entry["name"]
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}")
        off, length = entry["offset"], entry["length"]
        if off < 0 or off + length > len(blob):
            raise FormatError(f"tensor {name!r} outside blob at byte {r.pos + off}")
        spans.append((off, off + length, name))
        arr = np.frombuffer(blob[off : off + length], dtype=_DTYPES[entry["dtype"]])
        tensors[name] = arr.reshape(entry["shape"]).astype(
            np.float64 if entry["dtype"] == "f8" else SINGLE
        )
    spans.sort()
    for (_, end, name), (start, _, other) in zip(spans, spans[1:]):
        if start < end:
            raise FormatError(f"tensors {name!r} and {other!r} overlap")
    return tensors, header["metadata"]


def write_weights(weights: enc.EncoderWeights, extra_metadata: dict | None = None) -> bytes:
    cfg = weights.config
    metadata = {
        "kind": "encoder_weights",
        "layers": cfg.layers,
        "heads": cfg.heads,
        "model_width": cfg.model_width,
        "output_dim": cfg.output_dim,
        "max_positions": cfg.max_positions,
        "vocab_size": cfg.vocab_size,
        "eps": cfg.eps,
    }
    if extra_metadata:
        metadata.update(extra_metadata)
    return write_manifest(dict(weights.named_tensors()), metadata)


def read_weights(data: bytes) -> tuple[enc.EncoderWeights, dict]:
    tensors, metadata = read_manifest(data)
    config = enc.EncoderConfig(
        layers=int(metadata["layers"]),
        heads=int(metadata["heads"]),
        model_width=int(metadata["model_width"]),
        output_dim=int(metadata["output_dim"]),
        max_positions=int(metadata["max_positions"]),
        vocab_size=int(metadata["vocab_size"]),
        eps=float(metadata["eps"]),
    )
    w, d = config.model_width, config.output_dim
    expected = {
        "token_table": (config.vocab_size, w),
        "positional": (config.max_positions, w),
        "final.gain": (w,),
        "final.bias": (w,),
        "projection": (w, d),
    }
    for i in range(config.layers):
        p = f"blocks.{i}."
        expected.update(
            {
                p + "ln1.gain": (w,),
                p + "ln1.bias": (w,),
                p + "attn.qkv_w": (w, 3 * w),
                p + "attn.qkv_b": (3 * w,),
                p + "attn.out_w": (w, w),
                p + "attn.out_b": (w,),
                p + "ln2.gain": (w,),
                p + "ln2.bias": (w,),
                p + "mlp.fc_w": (w, 4 * w),
                p + "mlp.fc_b": (4 * w,),
                p + "mlp.proj_w": (4 * w, w),
                p + "mlp.proj_b": (w,),
            }
        )
    for name, shape in expected.items():
        if name not in tensors:
            raise SchemaError(f"missing tensor {name!r}")
        if tuple(tensors[name].shape) != shape:
            raise SchemaError(
                f"tensor {name!r} has shape {tuple(tensors[name].shape)}, expected {shape}"
            )
    blocks = []
    for i in range(config.layers):
        p = f"blocks.{i}."
        blocks.append(
            enc.BlockWeights(
                ln1_gain=tensors[p + "ln1.gain"],
                ln1_bias=tensors[p + "ln1.bias"],
                qkv_w=tensors[p + "attn.qkv_w"],
                qkv_b=tensors[p + "attn.qkv_b"],
                out_w=tensors[p + "attn.out_w"],
                out_b=tensors[p + "attn.out_b"],
                ln2_gain=tensors[p + "ln2.gain"],
                ln2_bias=tensors[p + "ln2.bias"],
                fc_w=tensors[p + "mlp.fc_w"],
                fc_b=tensors[p + "mlp.fc_b"],
                proj_w=tensors[p + "mlp.proj_w"],
                proj_b=tensors[p + "mlp.proj_b"],
            )
        )
    weights = enc.EncoderWeights(
        config=config,
        token_table=tensors["token_table"],
        positional=tensors["positional"],
        blocks=blocks,
        final_gain=tensors["final.gain"],
        final_bias=tensors["final.bias"],
        projection=tensors["projection"],
    )
    return weights, metadata


def special_tokens_from_metadata(metadata: dict) -> SpecialTokens:
    return SpecialTokens(sot_id=int(metadata["sot_id"]), eot_id=int(metadata["eot_id"]))


# ---------------------------------------------------------------------------
# checkpoints and prototype banks
# ---------------------------------------------------------------------------


def save_checkpoint(ensemble: PromptEnsemble, encoder_hash: str) -> bytes:
    return write_manifest(
        {"context": ensemble.context},
        {
            "kind": "checkpoint",
            "d_prompts": ensemble.d_prompts,
            "n_ctx": ensemble.n_ctx,
            "encoder_hash": encoder_hash,
        },
    )


class CompatibilityWarning(UserWarning):
    pass


def load_checkpoint(data: bytes, expected_encoder_hash: str | None = None):
    """Returns (ensemble, metadata, warning-or-None). A hash mismatch is a
    warning, not an error: the load proceeds but evaluation may be meaningless."""
    tensors, metadata = read_manifest(data)
    if metadata.get("kind") != "checkpoint" or "context" not in tensors:
        raise FormatError("not a checkpoint manifest")
    context = tensors["context"]
    if context.ndim != 3:
        raise FormatError("checkpoint context tensor is not 3-dimensional")
    warning = None
    if expected_encoder_hash is not None and metadata.get("encoder_hash") != expected_encoder_hash:
        warning = "checkpoint was trained against a different encoder"
    return PromptEnsemble(context=context), metadata, warning


def save_prototypes(bank: PrototypeBank) -> bytes:
    return write_manifest(
        {"prototypes": bank.prototypes},
        {
            "kind": "prototypes",
            "encoder_hash": bank.encoder_hash,
            "ensemble_hash": bank.ensemble_hash,
        },
    )


def load_prototypes(data: bytes) -> PrototypeBank:
    tensors, metadata = read_manifest(data)
    if metadata.get("kind") != "prototypes" or "prototypes" not in tensors:
        raise FormatError("not a prototype manifest")
    return PrototypeBank(
        prototypes=tensors["prototypes"],
        encoder_hash=metadata["encoder_hash"],
        ensemble_hash=metadata["ensemble_hash"],
    )


def file_sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# synthetic teacher-prompt datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Desk-scale dataset recipe: class centroids are features of hidden
    ground-truth prompts, so the task is solvable by prompt learning in the
    same feature space."""

    classes: int = 5
    encoder: enc.EncoderConfig = field(
        default_factory=lambda: enc.EncoderConfig(
            layers=2, heads=4, model_width=64, output_dim=32, max_positions=32, vocab_size=128
        )
    )
    teacher_prompts: int = 4
    teacher_len: int = 4
    train_per_class: int = 100
    test_per_class: int = 100
    noise_std: float = 0.3
    seed: int = 1

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise std must be nonnegative")
        if min(self.classes, self.teacher_prompts, self.teacher_len,
               self.train_per_class, self.test_per_class) < 1:
            raise ValueError("all synthetic counts must be at least 1")
        if self.classes < 2:
            raise ValueError("at least two classes are required")


@dataclass
class SynthResult:
    train_bank: EmbeddingBank
    test_bank: EmbeddingBank
    class_table: ClassTokenTable
    weights: enc.EncoderWeights
    specials: SpecialTokens
    teacher_sequences: list[list[list[int]]]  # [class][prompt] full token ids


def generate_synthetic(spec: SynthSpec) -> SynthResult:
    """Build toy weights, hidden teacher prompts, and noisy embedding banks.

    Teacher prompts share their context tokens across classes (mirroring the
    learnable-context layout), so a context of matching shape can reproduce
    the class centroids exactly. Randomly initialized encoders emit features
    dominated by one shared direction, which would leave classes nearly
    collinear; the toy weights therefore get that direction projected out of
    the output projection and are rescaled so centroids have unit-order norm,
    making noise_std directly comparable to class separation. The adjusted
    weights are the frozen encoder for the whole task.
    """
    cfg = spec.encoder
    rng = SeededRng(spec.seed)
    weights = enc.init_random(cfg, rng)
    sot_id, eot_id = cfg.vocab_size - 2, cfg.vocab_size - 1
    specials = SpecialTokens(sot_id=sot_id, eot_id=eot_id)

    usable = cfg.vocab_size - 2
    # distinct leading token per class keeps class sequences distinct
    lead = rng.choice_without_replacement(usable, spec.classes)
    names, class_ids = [], []
    for k in range(spec.classes):
        extra = int(rng.integers(0, 2))  # some classes tokenize to two tokens
        ids = [int(lead[k])] + [int(rng.integers(0, usable)) for _ in range(extra)]
        names.append(f"class_{k}")
        class_ids.append(ids)
    class_table = ClassTokenTable(names=names, token_ids=class_ids)

    teacher_ctx = [
        [int(rng.integers(0, usable)) for _ in range(spec.teacher_len)]
        for _ in range(spec.teacher_prompts)
    ]
    needed = spec.teacher_len + max(len(ids) for ids in class_ids) + 2
    if needed > cfg.max_positions:
        raise ValueError(
            f"teacher sequence length {needed} exceeds maximum {cfg.max_positions}"
        )

    teacher_sequences: list[list[list[int]]] = []
    for k in range(spec.classes):
        teacher_sequences.append(
            [[sot_id] + ctx + class_ids[k] + [eot_id] for ctx in teacher_ctx]
        )

    def teacher_centroids() -> tuple[np.ndarray, np.ndarray]:
        cents = np.zeros((spec.classes, cfg.output_dim))
        feats = []
        for k in range(spec.classes):
            per_class = []
            for ids in teacher_sequences[k]:
                seq = enc.embed_tokens(weights, ids)
                feat, _ = enc.encode_sequence(weights, seq, len(ids) - 1)
                per_class.append(feat.astype(np.float64))
            feats.extend(per_class)
            cents[k] = np.mean(per_class, axis=0)
        return cents, np.stack(feats)

    # project the shared feature direction out of the frozen projection and
    # rescale so centroid norms are unit-order
    _, probe = teacher_centroids()
    mean_dir = probe.mean(axis=0)
    mean_dir /= np.linalg.norm(mean_dir)
    weights.projection = (
        weights.projection.astype(np.float64)
        @ (np.eye(cfg.output_dim) - np.outer(mean_dir, mean_dir))
    ).astype(weights.projection.dtype)
    centered, _ = teacher_centroids()
    scale = 1.0 / np.mean(np.linalg.norm(centered, axis=1))
    weights.projection = (weights.projection * scale).astype(weights.projection.dtype)
    centroids, _ = teacher_centroids()

    def make_bank(per_class: int) -> EmbeddingBank:
        labels = np.repeat(np.arange(spec.classes), per_class)
        noise = rng.gaussian((len(labels), cfg.output_dim), 0.0, 1.0)
        raw = centroids[labels] + spec.noise_std * noise
        vecs = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        return EmbeddingBank(
            class_table=class_table, labels=labels, vectors=vecs.astype(SINGLE)
        )

    return SynthResult(
        train_bank=make_bank(spec.train_per_class),
        test_bank=make_bank(spec.test_per_class),
        class_table=class_table,
        weights=weights,
        specials=specials,
        teacher_sequences=teacher_sequences,
    )
