"""Binary tensor format, synthetic bi-temporal data, manifests, checkpoints.

BTF layout (little-endian, fixed): magic "BTF1", u8 dtype code (1 = float64),
u8 ndim, ndim x u64 dims, then raw row-major float64 values. The synthetic
generator stands in for a real change-captioning dataset: a seeded base
feature field, an additive change pattern confined to one quadrant, and a
caption straight from a fixed grammar.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .ce import FeaturePair, GeometryError, grid_side
from .decoder import Vocab
from .model import CaptionModel, ModelConfig
from .rng import SplitMix64, normals, uniforms
from .tensor import Tensor

BTF_MAGIC = b"BTF1"
BTF_DTYPE_F64 = 1
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Raised on malformed BTF bytes; the message carries the byte offset."""


class CheckpointError(ValueError):
    """Raised when a checkpoint is missing pieces or has the wrong version."""


# ---------------------------------------------------------------------------
# BTF codec

def btf_encode(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype=np.float64)
    header = BTF_MAGIC + struct.pack("<BB", BTF_DTYPE_F64, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + dims + arr.astype("<f8").tobytes()


def btf_decode(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != BTF_MAGIC:
        raise FormatError(f"bad magic at offset 0: expected {BTF_MAGIC!r}")
    if len(buf) < 6:
        raise FormatError(f"truncated header at offset {len(buf)}")
    dtype_code, ndim = struct.unpack_from("<BB", buf, 4)
    if dtype_code != BTF_DTYPE_F64:
        raise FormatError(f"unsupported dtype code {dtype_code} at offset 4")
    if ndim < 1:
        raise FormatError("ndim must be >= 1 at offset 5")
    dims_end = 6 + 8 * ndim
    if len(buf) < dims_end:
        raise FormatError(f"truncated dims at offset {len(buf)}")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 6)
    if any(d < 1 for d in dims):
        raise FormatError(f"non-positive dimension in {dims} at offset 6")
    count = 1
    for d in dims:
        count *= d
    expected = dims_end + 8 * count
    if len(buf) < expected:
        raise FormatError(f"truncated data at offset {len(buf)}, expected {expected} bytes")
    if len(buf) > expected:
        raise FormatError(f"trailing bytes at offset {expected}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=dims_end)
    return data.reshape(dims).copy()


def write_btf(t: Tensor | np.ndarray, path) -> None:
    array = t.data if isinstance(t, Tensor) else np.asarray(t)
    with open(path, "wb") as fh:
        fh.write(btf_encode(array))


def read_btf(path) -> Tensor:
    with open(path, "rb") as fh:
        return Tensor(btf_decode(fh.read()))


# ---------------------------------------------------------------------------
# synthetic bi-temporal dataset

KINDS = ("appear", "disappear", "none")
QUADRANT_NAMES = {0: "top left", 1: "top right", 2: "bottom left", 3: "bottom right"}
NO_CHANGE_CAPTION = "no change is observed"


def caption_for(kind: str, quadrant: int) -> str:
    if kind == "none":
        return NO_CHANGE_CAPTION
    verb = "appears" if kind == "appear" else "disappears"
    return f"a structure {verb} in the {QUADRANT_NAMES[quadrant]}"


def quadrant_patches(lv: int, quadrant: int) -> np.ndarray:
    """Boolean mask over patch indices for one quadrant of the S x S grid."""
    s = grid_side(lv)
    half = s // 2
    rows = np.arange(lv) // s
    cols = np.arange(lv) % s
    top = rows < half
    left = cols < half
    if quadrant == 0:
        return top & left
    if quadrant == 1:
        return top & ~left
    if quadrant == 2:
        return ~top & left
    if quadrant == 3:
        return ~top & ~left
    raise ValueError(f"quadrant must be 0..3, got {quadrant}")


@dataclass
class SyntheticSample:
    sample_id: str
    pair: FeaturePair
    caption: str
    kind: str
    quadrant: int | None


def synth_dataset(
    n: int,
    lv: int,
    dv: int,
    seed: int = 0,
    kinds: tuple[str, ...] = KINDS,
    noise: float = 0.01,
    amplitude: float = 1.0,
) -> list[SyntheticSample]:
    """Deterministic synthetic change-captioning samples.

    f1 is a seeded standard-normal field; f2 adds per-entry noise bounded by
    ``noise`` everywhere, plus (for appear/disappear) an additive pattern of
    scale ``amplitude`` confined to one quadrant. Captions come from the
    fixed grammar in caption_for. Kinds and quadrants are assigned
    round-robin so caption classes stay balanced at any n; features come
    from a per-sample SplitMix64 child stream.
    """
    s = grid_side(lv)
    if s % 2 != 0:
        raise GeometryError(f"grid side {s} must be even (quadrants + 2x2 merge)")
    for kind in kinds:
        if kind not in KINDS:
            raise ValueError(f"unknown change kind {kind!r}")
    master = SplitMix64(seed)
    samples = []
    for i in range(n):
        rng = SplitMix64(master.spawn_seed())
        kind = kinds[i % len(kinds)]
        quadrant = (i // len(kinds)) % 4 if kind != "none" else None
        f1 = normals(lv * dv, rng).reshape(lv, dv)
        f2 = f1 + (uniforms(lv * dv, rng).reshape(lv, dv) * 2.0 - 1.0) * noise
        if kind != "none":
            mask = quadrant_patches(lv, quadrant)
            pattern = 0.5 + np.abs(normals(lv * dv, rng).reshape(lv, dv))
            signed = pattern if kind == "appear" else -pattern
            f2 = f2 + amplitude * signed * mask[:, None]
        samples.append(
            SyntheticSample(
                sample_id=f"synth-{seed}-{i:05d}",
                pair=FeaturePair(Tensor(f1), Tensor(f2)),
                caption=caption_for(kind, quadrant if quadrant is not None else 0),
                kind=kind,
                quadrant=quadrant,
            )
        )
    return samples


def build_vocab(samples, instruction: str) -> Vocab:
    texts = [instruction] + [s.caption for s in samples]
    return Vocab.from_texts(texts)


def training_examples(samples, vocab: Vocab, instruction: str) -> list[tuple]:
    """(visual, prompt_ids, target_ids) triples for the trainer."""
    prompt_ids = vocab.encode(instruction)
    return [(s.pair, prompt_ids, vocab.encode(s.caption)) for s in samples]


# ---------------------------------------------------------------------------
# manifests

def write_manifest(samples, out_dir) -> str:
    """Write per-sample BTF feature files plus manifest.jsonl; returns its path."""
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for s in samples:
            f1_rel = f"{s.sample_id}.f1.btf"
            f2_rel = f"{s.sample_id}.f2.btf"
            write_btf(s.pair.f1, os.path.join(out_dir, f1_rel))
            write_btf(s.pair.f2, os.path.join(out_dir, f2_rel))
            record = {
                "id": s.sample_id,
                "f1": f1_rel,
                "f2": f2_rel,
                "caption": s.caption,
                "change": {"quadrant": s.quadrant, "kind": s.kind},
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest_path


def read_manifest(manifest_path) -> list[SyntheticSample]:
    base = os.path.dirname(os.path.abspath(manifest_path))
    samples = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            pair = FeaturePair(
                read_btf(os.path.join(base, rec["f1"])),
                read_btf(os.path.join(base, rec["f2"])),
            )
            samples.append(
                SyntheticSample(
                    sample_id=rec["id"],
                    pair=pair,
                    caption=rec["caption"],
                    kind=rec["change"]["kind"],
                    quadrant=rec["change"]["quadrant"],
                )
            )
    return samples


# ---------------------------------------------------------------------------
# visual inputs (for the augmentation path)

@dataclass
class ImageRef:
    """Raw image stand-in: size metadata plus the payload bytes a base-model
    client would receive."""

    height: int
    width: int
    channels: int
    payload: bytes


@dataclass
class VisualInput:
    """One or two images, either as raw payloads or as precomputed features."""

    source: str  # "file" or "synthetic"
    images: list[ImageRef] | None = None
    features: FeaturePair | None = None

    def __post_init__(self):
        if self.source not in ("file", "synthetic"):
            raise ValueError(f"unknown provenance {self.source!r}")
        if (self.images is None) == (self.features is None):
            raise ValueError("exactly one of images/features must be set")
        if self.images is not None and len(self.images) not in (1, 2):
            raise ValueError(f"expected 1 or 2 images, got {len(self.images)}")

    @property
    def k(self) -> int:
        return len(self.images) if self.images is not None else 2

    def payloads(self) -> list[bytes]:
        if self.images is not None:
            return [img.payload for img in self.images]
        return [btf_encode(self.features.f1.data), btf_encode(self.features.f2.data)]


# ---------------------------------------------------------------------------
# checkpoints

def _module_file(module: str, name: str) -> str:
    return f"{module}.{name}.btf"


def checkpoint_save(model: CaptionModel, path) -> None:
    """Checkpoint = directory of BTF files plus one versioned JSON index.

    Deterministic byte-for-byte in the model state.
    """
    os.makedirs(path, exist_ok=True)
    index = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "vocab": model.vocab.id_to_token,
        "modules": {},
    }
    for module, tensors in model.named_modules().items():
        files = {}
        for name, t in tensors:
            rel = _module_file(module, name)
            write_btf(t, os.path.join(path, rel))
            files[name] = rel
        index["modules"][module] = files
    with open(os.path.join(path, "index.json"), "w", encoding="utf-8") as fh:
        json.dump(index, fh, sort_keys=True, indent=2)
        fh.write("\n")


def checkpoint_load(path) -> CaptionModel:
    index_path = os.path.join(path, "index.json")
    if not os.path.exists(index_path):
        raise CheckpointError(f"no index.json under {path}")
    with open(index_path, "r", encoding="utf-8") as fh:
        index = json.load(fh)
    version = index.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} incompatible with {CHECKPOINT_VERSION}")
    config = ModelConfig.from_dict(index["config"])
    vocab = Vocab(index["vocab"])
    if vocab.id_to_token != index["vocab"]:
        raise CheckpointError("vocab list is not in canonical order")
    model = CaptionModel.build(config, vocab, seed=0)
    for module, tensors in model.named_modules().items():
        if module not in index["modules"]:
            raise CheckpointError(f"checkpoint missing module section {module!r}")
        files = index["modules"][module]
        for name, t in tensors:
            if name not in files:
                raise CheckpointError(f"checkpoint missing tensor {module}.{name}")
            loaded = read_btf(os.path.join(path, files[name]))
            if loaded.shape != t.shape:
                raise CheckpointError(
                    f"tensor {module}.{name} has shape {loaded.shape}, expected {t.shape}"
                )
            t.data = loaded.data
    return model
