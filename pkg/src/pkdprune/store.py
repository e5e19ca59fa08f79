"""Snapshot store for lightweight modules, plus the shared binary container.

Container layout (all integers little-endian)::

    magic      4 bytes   b"LWMS"
    version    u16       FORMAT_VERSION
    kind       u8        1 = lightweight module, 2 = base weights
    hash name  8 bytes   b"blake2b8" (the checksum algorithm)
    config fp  16 bytes  ModelConfig.fingerprint()
    meta len   u32
    meta       JSON (utf-8): array names, shapes and scalar fields
    arrays     raw <f8 values in the order listed in meta["arrays"]
    checksum   8 bytes   blake2b (digest_size=8) of every preceding byte

Lightweight modules list their arrays as ``logalpha_head``,
``logalpha_int``, ``logalpha_hid`` and then ``lora.<layer>.<target>.a`` /
``.b`` in sorted ``(layer, target)`` order.  A store directory holds one
blob per snapshot plus ``manifest.json`` which is replaced atomically.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arch import ModelConfig
from .autodiff import DTYPE, Tensor
from .l0 import MaskSet
from .lightweight import LightweightModule
from .lora import LoraPair, LoraSet

log = logging.getLogger(__name__)

MAGIC = b"LWMS"
FORMAT_VERSION = 1
HASH_NAME = b"blake2b8"
KIND_MODULE = 1
KIND_BASE = 2
_HEADER = struct.Struct("<4sHB8s16sI")


class StoreError(Exception):
    pass


class MissingKeyError(StoreError, KeyError):
    pass


class DuplicateKeyError(StoreError):
    pass


class ChecksumError(StoreError):
    pass


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def encode_container(kind: int, fingerprint: bytes, meta: dict, arrays: list[tuple[str, np.ndarray]]) -> bytes:
    meta = dict(meta)
    meta["arrays"] = [[name, list(arr.shape)] for name, arr in arrays]
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, kind, HASH_NAME, fingerprint, len(meta_bytes)), meta_bytes]
    parts.extend(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in arrays)
    body = b"".join(parts)
    return body + _digest(body)


def decode_container(blob: bytes, expect_kind: int | None = None) -> tuple[int, bytes, dict, dict[str, np.ndarray]]:
    if len(blob) < _HEADER.size + 8:
        raise ChecksumError("container truncated")
    body, check = blob[:-8], blob[-8:]
    if _digest(body) != check:
        raise ChecksumError("container checksum mismatch")
    magic, version, kind, hash_name, fp, meta_len = _HEADER.unpack_from(body, 0)
    if magic != MAGIC:
        raise StoreError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise StoreError(f"unsupported container version {version}")
    if hash_name != HASH_NAME:
        raise StoreError(f"unsupported checksum algorithm {hash_name!r}")
    if expect_kind is not None and kind != expect_kind:
        raise StoreError(f"container kind {kind}, expected {expect_kind}")
    pos = _HEADER.size
    meta = json.loads(body[pos:pos + meta_len].decode())
    pos += meta_len
    arrays = {}
    for name, shape in meta["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=pos).astype(DTYPE).reshape(shape)
        arrays[name] = arr
        pos += 8 * n
    if pos != len(body):
        raise StoreError("container has trailing bytes")
    return kind, fp, meta, arrays


# ------------------------------------------------------------ module encoding


def module_arrays(module: LightweightModule) -> list[tuple[str, np.ndarray]]:
    m = module.masks
    out = [("logalpha_head", m.logalpha_head.data), ("logalpha_int", m.logalpha_int.data),
           ("logalpha_hid", m.logalpha_hid.data)]
    for (layer, target) in sorted(module.lora.pairs):
        pair = module.lora.pairs[(layer, target)]
        out.append((f"lora.{layer}.{target}.a", pair.a.data))
        out.append((f"lora.{layer}.{target}.b", pair.b.data))
    return out


def encode_module(module: LightweightModule, fingerprint: bytes) -> bytes:
    m = module.masks
    meta = {"beta": m.beta, "l": m.l, "r": m.r, "rank": module.lora.rank, "scale": module.lora.scale,
            "targets": list(module.lora.targets), "key": module.sparsity_key, "step": module.step,
            "extra": module.meta}
    return encode_container(KIND_MODULE, fingerprint, meta, module_arrays(module))


def decode_module(blob: bytes, fingerprint: bytes | None = None) -> LightweightModule:
    _, fp, meta, arrays = decode_container(blob, KIND_MODULE)
    if fingerprint is not None and fp != fingerprint:
        raise StoreError("snapshot was written for a different model configuration")

    def t(name):
        return Tensor(arrays[name], requires_grad=False)

    masks = MaskSet(t("logalpha_head"), t("logalpha_int"), t("logalpha_hid"),
                    beta=meta["beta"], l=meta["l"], r=meta["r"])
    pairs = {}
    for name in arrays:
        if name.startswith("lora.") and name.endswith(".a"):
            _, layer, target, _ = name.split(".")
            pairs[(int(layer), target)] = LoraPair(t(name), t(name[:-1] + "b"))
    lora = LoraSet(pairs, meta["rank"], meta["scale"], tuple(meta["targets"]))
    return LightweightModule(masks, lora, meta["key"], meta["step"], meta.get("extra", {}))


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


# ------------------------------------------------------------------ residency


@dataclass
class ResidentReport:
    base_count: int
    lightweight_count: int
    resident_params: int


class ResidencyTracker:
    """Counts the parameter sets alive in working memory during a run."""

    def __init__(self):
        self.base_params = 0
        self.base_count = 0
        self.student: LightweightModule | None = None
        self.teacher: LightweightModule | None = None
        self.optimizer_params = 0
        self.peak_params = 0

    def register_base(self, n_params: int) -> None:
        self.base_count = 1
        self.base_params = n_params
        self._update_peak()

    def register_student(self, module: LightweightModule, optimizer_params: int = 0) -> None:
        self.student = module
        self.optimizer_params = optimizer_params
        self._update_peak()

    def set_teacher(self, module: LightweightModule | None) -> None:
        self.teacher = module
        self._update_peak()

    def report(self) -> ResidentReport:
        mods = [m for m in (self.student, self.teacher) if m is not None]
        params = self.base_params + sum(m.num_params() for m in mods) + self.optimizer_params
        return ResidentReport(self.base_count, len(mods), params)

    def _update_peak(self) -> None:
        self.peak_params = max(self.peak_params, self.report().resident_params)


# ---------------------------------------------------------------------- store


class SnapshotStore:
    """Directory of module snapshots keyed by sparsity level."""

    MANIFEST = "manifest.json"

    def __init__(self, root: str | os.PathLike, cfg: ModelConfig, tracker: ResidencyTracker | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.fingerprint = cfg.fingerprint()
        self.tracker = tracker if tracker is not None else ResidencyTracker()
        self._entries: list[dict] = []
        self._teacher_key = None
        self._teacher: LightweightModule | None = None
        manifest = self.root / self.MANIFEST
        if manifest.exists():
            data = json.loads(manifest.read_text())
            if data.get("fingerprint") != self.fingerprint.hex():
                raise StoreError(f"store at {self.root} belongs to a different model configuration")
            self._entries = data["entries"]

    def keys(self) -> list[float]:
        return [e["key"] for e in self._entries]

    def manifest(self) -> list[dict]:
        return [dict(e) for e in self._entries]

    def __contains__(self, key) -> bool:
        return key in self.keys()

    def __len__(self) -> int:
        return len(self._entries)

    def save(self, key: float, module: LightweightModule, step: int | None = None) -> None:
        if key in self.keys():
            raise DuplicateKeyError(f"snapshot key {key} already stored")
        snap = module.frozen_copy()
        snap.sparsity_key = key
        if step is not None:
            snap.step = step
        blob = encode_module(snap, self.fingerprint)
        name = f"snap_{key:.6f}.bin"
        _atomic_write(self.root / name, blob)
        entry = {"key": key, "file": name, "offset": 0, "length": len(blob),
                 "checksum": blob[-8:].hex(), "step": snap.step}
        entries = self._entries + [entry]
        doc = {"format_version": FORMAT_VERSION, "fingerprint": self.fingerprint.hex(), "entries": entries}
        _atomic_write(self.root / self.MANIFEST, json.dumps(doc, indent=1).encode())
        self._entries = entries

    def load(self, key: float) -> LightweightModule:
        entry = next((e for e in self._entries if e["key"] == key), None)
        if entry is None:
            raise MissingKeyError(f"no snapshot stored under key {key}")
        with open(self.root / entry["file"], "rb") as fh:
            fh.seek(entry["offset"])
            blob = fh.read(entry["length"])
        if len(blob) != entry["length"] or blob[-8:].hex() != entry["checksum"]:
            raise ChecksumError(f"snapshot {key}: blob does not match manifest checksum")
        return decode_module(blob, self.fingerprint)

    def load_teacher(self, key: float) -> LightweightModule:
        """Make ``key`` the resident teacher, releasing the previous one first."""
        if self._teacher_key == key and self._teacher is not None:
            return self._teacher
        self.release_teacher()
        self._teacher = self.load(key)
        self._teacher_key = key
        self.tracker.set_teacher(self._teacher)
        return self._teacher

    def release_teacher(self) -> None:
        self._teacher = None
        self._teacher_key = None
        self.tracker.set_teacher(None)

    def resident_set_accounting(self) -> ResidentReport:
        return self.tracker.report()

    def total_bytes(self) -> int:
        return sum(e["length"] for e in self._entries)


# --------------------------------------------------------------- base weights


def save_base(path: str | os.PathLike, base) -> None:
    from dataclasses import asdict

    meta = {"config": asdict(base.cfg)}
    arrays = [(name, base.arrays[name]) for name in sorted(base.arrays)]
    _atomic_write(Path(path), encode_container(KIND_BASE, base.cfg.fingerprint(), meta, arrays))


def load_base(path: str | os.PathLike):
    from .model import BaseWeights

    blob = Path(path).read_bytes()
    _, fp, meta, arrays = decode_container(blob, KIND_BASE)
    c = meta["config"]
    for name in ("head_counts", "int_dims"):
        if c.get(name) is not None:
            c[name] = tuple(c[name])
    cfg = ModelConfig(**c)
    if cfg.fingerprint() != fp:
        raise StoreError("base weights header fingerprint does not match stored config")
    return BaseWeights(cfg, arrays)


def save_module(path: str | os.PathLike, module: LightweightModule, cfg: ModelConfig) -> None:
    _atomic_write(Path(path), encode_module(module, cfg.fingerprint()))


def load_module(path: str | os.PathLike, cfg: ModelConfig | None = None) -> LightweightModule:
    blob = Path(path).read_bytes()
    return decode_module(blob, cfg.fingerprint() if cfg is not None else None)
