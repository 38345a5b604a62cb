"""Named-tensor checkpoint container and linear weight interpolation.

Container format (".mpc", bit-exact):

    magic "MPC1"
    u64 little-endian header length
    UTF-8 JSON header {"tensors": [{"name", "shape", "dtype": "f32",
        "offset", "nbytes"}, ...], "meta": {...}}
    data region: tensors packed sequentially without padding, each
        row-major little-endian f32, offsets relative to the region start

Saving the same checkpoint twice yields byte-identical files (the JSON
header is emitted with sorted keys and compact separators).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MPC1"
STAGES = ("zeroshot", "finetuned", "patched", "aligned")


class CheckpointError(Exception):
    """Base class for container/format problems."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedDataError(CheckpointError):
    pass


class OverlappingTensorsError(CheckpointError):
    pass


class IncompatibleCheckpointsError(CheckpointError):
    """Raised by interpolate(); embeds the compat_check report."""


@dataclass
class Checkpoint:
    """Ordered map of named float32 tensors plus string metadata.

    Iteration order is insertion order. meta must carry at least the
    architecture id ("arch") and embedding dim ("embed_dim"); the optional
    "stage" tag is restricted to zeroshot/finetuned/patched/aligned.
    """

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for key in ("arch", "embed_dim"):
            if key not in self.meta:
                raise CheckpointError(f"checkpoint meta missing '{key}'")
        stage = self.meta.get("stage")
        if stage is not None and stage not in STAGES:
            raise CheckpointError(f"unknown stage tag '{stage}'")
        self.tensors = {
            name: np.ascontiguousarray(np.asarray(t, dtype=np.float32))
            for name, t in self.tensors.items()
        }
        self.meta = {str(k): str(v) for k, v in self.meta.items()}

    def names(self) -> list[str]:
        return list(self.tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            {k: v.copy() for k, v in self.tensors.items()}, dict(self.meta)
        )

    def with_meta(self, **updates) -> "Checkpoint":
        meta = dict(self.meta)
        meta.update({k: str(v) for k, v in updates.items()})
        return Checkpoint(dict(self.tensors), meta)

    def total_bytes(self) -> int:
        return sum(t.nbytes for t in self.tensors.values())


def save(ckpt: Checkpoint, path) -> None:
    """Write the container; byte-identical for identical checkpoints."""
    entries = []
    offset = 0
    for name, t in ckpt.tensors.items():
        entries.append(
            {
                "name": name,
                "shape": list(t.shape),
                "dtype": "f32",
                "offset": offset,
                "nbytes": t.nbytes,
            }
        )
        offset += t.nbytes
    header = json.dumps(
        {"tensors": entries, "meta": ckpt.meta},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for t in ckpt.tensors.values():
            f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load(path) -> Checkpoint:
    """Read a container; raises a distinct error kind per defect."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise TruncatedDataError(f"{path}: file shorter than fixed prefix")
    magic = raw[:4]
    if magic != MAGIC:
        if magic[:3] == MAGIC[:3]:
            raise VersionMismatchError(
                f"{path}: container version {magic!r}, expected {MAGIC!r}"
            )
        raise BadMagicError(f"{path}: bad magic bytes {magic!r}")
    (header_len,) = struct.unpack("<Q", raw[4:12])
    if len(raw) < 12 + header_len:
        raise TruncatedDataError(f"{path}: header extends past end of file")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e
    data = raw[12 + header_len :]

    entries = header["tensors"]
    claimed = sorted(
        ((e["offset"], e["offset"] + e["nbytes"], e["name"]) for e in entries)
    )
    for (s0, e0, n0), (s1, e1, n1) in zip(claimed, claimed[1:]):
        if s1 < e0:
            raise OverlappingTensorsError(
                f"{path}: tensors '{n0}' and '{n1}' overlap"
            )
    tensors = {}
    for e in entries:
        if e["dtype"] != "f32":
            raise CheckpointError(f"{path}: unsupported dtype {e['dtype']!r}")
        end = e["offset"] + e["nbytes"]
        if end > len(data):
            raise TruncatedDataError(
                f"{path}: tensor '{e['name']}' extends past data region"
            )
        arr = np.frombuffer(
            data[e["offset"] : end], dtype="<f4"
        ).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.float32, copy=True)
    return Checkpoint(tensors, dict(header["meta"]))


@dataclass
class CompatReport:
    ok: bool
    missing: list[str]
    extra: list[str]
    shape_mismatches: list[tuple[str, tuple, tuple]]

    def __str__(self):
        if self.ok:
            return "compatible"
        parts = []
        if self.missing:
            parts.append(f"missing in b: {self.missing}")
        if self.extra:
            parts.append(f"extra in b: {self.extra}")
        for name, sa, sb in self.shape_mismatches:
            parts.append(f"shape conflict '{name}': {sa} vs {sb}")
        return "; ".join(parts)


def compat_check(a: Checkpoint, b: Checkpoint) -> CompatReport:
    """Same tensor names and shapes; never raises, the report is the output."""
    names_a, names_b = set(a.tensors), set(b.tensors)
    missing = sorted(names_a - names_b)
    extra = sorted(names_b - names_a)
    mismatches = [
        (n, a.tensors[n].shape, b.tensors[n].shape)
        for n in sorted(names_a & names_b)
        if a.tensors[n].shape != b.tensors[n].shape
    ]
    return CompatReport(
        ok=not (missing or extra or mismatches),
        missing=missing,
        extra=extra,
        shape_mismatches=mismatches,
    )


def interpolate(zs: Checkpoint, ft: Checkpoint, alpha: float) -> Checkpoint:
    """Per-element (1-alpha)*zs + alpha*ft, computed at 64-bit.

    Output meta takes the zero-shot checkpoint's entries with the stage tag
    set to "patched" and the mixing coefficient recorded.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    report = compat_check(zs, ft)
    if not report.ok:
        raise IncompatibleCheckpointsError(str(report))
    mixed = {}
    for name, wz in zs.tensors.items():
        wf = ft.tensors[name]
        w = (1.0 - alpha) * wz.astype(np.float64) + alpha * wf.astype(np.float64)
        mixed[name] = w.astype(np.float32)
    meta = dict(zs.meta)
    meta["stage"] = "patched"
    meta["alpha"] = str(float(alpha))
    return Checkpoint(mixed, meta)
