"""Gradient snapshot capture and the CGFG binary container.

File layout (little-endian)::

    magic   4s   b"CGFG"
    version u16  1
    rows    u32
    cols    u32
    count   u32
    count x { client_id u32, round u32, payload f32[rows*cols] (row-major) }
    [optional descriptor: b"CGFD", length u32, UTF-8 JSON]

The optional descriptor carries metadata for parameter checkpoints (codec
spec, tensor names and shapes) stored in the same container.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

MAGIC = b"CGFG"
DESCRIPTOR_MAGIC = b"CGFD"
VERSION = 1
_HEADER = struct.Struct("<4sHIII")
_RECORD = struct.Struct("<II")
HEADER_SIZE = _HEADER.size  # 18
RECORD_HEADER_SIZE = _RECORD.size  # 8

PathLike = Union[str, Path]


class StoreFormatError(ValueError):
    pass


class BadMagicError(StoreFormatError):
    pass


class VersionMismatchError(StoreFormatError):
    pass


class TruncatedPayloadError(StoreFormatError):
    pass


@dataclass
class Snapshot:
    client_id: int
    round: int
    payload: np.ndarray  # float32, (rows, cols)


@dataclass
class SnapshotStore:
    rows: int
    cols: int
    records: List[Snapshot] = field(default_factory=list)
    meta: Optional[dict] = None

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be positive")
        self._keys = set()
        for r in self.records:
            self._check_new(r.client_id, r.round)
            self._keys.add((r.client_id, r.round))

    def _check_new(self, client_id, round_index):
        if (client_id, round_index) in self._keys:
            raise ValueError(f"duplicate snapshot for client {client_id}, round {round_index}")

    def __len__(self):
        return len(self.records)

    def add(self, client_id: int, round_index: int, canvas) -> None:
        canvas = np.asarray(canvas)
        if canvas.shape != (self.rows, self.cols):
            raise ValueError(f"canvas shape {canvas.shape} != store shape {(self.rows, self.cols)}")
        self._check_new(client_id, round_index)
        self._keys.add((client_id, round_index))
        self.records.append(Snapshot(int(client_id), int(round_index), canvas.astype("<f4")))

    def canvases(self) -> np.ndarray:
        """All payloads as a float64 array of shape (n, rows, cols)."""
        if not self.records:
            return np.zeros((0, self.rows, self.cols))
        return np.stack([r.payload for r in self.records]).astype(np.float64)

    def subset(self, indices: Iterable[int]) -> "SnapshotStore":
        return SnapshotStore(self.rows, self.cols, [self.records[i] for i in indices])

    def equals(self, other: "SnapshotStore") -> bool:
        if (self.rows, self.cols, len(self)) != (other.rows, other.cols, len(other)):
            return False
        return all(
            a.client_id == b.client_id and a.round == b.round and np.array_equal(a.payload, b.payload)
            for a, b in zip(self.records, other.records)
        )


def to_bytes(store: SnapshotStore) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, store.rows, store.cols, len(store.records))]
    for r in store.records:
        parts.append(_RECORD.pack(r.client_id, r.round))
        parts.append(np.ascontiguousarray(r.payload, dtype="<f4").tobytes())
    if store.meta is not None:
        blob = json.dumps(store.meta, sort_keys=True).encode("utf-8")
        parts.append(DESCRIPTOR_MAGIC + struct.pack("<I", len(blob)) + blob)
    return b"".join(parts)


def from_bytes(buf: bytes) -> SnapshotStore:
    if len(buf) < HEADER_SIZE:
        if buf[:4] != MAGIC[: len(buf[:4])]:
            raise BadMagicError("bad magic")
        raise TruncatedPayloadError("file shorter than header")
    magic, version, rows, cols, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version} (expected {VERSION})")
    n = rows * cols
    rec_size = RECORD_HEADER_SIZE + 4 * n
    off = HEADER_SIZE
    records = []
    for _ in range(count):
        if off + rec_size > len(buf):
            raise TruncatedPayloadError(f"truncated payload: record {len(records)} of {count}")
        cid, rnd = _RECORD.unpack_from(buf, off)
        payload = np.frombuffer(buf, dtype="<f4", count=n, offset=off + RECORD_HEADER_SIZE).reshape(rows, cols).copy()
        records.append(Snapshot(cid, rnd, payload))
        off += rec_size
    meta = None
    if off < len(buf):
        if buf[off : off + 4] != DESCRIPTOR_MAGIC or off + 8 > len(buf):
            raise StoreFormatError("unexpected trailing bytes after records")
        (length,) = struct.unpack_from("<I", buf, off + 4)
        blob = buf[off + 8 : off + 8 + length]
        if len(blob) != length:
            raise TruncatedPayloadError("truncated descriptor")
        meta = json.loads(blob.decode("utf-8"))
    return SnapshotStore(rows, cols, records, meta)


def write_store(store: SnapshotStore, path: PathLike) -> None:
    Path(path).write_bytes(to_bytes(store))


def read_store(path: PathLike) -> SnapshotStore:
    return from_bytes(Path(path).read_bytes())


# -------------------------------------------------------- tensor checkpoints


def save_tensors(path: PathLike, tensors: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Persist named tensors as one flattened f32 record plus a descriptor."""
    names = list(tensors)
    flat = np.concatenate([np.asarray(tensors[k], dtype=np.float64).ravel() for k in names]) if names else np.zeros(0)
    layout = [[k, list(np.shape(tensors[k]))] for k in names]
    desc = {"tensors": layout, "meta": meta or {}}
    cols = max(flat.size, 1)
    payload = np.zeros((1, cols), dtype="<f4")
    payload[0, : flat.size] = flat
    store = SnapshotStore(1, cols, [Snapshot(0, 0, payload)], meta=desc)
    write_store(store, path)


def load_tensors(path: PathLike) -> Tuple[Dict[str, np.ndarray], dict]:
    store = read_store(path)
    if store.meta is None or "tensors" not in store.meta:
        raise StoreFormatError("file has no tensor descriptor")
    flat = store.records[0].payload.ravel().astype(np.float64)
    out = {}
    off = 0
    for name, shape in store.meta["tensors"]:
        size = int(np.prod(shape)) if shape else 1
        out[name] = flat[off : off + size].reshape(shape)
        off += size
    return out, store.meta.get("meta", {})


# ------------------------------------------------------------ dataset views


def split(store: SnapshotStore, train_fraction: float = 0.9, seed: int = 0) -> Tuple[SnapshotStore, SnapshotStore]:
    """Deterministic shuffled partition into train and test stores."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    n = len(store)
    n_train = int(round(train_fraction * n))
    if n_train < 1 or n_train >= n:
        raise ValueError(f"store of {n} snapshots too small to split at {train_fraction}")
    order = np.random.default_rng(seed).permutation(n)
    return store.subset(sorted(order[:n_train])), store.subset(sorted(order[n_train:]))


def snapshot_stats(store: SnapshotStore) -> List[dict]:
    """Per-round min / max / mean / std over every canvas value of that round."""
    if not len(store):
        raise ValueError("empty store")
    by_round: Dict[int, List[np.ndarray]] = {}
    for r in store.records:
        by_round.setdefault(r.round, []).append(r.payload)
    rows = []
    for rnd in sorted(by_round):
        vals = np.stack(by_round[rnd]).astype(np.float64)
        rows.append(
            {
                "round": rnd,
                "count": len(by_round[rnd]),
                "min": float(vals.min()),
                "max": float(vals.max()),
                "mean": float(vals.mean()),
                "std": float(vals.std()),
            }
        )
    return rows


def capture_run(config, rounds: Optional[int] = None, store: Optional[SnapshotStore] = None, data=None):
    """Run an uncompressed, noise-free federation on the capture split and
    record one canvas per selected client per round.

    ``config`` is a :class:`~fedcodec.fedsim.FedConfig`; ``rounds`` overrides
    ``config.rounds``. Returns ``(store, transcript)``.
    """
    from dataclasses import replace

    from . import fedsim

    T = config.rounds if rounds is None else rounds
    if T < 1:
        raise ValueError("capture needs at least one round")
    cfg = replace(config, rounds=T, codec="identity", privacy=None, downlink="plain")
    rows, cols = fedsim.canvas_shape(cfg)
    if store is None:
        store = SnapshotStore(rows, cols)
    elif (store.rows, store.cols) != (rows, cols):
        raise ValueError("store shape does not match model canvas")

    def record(client_id, round_index, canvas):
        store.add(client_id, round_index, canvas)

    if data is None:
        data = fedsim.make_experiment_data(cfg)
    transcript = fedsim.run_experiment(cfg, data=data, phase="capture", on_upload=record)
    return store, transcript
