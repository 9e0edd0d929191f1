"""Binary checkpoints with sparse storage for frozen pruned parameters.

Layout (all integers little-endian)::

    magic      8 bytes  b"ANPRCKPT"
    version    u16
    reserved   u16      (0)
    sections   repeated: tag (4 ASCII bytes), length u64, payload, crc32(payload) u32

Section tags, in file order:

    META  UTF-8 JSON: input shape, dtype, layer specs, parameter directory,
          frozen keys, epoch, rng states, free-form ``extra``
    PARM  one per parameter, in directory order.  Dense payload: raw values.
          Sparse payload: index width u8, 7 zero bytes, count u64, then
          ``count`` sorted flat indices (width bytes each) and ``count`` values.
    FRZN  one per frozen parameter, in META order: ``numpy.packbits`` of the
          flattened freeze mask
    MASK  optional pruning state: u32 JSON length, JSON, packbits(mask)
    END\\0 u32 count of preceding sections

A frozen parameter's sparse payload holds every non-frozen position plus any
entry with a nonzero bit pattern, so decoding is bitwise lossless (``-0.0``
included) and the stored count equals the number of retained parameters.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import LayerSpec, Network
from .pruning import ApHyperparams, IterationRecord, MaskState, ScheduleParams
from .tensor import Rng

MAGIC = b"ANPRCKPT"
VERSION = 1
DENSE = "dense"
SPARSE = "sparse"


class CheckpointError(IOError):
    """Unreadable, truncated, corrupted or incompatible checkpoint."""


@dataclass
class SparsePayload:
    size: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if len(self.indices) != len(self.values):
            raise ValueError("indices and values differ in length")
        if len(self.indices) > 1 and not np.all(np.diff(self.indices.astype(np.int64)) > 0):
            raise ValueError("sparse indices must be strictly increasing")

    @property
    def count(self) -> int:
        return len(self.values)

    @property
    def index_width(self) -> int:
        return index_width(self.size)

    def to_bytes(self) -> bytes:
        width = self.index_width
        head = struct.pack("<B7xQ", width, self.count)
        idx = self.indices.astype(f"<u{width}")
        return head + idx.tobytes() + self.values.astype(self.values.dtype.newbyteorder("<")).tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes, size: int, dtype) -> "SparsePayload":
        dtype = np.dtype(dtype).newbyteorder("<")
        width, count = struct.unpack_from("<B7xQ", raw)
        if width != index_width(size):
            raise CheckpointError(f"sparse index width {width} does not fit size {size}")
        start = 16
        end = start + width * count
        if len(raw) != end + dtype.itemsize * count:
            raise CheckpointError("sparse payload length does not match its count")
        indices = np.frombuffer(raw[start:end], dtype=f"<u{width}").astype(np.int64)
        values = np.frombuffer(raw[end:], dtype=dtype)
        if count and indices[-1] >= size:
            raise CheckpointError("sparse index out of range")
        return cls(size, indices, values)


def index_width(size: int) -> int:
    if size <= 1 << 16:
        return 2
    if size <= 1 << 32:
        return 4
    return 8


def encode_sparse(values: np.ndarray, keep: np.ndarray | None = None) -> SparsePayload:
    """Store entries with a nonzero bit pattern, plus every ``keep`` position.

    Passing the complement of a freeze mask as ``keep`` stores every retained
    parameter, including retained ones that happen to be exactly zero.
    """
    flat = np.ascontiguousarray(values).ravel()
    selected = flat.view(f"u{flat.dtype.itemsize}") != 0
    if keep is not None:
        selected |= np.asarray(keep, dtype=bool).ravel()
    idx = np.flatnonzero(selected)
    return SparsePayload(flat.size, idx, flat[idx].copy())


def decode_sparse(payload: SparsePayload, shape, dtype) -> np.ndarray:
    out = np.zeros(payload.size, dtype=dtype)
    out[payload.indices] = payload.values
    return out.reshape(shape)


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _mask_state_payload(state: MaskState) -> bytes:
    header = {
        "layer": state.layer,
        "hyper": vars(state.hyper),
        "total_epochs": state.total_epochs,
        "schedule": vars(state.schedule),
        "frozen": state.frozen,
        "last_epoch": state.last_epoch,
        "size": int(state.mask.size),
        "rng": state.rng.get_state(),
        "history": [vars(r) for r in state.history],
    }
    head = _dumps(header)
    return struct.pack("<I", len(head)) + head + np.packbits(state.mask).tobytes()


def _mask_state_from_payload(raw: bytes) -> MaskState:
    (n,) = struct.unpack_from("<I", raw)
    header = json.loads(raw[4:4 + n])
    mask = np.unpackbits(np.frombuffer(raw[4 + n:], dtype=np.uint8), count=header["size"]).astype(bool)
    return MaskState(
        layer=header["layer"],
        hyper=ApHyperparams(**header["hyper"]),
        total_epochs=header["total_epochs"],
        schedule=ScheduleParams(**header["schedule"]),
        mask=mask,
        rng=Rng.from_state(header["rng"]),
        frozen=header["frozen"],
        last_epoch=header["last_epoch"],
        history=[IterationRecord(**r) for r in header["history"]],
    )


def checkpoint_bytes(net: Network, mask_state: MaskState | None = None, epoch: int = 0,
                     rng_states: dict | None = None, extra: dict | None = None) -> bytes:
    directory = []
    payloads = []
    for key, value in net.params.items():
        encoding = SPARSE if key in net.frozen else DENSE
        if encoding == SPARSE:
            payload = encode_sparse(value, ~net.frozen[key]).to_bytes()
        else:
            payload = np.ascontiguousarray(value).astype(value.dtype.newbyteorder("<")).tobytes()
        directory.append({"layer": key[0], "name": key[1], "shape": list(value.shape),
                          "encoding": encoding})
        payloads.append(payload)
    meta = {
        "input_shape": list(net.input_shape),
        "dtype": net.dtype.str.replace(">", "<").replace("=", "<"),
        "layers": [s.to_dict() for s in net.specs],
        "params": directory,
        "frozen": [[k[0], k[1]] for k in net.frozen],
        "epoch": int(epoch),
        "rng": rng_states or {},
        "extra": extra or {},
    }
    sections = [_section(b"META", _dumps(meta))]
    sections += [_section(b"PARM", p) for p in payloads]
    sections += [_section(b"FRZN", np.packbits(m.ravel()).tobytes()) for m in net.frozen.values()]
    if mask_state is not None:
        sections.append(_section(b"MASK", _mask_state_payload(mask_state)))
    sections.append(_section(b"END\0", struct.pack("<I", len(sections))))
    return MAGIC + struct.pack("<HH", VERSION, 0) + b"".join(sections)


def save(path, net: Network, mask_state: MaskState | None = None, epoch: int = 0,
         rng_states: dict | None = None, extra: dict | None = None) -> int:
    """Write a checkpoint; returns its size in bytes."""
    blob = checkpoint_bytes(net, mask_state, epoch, rng_states, extra)
    Path(path).write_bytes(blob)
    return len(blob)


@dataclass
class ParamRecord:
    layer: int
    name: str
    value: np.ndarray
    encoding: str
    payload_bytes: int
    stored_entries: int


@dataclass
class Checkpoint:
    version: int
    input_shape: tuple
    dtype: np.dtype
    layers: list[LayerSpec]
    params: list[ParamRecord]
    frozen: dict = field(default_factory=dict)
    mask_state: MaskState | None = None
    epoch: int = 0
    rng_states: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    file_bytes: int = 0

    def network(self) -> Network:
        net = Network(self.input_shape, self.layers, Rng(0), self.dtype)
        for rec in self.params:
            key = (rec.layer, rec.name)
            if key not in net.params or net.params[key].shape != rec.value.shape:
                raise CheckpointError(f"parameter {key} does not fit the stored architecture")
            net.params[key] = rec.value.copy()
        for key, mask in self.frozen.items():
            net.frozen[key] = mask.copy()
        return net


def _iter_sections(raw: bytes, path):
    pos = 12
    while pos < len(raw):
        if pos + 12 > len(raw):
            raise CheckpointError(f"{path}: truncated section header at byte {pos}")
        tag = raw[pos:pos + 4]
        (length,) = struct.unpack_from("<Q", raw, pos + 4)
        start = pos + 12
        end = start + length
        if end + 4 > len(raw):
            raise CheckpointError(f"{path}: truncated {tag!r} section at byte {pos}")
        payload = raw[start:end]
        (crc,) = struct.unpack_from("<I", raw, end)
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"{path}: checksum failure in {tag!r} section at byte {pos}")
        yield tag, payload
        pos = end + 4


def read_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror or exc})") from None
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not an annealprune checkpoint")
    version, _ = struct.unpack_from("<HH", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    sections = list(_iter_sections(raw, path))
    if not sections or sections[-1][0] != b"END\0":
        raise CheckpointError(f"{path}: truncated checkpoint (no END section)")
    (count,) = struct.unpack("<I", sections[-1][1])
    if count != len(sections) - 1:
        raise CheckpointError(f"{path}: END section expects {count} sections, found {len(sections) - 1}")
    if sections[0][0] != b"META":
        raise CheckpointError(f"{path}: first section is not META")
    meta = json.loads(sections[0][1])
    dtype = np.dtype(meta["dtype"])
    body = sections[1:-1]
    params = []
    for entry in meta["params"]:
        if not body or body[0][0] != b"PARM":
            raise CheckpointError(f"{path}: missing PARM section for {entry['layer']}/{entry['name']}")
        _, payload = body.pop(0)
        shape = tuple(entry["shape"])
        size = int(np.prod(shape))
        if entry["encoding"] == SPARSE:
            sp = SparsePayload.from_bytes(payload, size, dtype)
            value = decode_sparse(sp, shape, dtype.newbyteorder("="))
            stored = sp.count
        else:
            if len(payload) != size * dtype.itemsize:
                raise CheckpointError(f"{path}: dense payload size mismatch for {entry['layer']}/{entry['name']}")
            value = np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("=")).reshape(shape)
            stored = size
        params.append(ParamRecord(entry["layer"], entry["name"], value, entry["encoding"],
                                  len(payload), stored))
    shapes = {(p.layer, p.name): p.value.shape for p in params}
    frozen = {}
    for layer, name in meta["frozen"]:
        if not body or body[0][0] != b"FRZN":
            raise CheckpointError(f"{path}: missing FRZN section for {layer}/{name}")
        _, payload = body.pop(0)
        shape = shapes[(layer, name)]
        bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=int(np.prod(shape)))
        frozen[(layer, name)] = bits.astype(bool).reshape(shape)
    mask_state = None
    if body and body[0][0] == b"MASK":
        mask_state = _mask_state_from_payload(body.pop(0)[1])
    if body:
        raise CheckpointError(f"{path}: unexpected section {body[0][0]!r}")
    return Checkpoint(
        version=version,
        input_shape=tuple(meta["input_shape"]),
        dtype=dtype.newbyteorder("="),
        layers=[LayerSpec.from_dict(d) for d in meta["layers"]],
        params=params,
        frozen=frozen,
        mask_state=mask_state,
        epoch=meta["epoch"],
        rng_states=meta["rng"],
        extra=meta["extra"],
        file_bytes=len(raw),
    )


def load(path) -> tuple[Network, MaskState | None]:
    ckpt = read_checkpoint(path)
    return ckpt.network(), ckpt.mask_state


def compression_report(ckpt: Checkpoint) -> dict:
    """Per-layer parameter, stored-entry and byte counts.

    ``stored`` counts the entries a layer actually keeps (all of them when
    stored dense, the sparse entries otherwise); ``reduction`` is
    ``1 - stored_total / params_total``.
    """
    by_layer: dict[int, list[ParamRecord]] = {}
    for rec in ckpt.params:
        by_layer.setdefault(rec.layer, []).append(rec)
    rows = []
    for i, spec in enumerate(ckpt.layers):
        if spec.kind not in ("conv2d", "maxpool2x2", "dense"):
            continue
        recs = by_layer.get(i, [])
        params = sum(r.value.size for r in recs)
        rows.append({
            "layer": i,
            "kind": spec.kind,
            "params": params,
            "stored": sum(r.stored_entries for r in recs),
            "nonzero": int(sum(np.count_nonzero(r.value) for r in recs)),
            "encoding": SPARSE if any(r.encoding == SPARSE for r in recs) else DENSE,
            "dense_bytes": params * ckpt.dtype.itemsize,
            "actual_bytes": sum(r.payload_bytes for r in recs),
        })
    total = {key: sum(r[key] for r in rows)
             for key in ("params", "stored", "nonzero", "dense_bytes", "actual_bytes")}
    total["reduction"] = 1.0 - total["stored"] / total["params"] if total["params"] else 0.0
    total["file_bytes"] = ckpt.file_bytes
    return {"layers": rows, "total": total}


def format_report_table(report: dict) -> str:
    lines = [f"{'layer':>5}  {'kind':<10} {'params':>10} {'stored':>10} {'nonzero':>10} "
             f"{'encoding':<8} {'dense B':>10} {'actual B':>10}"]
    for r in report["layers"]:
        lines.append(f"{r['layer']:>5}  {r['kind']:<10} {r['params']:>10,} {r['stored']:>10,} "
                     f"{r['nonzero']:>10,} {r['encoding']:<8} {r['dense_bytes']:>10,} {r['actual_bytes']:>10,}")
    t = report["total"]
    lines.append(f"{'total':>5}  {'':<10} {t['params']:>10,} {t['stored']:>10,} {t['nonzero']:>10,} "
                 f"{'':<8} {t['dense_bytes']:>10,} {t['actual_bytes']:>10,}")
    lines.append(f"parameter reduction: {100 * t['reduction']:.1f}%")
    return "\n".join(lines)


def format_report_kv(report: dict) -> str:
    lines = []
    for r in report["layers"]:
        for key in ("kind", "params", "stored", "nonzero", "encoding", "dense_bytes", "actual_bytes"):
            lines.append(f"layer.{r['layer']}.{key}={r[key]}")
    for key, value in report["total"].items():
        lines.append(f"total.{key}={value!r}" if isinstance(value, float) else f"total.{key}={value}")
    return "\n".join(lines)
