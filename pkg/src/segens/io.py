"""Binary containers, label maps, flows, manifests and report writers.

All binary formats are little-endian.  Sample container layout::

    magic "SEGU" | version u16 | Q u32 | P u32 | c u16 | c_total u16 | h u32 | w u32
    Q x ( kind u8 | factor f32 | k u8 | L: P*c_total f32 | M: P*h'*w' f32 )

``kind`` is a bit set (1 = hflip, 2 = scale, 4 = prior frame, 0 = identity).
``h, w`` is the reference frame; a scaled sample's mask is
``round(h * factor) x round(w * factor)``.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .align import scaled_shape
from .errors import BadMagic, BadVersion, DuplicateId, MissingFile, ParseError, ShapeMismatch, Truncated
from .types import FlowField, SampleTensor, Transform, make_sample

log = logging.getLogger(__name__)

SAMPLE_MAGIC = b"SEGU"
SEMANTIC_MAGIC = b"SEGL"
PANOPTIC_MAGIC = b"SEGP"
FLOW_MAGIC = b"SEGF"
VERSION = 1

_HEADER = struct.Struct("<4sHIIHHII")
_DESCRIPTOR = struct.Struct("<BfB")
_MAP_HEADER = struct.Struct("<4sII")

KIND_HFLIP = 1
KIND_SCALE = 2
KIND_PRIOR = 4

F32 = np.dtype("<f4")


def encode_transform(t: Transform) -> bytes:
    kind = (KIND_HFLIP if t.hflip else 0) | (KIND_SCALE if t.scale != 1.0 else 0) | (KIND_PRIOR if t.frame else 0)
    return _DESCRIPTOR.pack(kind, t.scale, t.frame)


def decode_transform(raw: bytes) -> Transform:
    kind, factor, k = _DESCRIPTOR.unpack(raw)
    return Transform(
        hflip=bool(kind & KIND_HFLIP),
        scale=round(float(factor), 6) if kind & KIND_SCALE else 1.0,
        frame=int(k) if kind & KIND_PRIOR else 0,
    )


@dataclass(frozen=True)
class ContainerHeader:
    count: int
    n_queries: int
    n_classes: int
    c_total: int
    height: int
    width: int

    @property
    def frame(self) -> Tuple[int, int]:
        return self.height, self.width

    def mask_shape(self, t: Transform) -> Tuple[int, int]:
        return scaled_shape(self.frame, t.scale) if t.scale != 1.0 else self.frame

    def record_size(self, t: Transform) -> int:
        h, w = self.mask_shape(t)
        return _DESCRIPTOR.size + 4 * self.n_queries * (self.c_total + h * w)


def write_samples(path, samples: Sequence[SampleTensor], frame: Optional[Tuple[int, int]] = None) -> None:
    """Write samples to a container.  ``frame`` defaults to the shape of the
    first unscaled sample."""
    samples = list(samples)
    if not samples:
        raise ShapeMismatch("cannot write an empty container")
    first = samples[0]
    if frame is None:
        frame = next((s.shape for s in samples if s.transform.scale == 1.0), None)
        if frame is None:
            raise ShapeMismatch("no unscaled sample to take the reference frame from; pass frame=")
    header = ContainerHeader(len(samples), first.n_queries, first.n_classes, first.c_total, *frame)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(SAMPLE_MAGIC, VERSION, header.count, header.n_queries, header.n_classes,
                             header.c_total, header.height, header.width))
        for s in samples:
            if s.logits.shape != (header.n_queries, header.c_total):
                raise ShapeMismatch(f"logits {s.logits.shape} differ from container {(header.n_queries, header.c_total)}")
            if s.shape != header.mask_shape(s.transform):
                raise ShapeMismatch(f"{s.transform.kind} mask {s.shape} should be {header.mask_shape(s.transform)}")
            f.write(encode_transform(s.transform))
            f.write(np.ascontiguousarray(s.logits, dtype=F32).tobytes())
            f.write(np.ascontiguousarray(s.masks, dtype=F32).tobytes())


class SampleReader:
    """Streaming reader: samples are loaded one at a time on request.

    Usable as a context manager and as a sample source for
    :func:`segens.align.build_aligned_ensemble`.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._f = open(self.path, "rb")
        try:
            self.header = self._read_header()
            self._index = self._scan()
        except Exception:
            self._f.close()
            raise

    def _read_exact(self, n: int, offset: int) -> bytes:
        self._f.seek(offset)
        raw = self._f.read(n)
        if len(raw) != n:
            raise Truncated(self.path, offset + len(raw))
        return raw

    def _read_header(self) -> ContainerHeader:
        raw = self._f.read(_HEADER.size)
        if len(raw) >= 4 and raw[:4] != SAMPLE_MAGIC:
            raise BadMagic(f"{self.path}: bad magic {raw[:4]!r}")
        if len(raw) < _HEADER.size:
            raise Truncated(self.path, len(raw))
        magic, version, q, p, c, c_total, h, w = _HEADER.unpack(raw)
        if version != VERSION:
            raise BadVersion(f"{self.path}: version {version}, expected {VERSION}")
        if c_total != c + 1:
            raise ShapeMismatch(f"{self.path}: c_total={c_total} but c={c}")
        return ContainerHeader(q, p, c, c_total, h, w)

    def _scan(self):
        index = []
        seen = {}
        offset = _HEADER.size
        for _ in range(self.header.count):
            t = decode_transform(self._read_exact(_DESCRIPTOR.size, offset))
            member = seen.get(t, 0)
            seen[t] = member + 1
            index.append((t, member, offset))
            offset += self.header.record_size(t)
        self._f.seek(0, 2)
        end = self._f.tell()
        if end < offset:
            raise Truncated(self.path, end)
        return index

    @property
    def frame(self) -> Tuple[int, int]:
        return self.header.frame

    @property
    def c_total(self) -> int:
        return self.header.c_total

    def __len__(self) -> int:
        return len(self._index)

    def entries(self) -> List[Tuple[Transform, int]]:
        return [(t, m) for t, m, _ in self._index]

    def load(self, i: int) -> SampleTensor:
        t, _, offset = self._index[i]
        hd = self.header
        h, w = hd.mask_shape(t)
        n_l = hd.n_queries * hd.c_total
        raw = self._read_exact(hd.record_size(t), offset)
        body = np.frombuffer(raw, dtype=F32, offset=_DESCRIPTOR.size)
        logits = body[:n_l].reshape(hd.n_queries, hd.c_total)
        masks = body[n_l:].reshape(hd.n_queries, h, w)
        return make_sample(logits, masks, t, c_total=hd.c_total)

    def __iter__(self) -> Iterator[SampleTensor]:
        for i in range(len(self)):
            yield self.load(i)

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_samples(path) -> List[SampleTensor]:
    with SampleReader(path) as r:
        return list(r)


def read_header(path) -> ContainerHeader:
    with SampleReader(path) as r:
        return r.header


# -- label maps and flows ---------------------------------------------------

def _write_map(path, magic: bytes, arr: np.ndarray, dtype: str, extra: bytes = b""):
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(_MAP_HEADER.pack(magic, h, w))
        f.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes())
        f.write(extra)


def _read_map(path, magic: bytes, expected_shape=None):
    raw = Path(path).read_bytes()
    if len(raw) >= 4 and raw[:4] != magic:
        raise BadMagic(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    if len(raw) < _MAP_HEADER.size:
        raise Truncated(path, len(raw))
    _, h, w = _MAP_HEADER.unpack_from(raw)
    if expected_shape is not None and (h, w) != tuple(expected_shape):
        raise ShapeMismatch(f"{path}: map is {(h, w)}, expected {tuple(expected_shape)}")
    return raw, h, w


def _payload(path, raw: bytes, start: int, nbytes: int) -> bytes:
    if len(raw) < start + nbytes:
        raise Truncated(path, len(raw))
    return raw[start:start + nbytes]


def write_semantic(path, label_map: np.ndarray) -> None:
    _write_map(path, SEMANTIC_MAGIC, label_map, "<u2")


def read_semantic(path, expected_shape=None) -> np.ndarray:
    raw, h, w = _read_map(path, SEMANTIC_MAGIC, expected_shape)
    data = _payload(path, raw, _MAP_HEADER.size, 2 * h * w)
    return np.frombuffer(data, dtype="<u2").reshape(h, w).astype(np.uint16)


def write_panoptic(path, label_map: np.ndarray) -> None:
    _write_map(path, PANOPTIC_MAGIC, label_map, "<u4")


def read_panoptic(path, expected_shape=None) -> np.ndarray:
    raw, h, w = _read_map(path, PANOPTIC_MAGIC, expected_shape)
    data = _payload(path, raw, _MAP_HEADER.size, 4 * h * w)
    return np.frombuffer(data, dtype="<u4").reshape(h, w).astype(np.uint32)


def write_flow(path, flow: FlowField) -> None:
    _write_map(path, FLOW_MAGIC, flow.flow, "<f4", np.ascontiguousarray(flow.valid, dtype=np.uint8).tobytes())


def read_flow(path, expected_shape=None) -> FlowField:
    raw, h, w = _read_map(path, FLOW_MAGIC, expected_shape)
    n = h * w
    vec = np.frombuffer(_payload(path, raw, _MAP_HEADER.size, 8 * n), dtype="<f4").reshape(h, w, 2)
    valid = np.frombuffer(_payload(path, raw, _MAP_HEADER.size + 8 * n, n), dtype=np.uint8).reshape(h, w)
    return FlowField(vec.astype(np.float32), valid.astype(bool))


# -- manifest ---------------------------------------------------------------

@dataclass(frozen=True)
class Record:
    id: str
    samples: Path
    gt_semantic: Path
    gt_panoptic: Path
    flows: Tuple[Path, ...] = ()
    is_ood: bool = False
    pair_id: Optional[str] = None

    def to_json(self, root: Path) -> dict:
        rel = lambda p: Path(p).relative_to(root).as_posix()  # noqa: E731
        return {"id": self.id, "samples": rel(self.samples), "gt_semantic": rel(self.gt_semantic),
                "gt_panoptic": rel(self.gt_panoptic), "flows": [rel(p) for p in self.flows],
                "is_ood": self.is_ood, "pair_id": self.pair_id}


@dataclass
class Manifest:
    path: Path
    records: List[Record] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def root(self) -> Path:
        return self.path.parent


REQUIRED_KEYS = ("id", "samples", "gt_semantic", "gt_panoptic")


def read_manifest(path, check_files: bool = True) -> Manifest:
    """Parse and validate a JSON Lines manifest.

    Paths are relative to the manifest's directory.  Every referenced file is
    checked before any record is returned.  OOD records without a ``pair_id``
    are accepted and counted in ``warnings``.
    """
    path = Path(path)
    root = path.parent
    manifest = Manifest(path)
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, exc.msg) from None
            if not isinstance(obj, dict):
                raise ParseError(path, lineno, "record is not an object")
            missing = [k for k in REQUIRED_KEYS if k not in obj]
            if missing:
                raise ParseError(path, lineno, f"missing keys {missing}")
            rid = str(obj["id"])
            if rid in seen:
                raise DuplicateId(f"{path}:{lineno}: duplicate id {rid!r}")
            seen.add(rid)
            flows = obj.get("flows") or []
            if not isinstance(flows, list):
                raise ParseError(path, lineno, "flows must be a list")
            rec = Record(rid, root / obj["samples"], root / obj["gt_semantic"], root / obj["gt_panoptic"],
                         tuple(root / p for p in flows), bool(obj.get("is_ood", False)), obj.get("pair_id"))
            if rec.is_ood and rec.pair_id is None:
                manifest.warnings.append(f"line {lineno}: OOD record {rid!r} has no pair_id")
            manifest.records.append(rec)
    if check_files:
        absent = [str(p) for r in manifest.records
                  for p in (r.samples, r.gt_semantic, r.gt_panoptic, *r.flows) if not p.is_file()]
        if absent:
            raise MissingFile(f"{len(absent)} missing file(s), first: {absent[0]}")
    for w in manifest.warnings:
        log.warning(w)
    return manifest


def write_manifest(path, records: Iterable[Record]) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(json.dumps(r.to_json(path.parent), sort_keys=True) + "\n")


# -- reports ----------------------------------------------------------------

def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        out = csv.writer(f)  # RFC-4180: CRLF rows, minimal quoting
        out.writerow(header)
        for row in rows:
            out.writerow(["" if v is None else _fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(obj, f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")
