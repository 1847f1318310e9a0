"""Readers and writers for images, label maps, soft maps and manifests.

Formats:

* images and label maps: binary PGM (``P5``), maxval 255
* soft maps: ASCII header ``SSEG 1 <H> <W> <L>\\n`` followed by H*W*L
  little-endian float32, row-major pixels with the label index innermost
* manifests: tab-separated ``image  labels  split  volume_id  slice_index``
  with paths relative to the manifest's directory

Readers validate everything before returning, so a malformed file never
yields a partial result.
"""

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hseg.errors import FormatError

NUM_LABELS = 4
SPLITS = ("train", "test")


# ---------------------------------------------------------------------------
# PGM


def _parse_pgm(buf, path):
    if buf[:2] != b"P5":
        raise FormatError(f"expected binary PGM magic 'P5', found {bytes(buf[:2])!r}", offset=0, path=path)
    pos = 2
    fields = []
    while len(fields) < 3:
        # whitespace and comments between header tokens
        while pos < len(buf) and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                end = buf.find(b"\n", pos)
                pos = len(buf) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed PGM header", offset=pos, path=path)
        fields.append((int(buf[start:pos]), start))
    (width, _), (height, _), (maxval, maxval_at) = fields
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("PGM header must end with a single whitespace byte", offset=pos, path=path)
    pos += 1
    if width <= 0 or height <= 0:
        raise FormatError(f"invalid PGM size {width}x{height}", offset=fields[0][1], path=path)
    if maxval != 255:
        raise FormatError(f"PGM maxval must be 255, got {maxval}", offset=maxval_at, path=path)
    need = width * height
    have = len(buf) - pos
    if have < need:
        raise FormatError(f"truncated PGM payload: expected {need} bytes, got {have}",
                          offset=len(buf), path=path)
    if have > need:
        raise FormatError(f"{have - need} trailing bytes after PGM payload", offset=pos + need, path=path)
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(height, width), pos


def encode_pgm(pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes()


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def _write(path, data):
    with open(path, "wb") as fh:
        fh.write(data)


def read_image(path):
    """Grayscale image as float32 in [0, 1] (byte / 255)."""
    raw, _ = _parse_pgm(_read(path), path)
    return raw.astype(np.float32) / np.float32(255.0)


def image_to_bytes(image):
    """Quantise [0, 1] floats to bytes with round-half-up."""
    v = np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def write_image(path, image):
    _write(path, encode_pgm(image_to_bytes(image)))


def read_labels(path):
    raw, offset = _parse_pgm(_read(path), path)
    bad = np.flatnonzero(raw.reshape(-1) >= NUM_LABELS)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"label value {int(raw.reshape(-1)[i])} at pixel index {i} "
                          f"(row {i // raw.shape[1]}, col {i % raw.shape[1]}) is not a class in 0..3",
                          offset=offset + i, path=path)
    return raw.copy()


def write_labels(path, labels):
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= NUM_LABELS:
        raise ValueError("label maps may only contain classes 0..3")
    _write(path, encode_pgm(labels.astype(np.uint8)))


# ---------------------------------------------------------------------------
# soft maps


def encode_softmap(soft):
    """``[L, H, W]`` probabilities -> SSEG v1 bytes."""
    soft = np.asarray(soft, dtype="<f4")
    if soft.ndim != 3:
        raise ValueError(f"soft map must be [L, H, W], got shape {soft.shape}")
    n_labels, h, w = soft.shape
    header = f"SSEG 1 {h} {w} {n_labels}\n".encode("ascii")
    return header + np.ascontiguousarray(soft.transpose(1, 2, 0)).tobytes()


def decode_softmap(buf, path=None, validate=False):
    nl = buf.find(b"\n")
    if nl < 0:
        raise FormatError("missing SSEG header line", offset=0, path=path)
    try:
        tokens = buf[:nl].decode("ascii").split(" ")
    except UnicodeDecodeError:
        raise FormatError("SSEG header is not ASCII", offset=0, path=path) from None
    if len(tokens) != 5 or tokens[0] != "SSEG":
        raise FormatError(f"bad SSEG header {buf[:nl]!r}", offset=0, path=path)
    if tokens[1] != "1":
        raise FormatError(f"unsupported SSEG version {tokens[1]!r}", offset=5, path=path)
    try:
        h, w, n_labels = (int(t) for t in tokens[2:])
    except ValueError:
        raise FormatError(f"non-integer SSEG dimensions in {buf[:nl]!r}", offset=7, path=path) from None
    if min(h, w, n_labels) <= 0:
        raise FormatError(f"SSEG dimensions must be positive, got {h}x{w}x{n_labels}", offset=7, path=path)
    start = nl + 1
    expected = 4 * h * w * n_labels
    actual = len(buf) - start
    if actual != expected:
        raise FormatError(f"SSEG payload size mismatch: expected {expected} bytes, got {actual}",
                          offset=start, path=path)
    soft = np.frombuffer(buf, dtype="<f4", offset=start).reshape(h, w, n_labels)
    soft = np.ascontiguousarray(soft.transpose(2, 0, 1)).astype(np.float32)
    if validate:
        check_distribution(soft, path=path)
    return soft


def check_distribution(soft, tol=1e-5, path=None):
    sums = soft.sum(axis=0, dtype=np.float64)
    if np.any(soft < 0) or np.any(soft > 1) or np.any(np.abs(sums - 1.0) > tol):
        worst = int(np.argmax(np.abs(sums - 1.0)))
        raise FormatError(f"soft map is not a per-pixel distribution (worst pixel {worst}, "
                          f"sum {sums.reshape(-1)[worst]:.7f})", path=path)


def read_softmap(path, validate=False):
    return decode_softmap(_read(path), path=path, validate=validate)


def write_softmap(path, soft):
    _write(path, encode_softmap(soft))


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class Record:
    image: Path
    labels: Path
    split: str
    volume_id: str
    slice_index: int

    @property
    def name(self):
        return self.image.name


class Manifest:
    """Ordered dataset records, sorted by (volume_id, slice_index)."""

    def __init__(self, records, root=None):
        self.root = Path(root) if root is not None else None
        seen = set()
        for r in records:
            if r.split not in SPLITS:
                raise FormatError(f"unknown split {r.split!r} for {r.image}")
            key = (r.volume_id, r.slice_index)
            if key in seen:
                raise FormatError(f"duplicate (volume, slice) pair {key}")
            seen.add(key)
        self.records = sorted(records, key=lambda r: (r.volume_id, r.slice_index))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def volumes(self, split=None):
        out = {}
        for r in self.records:
            if split is None or r.split == split:
                out.setdefault(r.volume_id, []).append(r)
        return out

    def load(self, split=None):
        """Images ``[n, H, W]`` float32 and labels ``[n, H, W]`` uint8."""
        recs = self.records if split is None else self.split(split)
        if not recs:
            return np.zeros((0, 0, 0), np.float32), np.zeros((0, 0, 0), np.uint8)
        return (np.stack([read_image(r.image) for r in recs]),
                np.stack([read_labels(r.labels) for r in recs]))

    def write(self, path):
        path = Path(path)
        base = path.parent
        lines = []
        for r in self.records:
            lines.append("\t".join([
                os.path.relpath(r.image, base), os.path.relpath(r.labels, base),
                r.split, r.volume_id, str(r.slice_index)]))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path, check_files=True):
    path = Path(path)
    base = path.parent
    records = []
    text = path.read_bytes()
    offset = 0
    for lineno, line in enumerate(text.split(b"\n"), start=1):
        raw = line
        offset_line = offset
        offset += len(raw) + 1
        line = line.decode("utf-8").rstrip("\r")
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            raise FormatError(f"manifest line {lineno}: expected 5 tab-separated fields, got {len(cols)}",
                              offset=offset_line, path=path)
        image, labels, split, volume_id, slice_index = cols
        try:
            idx = int(slice_index)
        except ValueError:
            raise FormatError(f"manifest line {lineno}: slice index {slice_index!r} is not an integer",
                              offset=offset_line, path=path) from None
        rec = Record(base / image, base / labels, split, volume_id, idx)
        if check_files:
            for p in (rec.image, rec.labels):
                if not p.is_file():
                    raise FormatError(f"manifest line {lineno}: missing file {p}", offset=offset_line, path=path)
        records.append(rec)
    try:
        manifest = Manifest(records, root=base)
    except FormatError as exc:
        raise FormatError(f"{exc}", path=path) from None
    if check_files:
        _check_volume_dims(manifest, path)
    return manifest


def _check_volume_dims(manifest, path):
    for vol, recs in manifest.volumes().items():
        shapes = set()
        for r in recs:
            for p in (r.image, r.labels):
                shapes.add(_pgm_shape(p))
        if len(shapes) != 1:
            raise FormatError(f"volume {vol} mixes slice sizes {sorted(shapes)}", path=path)


def _pgm_shape(path):
    raw, _ = _parse_pgm(_read(path), path)
    return raw.shape
