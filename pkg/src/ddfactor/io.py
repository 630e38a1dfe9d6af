"""Count tables, posterior draw archives, SVG figures and JSON-lines records.

Draw archive layout (directory):

``draws.bin``
    8-byte magic ``b"DDFDRAW\\0"``, uint32 format version, then one record
    per snapshot: uint64 payload length, payload, uint32 CRC-32 of the
    payload.  The payload is int64 iteration followed by float64 arrays
    sigma (I), Q (I*J), Y (m*J), S (J*J) and P (I*J), C order.  All
    integers are little-endian.
``manifest.json``
    Dimensions, settings, seed, package version, record count and the
    SHA-256 of ``draws.bin``.
"""
from contextlib import contextmanager
import csv
import hashlib
import json
import os
from pathlib import Path
import struct
import warnings
import zlib

import numpy as np

from .gibbs import PosteriorDraws
from .model import CountTable

FORMAT_VERSION = 1
MAGIC = b"DDFDRAW\x00"
_HEADER = struct.Struct("<8sI")
_LEN = struct.Struct("<Q")
_CRC = struct.Struct("<I")
FIELDS = ("sigma", "Q", "Y", "S", "P")


class ParseError(ValueError):
    """Malformed count table; ``line`` is 1-based."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ArchiveError(ValueError):
    pass


# ---------------------------------------------------------------------------
# count tables


def load_counts(path, drop_empty=True):
    """Read a tab-separated OTU-by-sample table.

    The header row holds sample ids after one leading cell; every other row
    is an OTU id followed by nonnegative integer counts.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    rows = [(i + 1, r) for i, r in enumerate(rows) if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError("empty table")
    _, header = rows[0]
    sample_ids = [c.strip() for c in header[1:]]
    if not sample_ids:
        raise ParseError("header has no sample columns", rows[0][0])
    seen = {}
    for s in sample_ids:
        if s in seen:
            raise ParseError(f"duplicate sample id {s!r}", rows[0][0])
        seen[s] = True
    J = len(sample_ids)
    otu_ids, data, where = [], [], {}
    for line, r in rows[1:]:
        if len(r) != J + 1:
            raise ParseError(f"expected {J + 1} fields, found {len(r)}", line)
        oid = r[0].strip()
        if oid in where:
            raise ParseError(f"duplicate OTU id {oid!r} (first on line {where[oid]})", line)
        where[oid] = line
        vals = []
        for sid, cell in zip(sample_ids, r[1:]):
            try:
                v = int(cell.strip())
            except ValueError:
                raise ParseError(f"non-integer count {cell!r} for OTU {oid!r}, "
                                 f"sample {sid!r}", line) from None
            if v < 0:
                raise ParseError(f"negative count {v} for OTU {oid!r}, sample {sid!r}", line)
            vals.append(v)
        otu_ids.append(oid)
        data.append(vals)
    if not data:
        raise ParseError("table has no OTU rows")
    counts = np.asarray(data, dtype=np.int64)
    if drop_empty:
        empty = counts.sum(axis=1) == 0
        if empty.any():
            warnings.warn(f"dropped {int(empty.sum())} all-zero OTU row(s)", UserWarning,
                          stacklevel=2)
            counts = counts[~empty]
            otu_ids = [o for o, e in zip(otu_ids, empty) if not e]
    return CountTable(counts, otu_ids, sample_ids)


def write_counts(table, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["otu_id", *table.sample_ids])
        for oid, row in zip(table.otu_ids, table.counts):
            w.writerow([oid, *map(int, row)])


# ---------------------------------------------------------------------------
# draw archive


def _shapes(I, J, m):
    return {"sigma": (I,), "Q": (I, J), "Y": (m, J), "S": (J, J), "P": (I, J)}


def _payload_size(I, J, m):
    return 8 + 8 * sum(int(np.prod(s)) for s in _shapes(I, J, m).values())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def write_json(path, obj):
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text)


class DrawWriter:
    """Append snapshots to an archive directory as they are produced.

    Every record is flushed on write, so an interrupted chain leaves a
    readable prefix.  ``close`` finalizes the manifest.
    """

    def __init__(self, directory, I, J, m, settings=None, seed=None):
        from . import __version__

        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.dims = {"I": int(I), "J": int(J), "m": int(m)}
        self.shapes = _shapes(I, J, m)
        self.manifest = {
            "format": "ddfactor-draws", "version": FORMAT_VERSION,
            "package_version": __version__, "dims": self.dims,
            "fields": list(FIELDS), "settings": settings or {}, "seed": seed,
            "n_records": 0, "complete": False, "sha256": None,
        }
        self._fh = (self.dir / "draws.bin").open("wb")
        self._fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION))
        self._fh.flush()
        write_json(self.dir / "manifest.json", self.manifest)

    def write(self, iteration, snap):
        parts = [struct.pack("<q", int(iteration))]
        for name in FIELDS:
            arr = np.ascontiguousarray(snap[name], dtype="<f8")
            if arr.shape != self.shapes[name]:
                raise ArchiveError(f"{name} has shape {arr.shape}, expected "
                                   f"{self.shapes[name]}")
            parts.append(arr.tobytes())
        payload = b"".join(parts)
        self._fh.write(_LEN.pack(len(payload)) + payload + _CRC.pack(zlib.crc32(payload)))
        self._fh.flush()
        self.manifest["n_records"] += 1

    __call__ = write

    def close(self):
        if self._fh.closed:
            return self.manifest
        self._fh.close()
        digest = hashlib.sha256((self.dir / "draws.bin").read_bytes()).hexdigest()
        self.manifest.update(complete=True, sha256=digest)
        write_json(self.dir / "manifest.json", self.manifest)
        return self.manifest

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def save_draws(draws, directory, settings=None, seed=None):
    """Write a PosteriorDraws to ``directory``; returns the manifest."""
    I, J = draws.P.shape[1:]
    m = draws.Y.shape[1]
    meta = dict(draws.meta)
    with DrawWriter(directory, I, J, m, settings if settings is not None else meta,
                    seed if seed is not None else meta.get("seed")) as w:
        for k in range(len(draws)):
            w.write(draws.iterations[k], draws.snapshot(k))
    return w.manifest


def read_manifest(directory):
    path = Path(directory) / "manifest.json"
    try:
        man = json.loads(path.read_text())
    except FileNotFoundError:
        raise ArchiveError(f"no manifest in {directory}") from None
    if man.get("version") != FORMAT_VERSION:
        raise ArchiveError(f"archive format version {man.get('version')} is not "
                           f"supported (expected {FORMAT_VERSION})")
    return man


def iter_draws(directory):
    """Yield ``(iteration, snapshot)`` for every complete record.

    Stops quietly at a truncated or corrupt tail; check ``read_manifest``
    or use :func:`load_draws` to learn about truncation.
    """
    for item in _iter_records(directory):
        if item is None:
            return
        yield item


def _iter_records(directory):
    man = read_manifest(directory)
    d = man["dims"]
    shapes = _shapes(d["I"], d["J"], d["m"])
    size = _payload_size(d["I"], d["J"], d["m"])
    with (Path(directory) / "draws.bin").open("rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            yield None
            return
        magic, version = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ArchiveError("draws.bin is not a draw archive")
        if version != FORMAT_VERSION:
            raise ArchiveError(f"draws.bin format version {version} is not supported")
        while True:
            raw = fh.read(_LEN.size)
            if not raw:
                return
            if len(raw) < _LEN.size:
                yield None
                return
            (n,) = _LEN.unpack(raw)
            if n != size:
                # could be a torn length field; only a full record proves a mismatch
                body = fh.read(n + _CRC.size) if n < 1 << 40 else b""
                if len(body) == n + _CRC.size and _CRC.unpack(body[-4:])[0] == zlib.crc32(body[:-4]):
                    raise ArchiveError(f"record of {n} bytes does not match manifest "
                                       f"dimensions {d} ({size} bytes)")
                yield None
                return
            body = fh.read(n + _CRC.size)
            if len(body) < n + _CRC.size:
                yield None
                return
            payload = body[:n]
            if _CRC.unpack(body[n:])[0] != zlib.crc32(payload):
                yield None
                return
            it = struct.unpack_from("<q", payload, 0)[0]
            off = 8
            snap = {}
            for name in FIELDS:
                count = int(np.prod(shapes[name]))
                snap[name] = np.frombuffer(payload, "<f8", count, off).reshape(shapes[name]).astype(float)
                off += 8 * count
            yield it, snap


def load_draws(directory, max_draws=None):
    """Read an archive into memory.

    A truncated tail is dropped with a warning and ``meta["truncated"]``
    set; ``max_draws`` keeps an evenly spaced subsample.
    """
    man = read_manifest(directory)
    d = man["dims"]
    snaps, its = [], []
    truncated = False
    for item in _iter_records(directory):
        if item is None:
            truncated = True
            break
        its.append(item[0])
        snaps.append(item[1])
    if not truncated and man.get("complete") and len(snaps) != man.get("n_records"):
        truncated = True
    if truncated:
        warnings.warn(f"draw archive {directory} is truncated; loaded {len(snaps)} "
                      "complete record(s)", RuntimeWarning, stacklevel=2)
    if max_draws is not None and len(snaps) > max_draws:
        keep = np.unique(np.linspace(0, len(snaps) - 1, max_draws).round().astype(int))
        snaps = [snaps[k] for k in keep]
        its = [its[k] for k in keep]
    meta = dict(man.get("settings") or {})
    meta.update(truncated=truncated, manifest=man)
    if snaps:
        return PosteriorDraws.from_snapshots(snaps, its, meta)
    return PosteriorDraws.empty(d["I"], d["J"], d["m"], meta)


def export_csv(draws, directory, field_name="P"):
    """One CSV row per draw with the flattened field, prefixed by iteration."""
    arr = getattr(draws, field_name)
    path = Path(directory) / f"{field_name}.csv"
    flat = arr.reshape(arr.shape[0], -1)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for it, row in zip(draws.iterations, flat):
            w.writerow([int(it), *(repr(float(v)) for v in row)])
    return path


# ---------------------------------------------------------------------------
# records, locks


def write_records(path, records):
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")


def read_records(path):
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


@contextmanager
def output_lock(directory):
    """Exclusive lock on an output directory via an ``O_EXCL`` lockfile."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"{directory} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# SVG

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
           "#e377c2", "#17becf", "#bcbd22", "#7f7f7f")


def _fmt(v):
    s = f"{v:.3f}"
    return "0.000" if s == "-0.000" else s


def _esc(text):
    return (str(text).replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;").replace('"', "&quot;"))


def render_ordination_svg(cloud, space, labels, pair=(0, 1), level=0.95,
                          size=640, margin=60, point_radius=1.5):
    """SVG text for one pair of consensus axes.

    One ``<circle>`` per projected draw, one ``<polygon>`` per credible-region
    piece and axis titles carrying each axis' share of the trace.
    """
    a, b = pair
    pts = cloud.points[:, :, [a, b]]
    K, J, _ = pts.shape
    if len(labels) != J:
        raise ValueError(f"{len(labels)} labels for {J} samples")
    regions = cloud.regions(level, pair)
    allxy = [pts.reshape(-1, 2)] + [p for reg in regions for p in reg]
    allxy = np.concatenate(allxy)
    lo, hi = allxy.min(axis=0), allxy.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    inner = size - 2 * margin

    def tx(xy):
        u = (xy - lo) / span
        return margin + u[..., 0] * inner, size - margin - u[..., 1] * inner

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
           f'<rect x="{margin}" y="{margin}" width="{inner}" height="{inner}" '
           'fill="none" stroke="black" stroke-width="1"/>']
    for j in range(J):
        color = PALETTE[j % len(PALETTE)]
        out.append(f'<g id="sample-{j}" fill="{color}" stroke="{color}">')
        for poly in regions[j]:
            x, y = tx(poly)
            coords = " ".join(f"{_fmt(u)},{_fmt(v)}" for u, v in zip(x, y))
            out.append(f'<polygon points="{coords}" fill-opacity="0.15" stroke-width="1"/>')
        x, y = tx(pts[:, j])
        for u, v in zip(x, y):
            out.append(f'<circle cx="{_fmt(u)}" cy="{_fmt(v)}" r="{point_radius}" '
                       'stroke="none" fill-opacity="0.5"/>')
        cx, cy = tx(pts[:, j].mean(axis=0))
        out.append(f'<text x="{_fmt(cx)}" y="{_fmt(cy)}" font-size="10" '
                   f'stroke="none">{_esc(labels[j])}</text>')
        out.append("</g>")
    ra, rb = 100 * space.variance_ratios[a], 100 * space.variance_ratios[b]
    out.append(f'<text x="{size / 2:.1f}" y="{size - margin / 3:.1f}" text-anchor="middle" '
               f'font-size="14">Axis {a + 1} ({ra:.1f}%)</text>')
    out.append(f'<text x="{margin / 3:.1f}" y="{size / 2:.1f}" text-anchor="middle" '
               f'font-size="14" transform="rotate(-90 {margin / 3:.1f} {size / 2:.1f})">'
               f'Axis {b + 1} ({rb:.1f}%)</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_ordination_figure(cloud, space, labels, path, pair=(0, 1), level=0.95):
    if space.d < 2:
        raise ValueError("an ordination figure needs at least two axes")
    text = render_ordination_svg(cloud, space, labels, pair, level)
    Path(path).write_text(text)
    return Path(path)
