"""Flow-file ingestion, tensor bundles, model documents and report tables.

File formats
------------
Edge list
    Delimited text (comma or tab) with a header row. The schema names the
    origin, destination, period and count columns. A configurable token
    (default ``d``) marks suppressed counts; empty / ``NA`` counts are
    missing. Both kinds of row are dropped and counted, as are self-flows.
Tensor bundle
    A zip archive holding ``meta.json`` (ids, period labels, mask kind,
    ingest counters) and ``tensor.npy``. Entry timestamps are fixed so equal
    inputs give byte-identical files.
Model document
    JSON, ``{"format": "migsys-model", "version": 1, ...}`` with dims, rank,
    weights, factor matrices stored column by column, node ids and period
    labels.
Report tables
    ``members.csv``: system, side, position, node_id, membership; sorted by
    system, side (origin first), position.
    ``profiles.csv``: system, period, intensity, shock; sorted by system then
    period order.
    ``association_<system>.csv``: top-k origins (rows) x top-k destinations.
    Partition tables: node_id, community; in registry order.
"""

from __future__ import annotations

import csv
import io
import json
import zipfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .tensor import FactorModel, MaskSpec

MODEL_FORMAT = "migsys-model"
MODEL_VERSION = 1
BUNDLE_FORMAT = "migsys-tensor-bundle"
BUNDLE_VERSION = 1

_MISSING = {"", "na", "nan", "null", "none"}
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class FlowRecord:
    origin: str
    destination: str
    period: str
    count: float


@dataclass
class Schema:
    origin: str = "origin"
    destination: str = "destination"
    period: str = "period"
    count: str = "count"
    delimiter: str | None = None      # None: tab if the header has one, else comma
    suppressed_token: str = "d"
    count_kind: str = "integer"       # or "real"

    def __post_init__(self):
        if self.count_kind not in ("integer", "real"):
            raise ValueError("count_kind must be 'integer' or 'real'")

    @property
    def columns(self):
        return [self.origin, self.destination, self.period, self.count]


@dataclass
class EdgeList:
    records: list = field(default_factory=list)
    rows_read: int = 0
    self_flows: int = 0
    suppressed: int = 0
    missing: int = 0
    # Every period label read, kept or not, so a fully suppressed period
    # still gets its slot on the axis.
    period_labels: set = field(default_factory=set)

    def period_axis(self) -> "PeriodAxis":
        return PeriodAxis(sorted(self.period_labels, key=_label_key))

    def counters(self) -> dict:
        return {
            "rows_read": self.rows_read,
            "records": len(self.records),
            "self_flows_dropped": self.self_flows,
            "suppressed_dropped": self.suppressed,
            "missing_dropped": self.missing,
        }


class NodeRegistry:
    """Bijection between external location ids and dense indices."""

    def __init__(self, ids):
        self.ids = [str(i) for i in ids]
        self.index = {n: k for k, n in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            dup = [n for n, c in Counter(self.ids).items() if c > 1]
            raise ValueError(f"duplicate node ids: {dup[:10]}")

    @classmethod
    def from_records(cls, records) -> "NodeRegistry":
        seen = set()
        for r in records:
            seen.add(r.origin)
            seen.add(r.destination)
        return cls(sorted(seen))

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, node_id) -> int:
        return self.index[node_id]

    def __contains__(self, node_id):
        return node_id in self.index

    def __eq__(self, other):
        return isinstance(other, NodeRegistry) and self.ids == other.ids

    def __repr__(self):
        return f"NodeRegistry({len(self.ids)} ids)"


def _label_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


class PeriodAxis:
    """Ordered period labels; numeric labels compare numerically."""

    def __init__(self, labels):
        self.labels = [str(p) for p in labels]
        keys = [_label_key(p) for p in self.labels]
        if any(b <= a for a, b in zip(keys, keys[1:])):
            raise ValueError(f"period labels must be strictly increasing: {self.labels}")
        self.index = {p: k for k, p in enumerate(self.labels)}

    @classmethod
    def from_records(cls, records) -> "PeriodAxis":
        return cls(sorted({r.period for r in records}, key=_label_key))

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def __eq__(self, other):
        return isinstance(other, PeriodAxis) and self.labels == other.labels

    def __repr__(self):
        return f"PeriodAxis({self.labels})"

    def position(self, label) -> int:
        label = str(label)
        if label not in self.index:
            raise ValueError(f"period {label!r} not on the axis")
        return self.index[label]


def _parse_count(raw, kind, lineno):
    text = raw.strip()
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"line {lineno}: unparseable count {raw!r}") from None
    if not np.isfinite(value) or value < 0:
        raise DataError(f"line {lineno}: count must be finite and >= 0, got {raw!r}")
    if kind == "integer":
        if value != int(value):
            raise DataError(f"line {lineno}: expected an integer count, got {raw!r}")
        return int(value)
    return value


def load_edge_list(path, schema: Schema | None = None) -> EdgeList:
    """Parse a delimited flow file into records plus drop counters."""
    schema = schema or Schema()
    out = EdgeList()
    with open(path, newline="", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.strip():
            return out
        delim = schema.delimiter or ("\t" if "\t" in header else ",")
        names = [h.strip() for h in next(csv.reader([header], delimiter=delim))]
        unknown = [c for c in schema.columns if c not in names]
        if unknown:
            raise ValueError(f"schema columns not in header: {unknown} (header: {names})")
        pos = [names.index(c) for c in schema.columns]
        token = schema.suppressed_token.strip().lower()
        for lineno, row in enumerate(csv.reader(fh, delimiter=delim), start=2):
            if not row or all(not c.strip() for c in row):
                continue
            out.rows_read += 1
            if len(row) < len(names):
                raise DataError(f"line {lineno}: expected {len(names)} fields, got {len(row)}")
            o, d, p, c = (row[k].strip() for k in pos)
            if not o or not d or not p:
                raise DataError(f"line {lineno}: empty origin, destination or period")
            out.period_labels.add(p)
            low = c.lower()
            if token and low == token:
                out.suppressed += 1
                continue
            if low in _MISSING:
                out.missing += 1
                continue
            count = _parse_count(c, schema.count_kind, lineno)
            if o == d:
                out.self_flows += 1
                continue
            out.records.append(FlowRecord(o, d, p, count))
    return out


def build_tensor(records, registry: NodeRegistry | None = None,
                 periods: PeriodAxis | None = None):
    """Sum records into an origin x destination x period tensor.

    Without a registry the ids seen are sorted into a new one; with one, any
    id outside it is an error. Returns (X, diagonal-off mask, registry,
    periods).
    """
    records = list(records)
    if registry is None:
        registry = NodeRegistry.from_records(records)
    else:
        bad = sorted({n for r in records for n in (r.origin, r.destination) if n not in registry})
        if bad:
            raise DataError(f"{len(bad)} ids outside the node universe: {bad[:20]}")
    if periods is None:
        periods = PeriodAxis.from_records(records)
    else:
        bad = sorted({r.period for r in records if r.period not in periods.index})
        if bad:
            raise DataError(f"periods not on the axis: {bad[:20]}")
    n, K = len(registry), len(periods)
    if n == 0 or K == 0:
        raise DataError("no records to build a tensor from")
    cells = Counter()
    for r in records:
        cells[(registry[r.origin], registry[r.destination], periods.index[r.period])] += r.count
    X = np.zeros((n, n, K))
    for (i, j, k), v in sorted(cells.items()):
        X[i, j, k] = v
    return X, MaskSpec.diagonal_off(X.shape), registry, periods


def tensor_records(X, registry: NodeRegistry, periods: PeriodAxis, include_diagonal=False):
    """Nonzero cells of ``X`` back as records, in (i, j, k) order."""
    out = []
    for i, j, k in zip(*np.nonzero(X)):
        if i == j and not include_diagonal:
            continue
        v = X[i, j, k]
        v = int(v) if float(v).is_integer() else float(v)
        out.append(FlowRecord(registry.ids[i], registry.ids[j], periods.labels[k], v))
    return out


def aggregate_window(X, periods: PeriodAxis, period_range) -> np.ndarray:
    """Sum of the slabs whose labels lie in ``period_range`` = (first, last),
    both inclusive, with the diagonal zeroed."""
    first, last = period_range
    lo, hi = periods.position(first), periods.position(last)
    if hi < lo:
        raise ValueError(f"empty period range {first!r}..{last!r}")
    W = np.asarray(X)[:, :, lo:hi + 1].sum(axis=2)
    n = min(W.shape)
    W[np.arange(n), np.arange(n)] = 0.0
    return W


# -- tensor bundles ---------------------------------------------------------

def _zip_write(zf, name, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_bundle(path, X, registry: NodeRegistry, periods: PeriodAxis, mask: MaskSpec,
                counters: dict | None = None, extra: dict | None = None):
    meta = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "dims": list(X.shape),
        "node_ids": registry.ids,
        "periods": periods.labels,
        "mask": mask.kind,
        "counters": counters or {},
    }
    if extra:
        meta.update(extra)
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(X, dtype=float), allow_pickle=False)
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, indent=1, sort_keys=True).encode())
        _zip_write(zf, "tensor.npy", buf.getvalue())
        if mask.kind == "explicit":
            mbuf = io.BytesIO()
            np.save(mbuf, mask.weights, allow_pickle=False)
            _zip_write(zf, "mask.npy", mbuf.getvalue())


def load_bundle(path):
    """Returns (X, mask, registry, periods, meta)."""
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            X = np.load(io.BytesIO(zf.read("tensor.npy")), allow_pickle=False)
            W = None
            if meta.get("mask") == "explicit":
                W = np.load(io.BytesIO(zf.read("mask.npy")), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, ValueError, OSError) as exc:
        raise DataError(f"{path}: not a readable tensor bundle ({exc})") from None
    if meta.get("format") != BUNDLE_FORMAT or meta.get("version") != BUNDLE_VERSION:
        raise DataError(f"{path}: unsupported bundle format/version")
    if list(X.shape) != meta["dims"]:
        raise DataError(f"{path}: tensor shape {X.shape} disagrees with dims {meta['dims']}")
    mask = MaskSpec.explicit(W) if W is not None else MaskSpec.diagonal_off(X.shape)
    periods = PeriodAxis(meta["periods"])
    registry = NodeRegistry(meta["node_ids"])
    if len(registry) != X.shape[0] or len(periods) != X.shape[2]:
        raise DataError(f"{path}: ids/periods do not match tensor dims")
    return X, mask, registry, periods, meta


# -- model documents ----------------------------------------------------------

def export_model(model: FactorModel, registry: NodeRegistry, periods: PeriodAxis, path,
                 dest_registry: NodeRegistry | None = None, extra: dict | None = None):
    """Write a self-describing JSON model document."""
    dest_registry = dest_registry or registry
    if len(registry) == 0 or len(dest_registry) == 0:
        raise ValueError("cannot export a model with an empty node registry")
    I, J, K = model.shape
    if len(registry) != I or len(dest_registry) != J or len(periods) != K:
        raise ValueError("registry/period sizes do not match the model")
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "dims": [I, J, K],
        "rank": model.rank,
        "weights": model.weights.tolist(),
        "A": model.A.T.tolist(),
        "B": model.B.T.tolist(),
        "C": model.C.T.tolist(),
        "origin_ids": registry.ids,
        "destination_ids": dest_registry.ids,
        "periods": periods.labels,
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def import_model(path):
    """Returns (model, origin registry, destination registry, periods, extra)."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: truncated or malformed model document ({exc})") from None
    if doc.get("format") != MODEL_FORMAT:
        raise DataError(f"{path}: not a model document")
    if doc.get("version") != MODEL_VERSION:
        raise DataError(f"{path}: model version {doc.get('version')!r}, expected {MODEL_VERSION}")
    try:
        I, J, K = doc["dims"]
        F = doc["rank"]
        A = np.array(doc["A"], dtype=float).reshape(F, -1).T
        B = np.array(doc["B"], dtype=float).reshape(F, -1).T
        C = np.array(doc["C"], dtype=float).reshape(F, -1).T
        w = np.array(doc["weights"], dtype=float)
        origin_ids, dest_ids, labels = doc["origin_ids"], doc["destination_ids"], doc["periods"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: incomplete model document ({exc})") from None
    if A.shape != (I, F) or B.shape != (J, F) or C.shape != (K, F) or w.shape != (F,):
        raise DataError(f"{path}: factor shapes disagree with dims {doc['dims']} / rank {F}")
    if len(origin_ids) != I or len(dest_ids) != J or len(labels) != K:
        raise DataError(f"{path}: ids/periods disagree with dims {doc['dims']}")
    model = FactorModel(A, B, C, w)
    return model, NodeRegistry(origin_ids), NodeRegistry(dest_ids), PeriodAxis(labels), doc.get("extra", {})


# -- report tables ------------------------------------------------------------

def write_reports(reports, periods: PeriodAxis, outdir):
    """Write members.csv, profiles.csv, association_<n>.csv and communities.json."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    reports = sorted(reports, key=lambda r: r.rank_by_lambda)
    with open(outdir / "members.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["system", "side", "position", "node_id", "membership"])
        for r in reports:
            for side, members in (("origin", r.top_origins), ("destination", r.top_destinations)):
                for pos, (node, val) in enumerate(members, start=1):
                    w.writerow([r.rank_by_lambda, side, pos, node, repr(float(val))])
    with open(outdir / "profiles.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["system", "period", "intensity", "shock"])
        for r in reports:
            for k, label in enumerate(periods.labels):
                w.writerow([r.rank_by_lambda, label, repr(float(r.profile[k])), int(k in r.shock_flags)])
    for r in reports:
        with open(outdir / f"association_{r.rank_by_lambda}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([""] + [n for n, _ in r.top_destinations])
            for (node, _), row in zip(r.top_origins, r.association):
                w.writerow([node] + [repr(float(v)) for v in row])
    doc = []
    for r in reports:
        d = r.to_dict(periods.labels)
        d["system"] = r.rank_by_lambda
        doc.append(d)
    (outdir / "communities.json").write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def write_partition(partition, path, order=None):
    """Two-column node_id, community table in ``order`` (default: label dict order)."""
    order = list(order) if order is not None else list(partition.labels)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "community"])
        for node in order:
            w.writerow([node, partition.labels[node]])
