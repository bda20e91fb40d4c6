"""Areal maps, datasets and their CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DENSE_CAP = 5000


class InputError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class ArealMap:
    """K areal units with a symmetric binary adjacency and planar centroids.

    ``neighbors[k]`` is a sorted tuple of the units sharing a border with
    ``k``. ``centroids`` may be ``None`` when no geometry is available,
    in which case island repair and distance-based simulation are not
    possible.
    """

    neighbors: tuple[tuple[int, ...], ...]
    centroids: np.ndarray | None = None
    unit_ids: tuple[str, ...] = ()
    dense_cap: int = DENSE_CAP

    def __post_init__(self):
        k = len(self.neighbors)
        if k < 1:
            raise InputError("an areal map needs at least one unit")
        for i, nb in enumerate(self.neighbors):
            if i in nb:
                raise InputError(f"unit {i} is listed as its own neighbour")
            for j in nb:
                if not 0 <= j < k or i not in self.neighbors[j]:
                    raise InputError(f"adjacency is not symmetric at ({i}, {j})")
        if not self.unit_ids:
            object.__setattr__(self, "unit_ids", tuple(str(i) for i in range(k)))
        elif len(self.unit_ids) != k:
            raise InputError("unit_ids length does not match the number of units")
        if self.centroids is not None:
            c = np.array(self.centroids, dtype=float)
            if c.shape != (k, 2):
                raise InputError(f"centroids must have shape ({k}, 2)")
            c.setflags(write=False)
            object.__setattr__(self, "centroids", c)

    @property
    def n_units(self) -> int:
        return len(self.neighbors)

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbors], dtype=int)

    @property
    def n_edges(self) -> int:
        return int(self.degrees.sum()) // 2

    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i, nb in enumerate(self.neighbors) for j in nb if i < j]

    def sparse(self) -> sp.csr_matrix:
        """Adjacency as a CSR matrix of zeros and ones."""
        rows = np.repeat(np.arange(self.n_units), self.degrees)
        cols = np.fromiter((j for nb in self.neighbors for j in nb), dtype=int,
                           count=int(self.degrees.sum()))
        data = np.ones(rows.size)
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n_units, self.n_units))

    def dense(self) -> np.ndarray:
        if self.n_units > self.dense_cap:
            raise MemoryError(
                f"refusing to materialise a dense {self.n_units}x{self.n_units} "
                f"adjacency (cap {self.dense_cap})")
        return self.sparse().toarray()

    def components(self) -> np.ndarray:
        """Connected-component label per unit, numbered by lowest member index."""
        _, labels = sp.csgraph.connected_components(self.sparse(), directed=False)
        # relabel so component ids follow first appearance
        _, first = np.unique(labels, return_index=True)
        order = np.argsort(first)
        remap = np.empty_like(order)
        remap[order] = np.arange(order.size)
        return remap[labels]

    def index_of(self, unit_id: str) -> int:
        try:
            return self.unit_ids.index(unit_id)
        except ValueError:
            raise InputError(f"unknown unit_id {unit_id!r}") from None


def build_adjacency(edges: Iterable[tuple[int, int]], n_units: int,
                    centroids=None, unit_ids: Sequence[str] = ()) -> ArealMap:
    """Build an :class:`ArealMap` from an undirected edge list.

    Duplicate pairs, in either orientation, collapse to one edge.
    """
    if n_units < 1:
        raise InputError("n_units must be positive")
    nbrs: list[set[int]] = [set() for _ in range(n_units)]
    for a, b in edges:
        a, b = int(a), int(b)
        if not (0 <= a < n_units and 0 <= b < n_units):
            raise InputError(f"edge ({a}, {b}) has an index outside [0, {n_units})")
        if a == b:
            raise InputError(f"self-edge at unit {a}")
        nbrs[a].add(b)
        nbrs[b].add(a)
    return ArealMap(tuple(tuple(sorted(s)) for s in nbrs), centroids, tuple(unit_ids))


def repair_islands(amap: ArealMap) -> ArealMap:
    """Give every unit without neighbours one edge to its nearest centroid.

    Distances are Euclidean in the centroid plane. Ties go to the lowest
    unit index. Only units that are islands in the input are repaired, so
    an island that is another island's nearest unit is linked once through
    each of them.
    """
    deg = amap.degrees
    islands = np.flatnonzero(deg == 0)
    if islands.size == 0:
        return amap
    if amap.n_units < 2:
        raise InputError("cannot repair an island in a single-unit map")
    if amap.centroids is None:
        raise InputError("island repair needs centroids")
    c = amap.centroids
    nbrs = [set(nb) for nb in amap.neighbors]
    for k in islands:
        d = np.hypot(*(c - c[k]).T)
        d[k] = np.inf
        # argmin returns the first (lowest-index) minimiser
        j = int(np.argmin(d))
        nbrs[k].add(j)
        nbrs[j].add(int(k))
    return ArealMap(tuple(tuple(sorted(s)) for s in nbrs), amap.centroids,
                    amap.unit_ids, amap.dense_cap)


def lattice_map(side: int, rows: int | None = None) -> ArealMap:
    """Rook-adjacency lattice with unit-spaced centroids, row-major ordering."""
    rows = side if rows is None else rows
    idx = np.arange(rows * side).reshape(rows, side)
    edges = list(zip(idx[:, :-1].ravel(), idx[:, 1:].ravel()))
    edges += list(zip(idx[:-1, :].ravel(), idx[1:, :].ravel()))
    yy, xx = np.divmod(np.arange(rows * side), side)
    cent = np.column_stack([xx, yy]).astype(float)
    ids = [f"u{k:04d}" for k in range(rows * side)]
    return build_adjacency(edges, rows * side, cent, ids)


def compute_smr(y, e) -> np.ndarray:
    """Standardised morbidity ratio, observed over expected counts."""
    y = np.asarray(y, dtype=float)
    e = np.asarray(e, dtype=float)
    if y.shape != e.shape:
        raise InputError("y and e must have the same shape")
    if np.any(~(e > 0)):
        raise InputError("expected counts must be strictly positive")
    return y / e


@dataclass(frozen=True)
class Dataset:
    """Counts, expected counts, exposures and confounders for K units."""

    y: np.ndarray
    e: np.ndarray
    exposures: np.ndarray
    confounders: np.ndarray
    exposure_names: tuple[str, ...] = ()
    confounder_names: tuple[str, ...] = ()
    unit_ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        y = np.asarray(self.y)
        if y.ndim != 1:
            raise InputError("y must be one-dimensional")
        k = y.size
        if np.any(y < 0) or np.any(np.asarray(y, dtype=float) % 1 != 0):
            raise InputError("y must contain nonnegative integer counts")
        y = y.astype(np.int64)
        e = np.asarray(self.e, dtype=float)
        if e.shape != (k,):
            raise InputError("e must have one entry per unit")
        if np.any(~(e > 0)):
            raise InputError("expected counts must be strictly positive")
        x = np.asarray(self.exposures, dtype=float)
        z = np.asarray(self.confounders, dtype=float)
        if x.shape[0] != k or z.shape[0] != k:
            raise InputError("exposures and confounders need one row per unit")
        x, z = x.reshape(k, -1), z.reshape(k, -1)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            raise InputError("exposures and confounders must be finite")
        xn = tuple(self.exposure_names) or tuple(f"x{i + 1}" for i in range(x.shape[1]))
        zn = tuple(self.confounder_names) or tuple(f"z{i + 1}" for i in range(z.shape[1]))
        if len(xn) != x.shape[1] or len(zn) != z.shape[1]:
            raise InputError("column names do not match matrix widths")
        ids = tuple(self.unit_ids) or tuple(str(i) for i in range(k))
        if len(ids) != k:
            raise InputError("unit_ids length does not match the number of units")
        for name, arr in (("y", y), ("e", e), ("exposures", x), ("confounders", z)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "exposure_names", xn)
        object.__setattr__(self, "confounder_names", zn)
        object.__setattr__(self, "unit_ids", ids)

    @property
    def n_units(self) -> int:
        return self.y.size

    def exposure(self, which: int | str) -> np.ndarray:
        if isinstance(which, str):
            if which not in self.exposure_names:
                raise InputError(f"unknown exposure {which!r}; have {list(self.exposure_names)}")
            which = self.exposure_names.index(which)
        return self.exposures[:, which]


# ---------------------------------------------------------------------------
# CSV ingestion


def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise InputError(f"{path}: empty file")
    return [c.strip() for c in rows[0]], rows[1:]


def _float(cell: str, path, line: int, col: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise InputError(f"{path}: line {line}, column {col!r}: "
                         f"cannot parse {cell!r} as a number") from None


def read_dataset(path) -> Dataset:
    """Read ``unit_id,y,e,x_<name>...,z_<name>...``."""
    header, rows = _read_rows(path)
    if header[:3] != ["unit_id", "y", "e"]:
        raise InputError(f"{path}: header must start with unit_id,y,e (got {header[:3]})")
    xcols = [i for i, h in enumerate(header) if h.startswith("x_")]
    zcols = [i for i, h in enumerate(header) if h.startswith("z_")]
    other = set(range(3, len(header))) - set(xcols) - set(zcols)
    if other:
        raise InputError(f"{path}: unexpected columns {[header[i] for i in sorted(other)]}")
    ids, y, e, x, z = [], [], [], [], []
    for n, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise InputError(f"{path}: line {n} has {len(row)} fields, expected {len(header)}")
        ids.append(row[0].strip())
        yv = _float(row[1], path, n, "y")
        if yv < 0 or yv % 1:
            raise InputError(f"{path}: line {n}, column 'y': {row[1]!r} is not a count")
        y.append(int(yv))
        e.append(_float(row[2], path, n, "e"))
        x.append([_float(row[i], path, n, header[i]) for i in xcols])
        z.append([_float(row[i], path, n, header[i]) for i in zcols])
    if len(set(ids)) != len(ids):
        raise InputError(f"{path}: duplicate unit_id values")
    k = len(ids)
    return Dataset(np.array(y, dtype=np.int64), np.array(e),
                   np.array(x, dtype=float).reshape(k, len(xcols)),
                   np.array(z, dtype=float).reshape(k, len(zcols)),
                   tuple(header[i][2:] for i in xcols), tuple(header[i][2:] for i in zcols),
                   tuple(ids))


def read_map(adjacency_path, unit_ids: Sequence[str], centroids_path=None,
             repair: bool = True) -> ArealMap:
    """Read an edge list (and optional centroids) against known unit IDs."""
    index = {u: i for i, u in enumerate(unit_ids)}

    def lookup(uid, path, line):
        if uid not in index:
            raise InputError(f"{path}: line {line}: unknown unit_id {uid!r}")
        return index[uid]

    header, rows = _read_rows(adjacency_path)
    if header != ["unit_id_a", "unit_id_b"]:
        # headerless file: treat the first row as data
        rows = [header] + rows
        start = 1
    else:
        start = 2
    edges = []
    for n, row in enumerate(rows, start=start):
        if len(row) != 2:
            raise InputError(f"{adjacency_path}: line {n} must have two fields")
        edges.append((lookup(row[0].strip(), adjacency_path, n),
                      lookup(row[1].strip(), adjacency_path, n)))
    cent = None
    if centroids_path is not None:
        h, crow = _read_rows(centroids_path)
        if h != ["unit_id", "cx", "cy"]:
            raise InputError(f"{centroids_path}: header must be unit_id,cx,cy")
        cent = np.full((len(unit_ids), 2), np.nan)
        for n, row in enumerate(crow, start=2):
            if len(row) != 3:
                raise InputError(f"{centroids_path}: line {n} must have three fields")
            k = lookup(row[0].strip(), centroids_path, n)
            cent[k] = [_float(row[1], centroids_path, n, "cx"),
                       _float(row[2], centroids_path, n, "cy")]
        missing = np.flatnonzero(np.isnan(cent[:, 0]))
        if missing.size:
            raise InputError(f"{centroids_path}: no centroid for unit_id {unit_ids[missing[0]]!r}")
    try:
        amap = build_adjacency(edges, len(unit_ids), cent, unit_ids)
    except InputError as exc:
        raise InputError(f"{adjacency_path}: {exc}") from None
    if repair and np.any(amap.degrees == 0):
        amap = repair_islands(amap)
    return amap


def write_dataset(path, data: Dataset) -> None:
    header = (["unit_id", "y", "e"] + [f"x_{n}" for n in data.exposure_names]
              + [f"z_{n}" for n in data.confounder_names])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(data.n_units):
            w.writerow([data.unit_ids[k], int(data.y[k]), repr(float(data.e[k]))]
                       + [repr(float(v)) for v in data.exposures[k]]
                       + [repr(float(v)) for v in data.confounders[k]])


def write_map(adjacency_path, amap: ArealMap, centroids_path=None) -> None:
    with Path(adjacency_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit_id_a", "unit_id_b"])
        for i, j in amap.edges():
            w.writerow([amap.unit_ids[i], amap.unit_ids[j]])
    if centroids_path is not None and amap.centroids is not None:
        with Path(centroids_path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["unit_id", "cx", "cy"])
            for uid, (cx, cy) in zip(amap.unit_ids, amap.centroids):
                w.writerow([uid, repr(float(cx)), repr(float(cy))])
