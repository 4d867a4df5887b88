"""Fixed-radius neighbor search with a cell list, and the detection graph.

Edges are stored as an (E, 2) integer array of ``(source, destination)``
pairs sorted by destination, then source. A message flows from the source
vertex j to the destination vertex i, so the in-edges of i are the rows
whose second column equals i.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .errors import FormatError
from .pointcloud import PointCloud

_OFFSETS = np.array(list(product((-1, 0, 1), repeat=3)), dtype=np.int64)
_KEY_BITS = 20
_KEY_BIAS = 1 << (_KEY_BITS - 1)


def _pack(cells: np.ndarray) -> np.ndarray:
    c = cells + _KEY_BIAS
    return (c[:, 0] << (2 * _KEY_BITS)) | (c[:, 1] << _KEY_BITS) | c[:, 2]


@dataclass
class CellGrid:
    cell_size: float
    origin: np.ndarray
    cell_of: np.ndarray
    cells: dict = field(default_factory=dict)

    def cell_index(self, xyz) -> np.ndarray:
        return np.floor((np.asarray(xyz, dtype=np.float64) - self.origin) / self.cell_size).astype(np.int64)


def build_cell_list(cloud: PointCloud, cell_size: float) -> CellGrid:
    """Hash every point into a cubic cell of edge ``cell_size``."""
    if cell_size <= 0:
        raise ValueError(f"cell_size must be positive, got {cell_size}")
    if len(cloud) == 0:
        return CellGrid(cell_size, np.zeros(3), np.zeros((0, 3), dtype=np.int64), {})
    origin = cloud.xyz.min(axis=0)
    cell_of = np.floor((cloud.xyz - origin) / cell_size).astype(np.int64)
    cells: dict[tuple, list] = {}
    for idx, key in enumerate(map(tuple, cell_of.tolist())):
        cells.setdefault(key, []).append(idx)
    return CellGrid(cell_size, origin, cell_of, cells)


def radius_neighbors(grid: CellGrid, cloud: PointCloud, query_index: int, r: float) -> list[int]:
    """All points strictly closer than ``r`` to the query point, itself included."""
    if r > grid.cell_size:
        raise ValueError(f"radius {r} exceeds cell size {grid.cell_size}; one-ring scan insufficient")
    if not 0 <= query_index < len(cloud):
        raise IndexError(f"query index {query_index} out of range for {len(cloud)} points")
    q = cloud.xyz[query_index]
    cx, cy, cz = grid.cell_of[query_index].tolist()
    found = []
    for dx, dy, dz in _OFFSETS.tolist():
        for j in grid.cells.get((cx + dx, cy + dy, cz + dz), ()):
            if np.sum((cloud.xyz[j] - q) ** 2) < r * r:
                found.append(j)
    return sorted(found)


def radius_pairs(query: np.ndarray, ref: np.ndarray, r: float) -> tuple[np.ndarray, np.ndarray]:
    """All (query, ref) index pairs with distance < r, via a cell list of size r.

    Vectorized one-ring scan. Pairs come back sorted by query then ref index.
    """
    query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1, 3)
    empty = np.zeros(0, dtype=np.int64)
    if len(query) == 0 or len(ref) == 0:
        return empty, empty
    origin = ref.min(axis=0)
    ref_keys = _pack(np.floor((ref - origin) / r).astype(np.int64))
    order = np.argsort(ref_keys, kind="stable")
    sorted_keys = ref_keys[order]
    uniq, starts, counts = np.unique(sorted_keys, return_index=True, return_counts=True)
    q_cells = np.floor((query - origin) / r).astype(np.int64)
    r2 = r * r
    qs, rs = [], []
    for off in _OFFSETS:
        keys = _pack(q_cells + off)
        pos = np.searchsorted(uniq, keys)
        pos_c = np.minimum(pos, len(uniq) - 1)
        hit = uniq[pos_c] == keys
        qi = np.flatnonzero(hit)
        if len(qi) == 0:
            continue
        n_per = counts[pos_c[qi]]
        first = starts[pos_c[qi]]
        q_rep = np.repeat(qi, n_per)
        # ranks within each cell run: arange(total) minus run start
        run_start = np.repeat(np.cumsum(n_per) - n_per, n_per)
        slot = np.repeat(first, n_per) + (np.arange(len(q_rep)) - run_start)
        r_idx = order[slot]
        d2 = np.sum((query[q_rep] - ref[r_idx]) ** 2, axis=1)
        keep = d2 < r2
        qs.append(q_rep[keep])
        rs.append(r_idx[keep])
    if not qs:
        return empty, empty
    qa = np.concatenate(qs)
    ra = np.concatenate(rs)
    srt = np.lexsort((ra, qa))
    return qa[srt], ra[srt]


@dataclass
class Graph:
    vertices: PointCloud
    edges: np.ndarray
    radius: float

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def sources(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def destinations(self) -> np.ndarray:
        return self.edges[:, 1]

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.destinations, minlength=self.num_vertices)


def _sorted_edges(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    order = np.lexsort((src, dst))
    return np.column_stack([src[order], dst[order]]).astype(np.int64).reshape(-1, 2)


def build_graph(cloud: PointCloud, r: float, include_self: bool = False) -> Graph:
    """Connect every ordered vertex pair closer than ``r``."""
    if r <= 0:
        raise ValueError(f"radius must be positive, got {r}")
    dst, src = radius_pairs(cloud.xyz, cloud.xyz, r)
    if not include_self:
        keep = src != dst
        src, dst = src[keep], dst[keep]
    return Graph(cloud, _sorted_edges(src, dst), r)


def brute_force_edges(xyz: np.ndarray, r: float, include_self: bool = False, chunk: int = 512) -> np.ndarray:
    """All-pairs reference for ``build_graph``; O(N^2) time, O(chunk * N) memory."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    srcs, dsts = [], []
    for start in range(0, len(xyz), chunk):
        block = xyz[start:start + chunk]
        d2 = np.sum((block[:, None, :] - xyz[None, :, :]) ** 2, axis=2)
        i, j = np.nonzero(d2 < r * r)
        dsts.append(i + start)
        srcs.append(j)
    if not srcs:
        return np.zeros((0, 2), dtype=np.int64)
    src, dst = np.concatenate(srcs), np.concatenate(dsts)
    if not include_self:
        keep = src != dst
        src, dst = src[keep], dst[keep]
    return _sorted_edges(src, dst)


def cap_edges(graph: Graph, max_in_per_vertex: int = 256, seed: int = 0) -> Graph:
    """Keep at most ``max_in_per_vertex`` seeded-random in-edges per destination."""
    if max_in_per_vertex < 1:
        raise ValueError(f"max_in_per_vertex must be >= 1, got {max_in_per_vertex}")
    if graph.num_edges == 0 or graph.in_degree().max() <= max_in_per_vertex:
        return graph
    dst = graph.destinations
    priority = np.random.default_rng(seed).random(graph.num_edges)
    order = np.lexsort((priority, dst))
    sorted_dst = dst[order]
    run_start = np.searchsorted(sorted_dst, sorted_dst, side="left")
    rank = np.arange(len(order)) - run_start
    kept = np.sort(order[rank < max_in_per_vertex])
    return Graph(graph.vertices, graph.edges[kept], graph.radius)


def format_graph(graph: Graph) -> str:
    lines = [f"{graph.num_vertices} {graph.num_edges} {graph.radius!r}"]
    lines.extend(f"{i} {j}" for i, j in graph.edges.tolist())
    return "\n".join(lines) + "\n"


def parse_graph(text: str, vertices: PointCloud) -> Graph:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty graph dump")
    try:
        n, e, r = lines[0].split()
        n, e, r = int(n), int(e), float(r)
        pairs = np.array([[int(a) for a in ln.split()] for ln in lines[1:]], dtype=np.int64).reshape(-1, 2)
    except ValueError as exc:
        raise FormatError(f"bad graph dump: {exc}") from None
    if n != len(vertices) or e != len(pairs):
        raise FormatError(f"header says N={n} E={e}, found N={len(vertices)} E={len(pairs)}")
    return Graph(vertices, pairs, r)
