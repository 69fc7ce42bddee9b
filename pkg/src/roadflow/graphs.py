"""Weighted adjacency construction for the multi-graph forecaster.

Three relationship matrices are built from link geometry: a thresholded
Gaussian kernel of on-path distances, normalized direction differences,
and four binary positional-relationship matrices.  Partition filter banks
split a matrix into M element-wise slices that sum back to the original,
and Hadamard products combine the distance matrix with the sliced ones.

Matrix orientation: entry (i, j) weights the influence of link j on link
i; the propagation matrix I + D^-1 W row-normalizes in that orientation.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from roadflow.errors import ConfigError, DataError, ShapeError
from roadflow.geometry import LinkSet, PositionalClass, classify_positional


@dataclass
class WeightedAdjacency:
    """Dense N x N relationship matrix with a kind tag."""

    values: np.ndarray
    kind: str = "generic"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ShapeError(f"adjacency must be square, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("adjacency contains non-finite entries")

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class PartitionFilterBank:
    """M triangular hat functions over a circular or linear domain.

    The hats are anchored at ``centers`` and interpolate linearly between
    adjacent centers, so they sum to 1 everywhere in the domain.
    """

    centers: np.ndarray
    domain: str  # "circular" or "linear"
    period: float = 1.0  # circular only
    lo: float = 0.0  # linear only
    hi: float = 1.0

    def __post_init__(self):
        self.centers = np.sort(np.asarray(self.centers, dtype=np.float64))
        if self.centers.size < 2:
            raise ConfigError("filter bank needs at least 2 centers")
        if self.domain not in ("circular", "linear"):
            raise ConfigError(f"unknown domain {self.domain!r}")

    @property
    def m(self) -> int:
        return self.centers.size

    def memberships(self, values: np.ndarray) -> np.ndarray:
        """Hat values, shape (M,) + values.shape; sums to 1 over axis 0."""
        v = np.asarray(values, dtype=np.float64)
        self._check_domain(v)
        out = np.zeros((self.m,) + v.shape)
        c = self.centers
        if self.domain == "circular":
            p = self.period
            vm = v % p
            # locate the circular interval [c_left, c_right) holding each value
            idx = np.searchsorted(c, vm, side="right")
            left_idx = (idx - 1) % self.m
            right_idx = idx % self.m
            left = np.where(idx == 0, c[-1] - p, c[left_idx])
            right = np.where(idx == self.m, c[0] + p, c[right_idx])
            frac = (vm - left) / (right - left)
            flat_left = out.reshape(self.m, -1)
            pos = np.arange(vm.size)
            flat_left[left_idx.ravel(), pos] = (1.0 - frac).ravel()
            np.add.at(flat_left, (right_idx.ravel(), pos), frac.ravel())
        else:
            for m in range(self.m):
                x = v
                if m == 0:
                    out[m][x <= c[0]] = 1.0
                else:
                    left = c[m - 1]
                    rising = (x > left) & (x <= c[m])
                    out[m][rising] = (x[rising] - left) / (c[m] - left)
                if m == self.m - 1:
                    out[m][x > c[-1]] = 1.0
                else:
                    right = c[m + 1]
                    falling = (x > c[m]) & (x < right)
                    out[m][falling] = (right - x[falling]) / (right - c[m])
        return out

    def _check_domain(self, v: np.ndarray) -> None:
        if self.domain == "linear":
            bad = (v < self.lo) | (v > self.hi)
            if np.any(bad):
                idx = tuple(int(k[0]) for k in np.nonzero(bad))
                raise DataError(f"value {v[idx]} at {idx} outside domain [{self.lo}, {self.hi}]")


@dataclass
class GraphElementSet:
    """The adjacency groups consumed by a spatial block."""

    distance: list[WeightedAdjacency] = field(default_factory=list)
    direction_hybrid: list[WeightedAdjacency] = field(default_factory=list)
    positional_hybrid: list[WeightedAdjacency] = field(default_factory=list)
    distance_partitioned: list[WeightedAdjacency] = field(default_factory=list)

    GROUP_NAMES = ("distance", "direction_hybrid", "positional_hybrid", "distance_partitioned")

    def groups(self) -> dict[str, list[WeightedAdjacency]]:
        return {name: getattr(self, name) for name in self.GROUP_NAMES}

    @property
    def n(self) -> int:
        for group in self.groups().values():
            if group:
                return group[0].n
        raise ConfigError("empty graph element set")


def path_distances(links: LinkSet) -> np.ndarray:
    """All-pairs shortest on-path distances in meters (inf if unreachable).

    The connectivity edge (a, b) costs the average of the two link
    lengths; a path's distance is the sum of its edge costs.  Dijkstra
    from every source.
    """
    n = len(links)
    lengths = links.lengths()
    adj: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    for a, b in links.connectivity:
        adj[a].append((b, (lengths[a] + lengths[b]) / 2.0))
    dist = np.full((n, n), np.inf)
    for src in range(n):
        dist[src, src] = 0.0
        heap = [(0.0, src)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[src, u]:
                continue
            for v, w in adj[u]:
                nd = d + w
                if nd < dist[src, v]:
                    dist[src, v] = nd
                    heapq.heappush(heap, (nd, v))
    return dist


def build_distance_graph(dist: np.ndarray, sigma: float, kappa: float = 0.0) -> WeightedAdjacency:
    """Thresholded Gaussian kernel of the path distances."""
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    with np.errstate(under="ignore"):
        w = np.exp(-np.square(dist) / sigma**2)
    w[~np.isfinite(dist)] = 0.0
    w[w < kappa] = 0.0
    np.fill_diagonal(w, 0.0)
    return WeightedAdjacency(w, kind="distance")


def build_direction_graph(links: LinkSet, convention: str = "standard") -> WeightedAdjacency:
    """Pairwise normalized direction differences in [0, 1)."""
    ang = links.directions(convention)
    w = np.mod(ang[:, None] - ang[None, :], 2.0 * np.pi) / (2.0 * np.pi)
    np.fill_diagonal(w, 0.0)
    return WeightedAdjacency(w, kind="direction")


def build_positional_graphs(
    links: LinkSet, parallel_tol: float = 1e-9
) -> list[WeightedAdjacency]:
    """Four binary matrices, one per positional class; parallel pairs zero."""
    n = len(links)
    mats = [np.zeros((n, n)) for _ in range(4)]
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            cls = classify_positional(links.links[i], links.links[j], parallel_tol)
            if cls is not PositionalClass.NONE:
                mats[cls.value - 1][i, j] = 1.0
    return [WeightedAdjacency(m, kind=f"positional_{k + 1}") for k, m in enumerate(mats)]


def make_filter_bank(
    values: np.ndarray,
    m: int,
    domain: str,
    centers_override: list[float] | None = None,
    period: float = 1.0,
    lo: float = 0.0,
    hi: float = 1.0,
    bins: int = 256,
) -> PartitionFilterBank:
    """Build a filter bank centered on smoothed-histogram peaks.

    Centers default to the ``m`` tallest local maxima of a Gaussian-
    smoothed histogram of ``values`` (bandwidth = span / (8 m)); pass
    ``centers_override`` to pin them explicitly.
    """
    if m < 2:
        raise ConfigError(f"need at least 2 filters, got {m}")
    if centers_override is not None:
        if len(centers_override) != m:
            raise ConfigError(f"centers_override has {len(centers_override)} entries, expected {m}")
        return PartitionFilterBank(np.asarray(centers_override), domain, period, lo, hi)

    v = np.asarray(values, dtype=np.float64).ravel()
    span = period if domain == "circular" else hi - lo
    lo_edge = 0.0 if domain == "circular" else lo
    hist, edges = np.histogram(v, bins=bins, range=(lo_edge, lo_edge + span))
    mids = (edges[:-1] + edges[1:]) / 2.0
    bw = span / (8.0 * m)
    sigma_bins = max(bw / (span / bins), 1e-9)
    radius = int(np.ceil(4 * sigma_bins))
    kern = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma_bins) ** 2)
    kern /= kern.sum()
    if domain == "circular":
        padded = np.concatenate([hist[-radius:], hist, hist[:radius]])
        smooth = np.convolve(padded, kern, mode="same")[radius:-radius]
        left = np.roll(smooth, 1)
        right = np.roll(smooth, -1)
    else:
        smooth = np.convolve(hist, kern, mode="same")
        left = np.concatenate([[-np.inf], smooth[:-1]])
        right = np.concatenate([smooth[1:], [-np.inf]])
    peak_idx = np.nonzero((smooth > left) & (smooth >= right) & (smooth > 0))[0]
    if peak_idx.size < m:
        raise ConfigError(
            f"found {peak_idx.size} histogram peaks, need {m}; pass centers_override"
        )
    top = peak_idx[np.argsort(smooth[peak_idx])[::-1][:m]]
    return PartitionFilterBank(mids[np.sort(top)], domain, period, lo, hi)


def apply_partition(bank: PartitionFilterBank, w: WeightedAdjacency) -> list[WeightedAdjacency]:
    """Element-wise slices t_m(W) = W * hat_m(W); they sum back to W."""
    lam = bank.memberships(w.values)
    return [
        WeightedAdjacency(w.values * lam[m], kind=f"{w.kind}_part{m + 1}") for m in range(bank.m)
    ]


def hybrid(
    base: WeightedAdjacency,
    parts: list[WeightedAdjacency],
    bank: PartitionFilterBank | None = None,
    source: WeightedAdjacency | None = None,
    mode: str = "value",
) -> list[WeightedAdjacency]:
    """Hadamard products of ``base`` with each matrix in ``parts``.

    ``value`` multiplies by the partitioned values themselves.  ``mask``
    multiplies by hat membership only (requires ``bank`` and the matrix
    the partition came from), keeping base magnitudes intact.
    """
    for p in parts:
        if p.n != base.n:
            raise ShapeError(f"hybrid size mismatch: {base.n} vs {p.n}")
    if mode == "value":
        return [
            WeightedAdjacency(base.values * p.values, kind=f"hybrid_{p.kind}") for p in parts
        ]
    if mode == "mask":
        if bank is None or source is None:
            raise ConfigError("mask mode needs the filter bank and the source matrix")
        lam = bank.memberships(source.values)
        return [
            WeightedAdjacency(base.values * lam[m], kind=f"hybrid_mask_{m + 1}")
            for m in range(bank.m)
        ]
    raise ConfigError(f"unknown hybrid mode {mode!r}")


def propagation_matrix(w: WeightedAdjacency | np.ndarray) -> np.ndarray:
    """First-order propagation operator I + D^-1 W with row degrees D."""
    values = w.values if isinstance(w, WeightedAdjacency) else np.asarray(w, dtype=np.float64)
    if np.any(values < 0):
        raise DataError("propagation matrix requires nonnegative entries")
    deg = values.sum(axis=1)
    inv = np.where(deg > 0, 1.0 / np.where(deg > 0, deg, 1.0), 0.0)
    return np.eye(values.shape[0]) + inv[:, None] * values


@dataclass
class GraphBuildParams:
    """Knobs for assembling the full graph element set."""

    sigma: float = 1000.0
    kappa: float = 0.0
    m_direction: int = 4
    m_distance: int = 4
    direction_centers: list[float] | None = None
    distance_centers: list[float] | None = None
    hybrid_mode: str = "value"
    direction_convention: str = "standard"
    parallel_tol: float = 1e-9


def build_graph_elements(links: LinkSet, params: GraphBuildParams) -> GraphElementSet:
    """Construct all four element groups from link geometry."""
    dist = path_distances(links)
    w_d = build_distance_graph(dist, params.sigma, params.kappa)
    w_theta = build_direction_graph(links, params.direction_convention)
    w_pos = build_positional_graphs(links, params.parallel_tol)

    dir_bank = make_filter_bank(
        w_theta.values,
        params.m_direction,
        domain="circular",
        centers_override=params.direction_centers,
        period=1.0,
    )
    dir_parts = apply_partition(dir_bank, w_theta)
    dist_bank = make_filter_bank(
        w_d.values,
        params.m_distance,
        domain="linear",
        centers_override=params.distance_centers,
        lo=0.0,
        hi=1.0,
    )
    dist_parts = apply_partition(dist_bank, w_d)

    return GraphElementSet(
        distance=[w_d],
        direction_hybrid=hybrid(w_d, dir_parts, dir_bank, w_theta, params.hybrid_mode),
        positional_hybrid=hybrid(w_d, w_pos),
        distance_partitioned=hybrid(w_d, dist_parts, dist_bank, w_d, params.hybrid_mode),
    )


def save_bundle(elements: GraphElementSet, out_dir: str | Path, meta_extra: dict | None = None) -> None:
    """Write a graph bundle: meta.json + one little-endian f64 .bin per matrix."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"n": elements.n, "groups": {}}
    if meta_extra:
        meta.update(meta_extra)
    for name, group in elements.groups().items():
        entries = []
        for idx, w in enumerate(group):
            fname = f"{name}_{idx}.bin"
            w.values.astype("<f8").tofile(out_dir / fname)
            entries.append({"file": fname, "kind": w.kind})
        meta["groups"][name] = entries
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2))


def load_bundle(in_dir: str | Path) -> tuple[GraphElementSet, dict]:
    """Read a graph bundle written by ``save_bundle``."""
    in_dir = Path(in_dir)
    meta_path = in_dir / "meta.json"
    if not meta_path.exists():
        raise DataError(f"no meta.json in {in_dir}")
    meta = json.loads(meta_path.read_text())
    n = meta["n"]
    kwargs = {}
    for name, entries in meta["groups"].items():
        group = []
        for entry in entries:
            values = np.fromfile(in_dir / entry["file"], dtype="<f8").reshape(n, n)
            group.append(WeightedAdjacency(values, kind=entry["kind"]))
        kwargs[name] = group
    return GraphElementSet(**kwargs), meta
