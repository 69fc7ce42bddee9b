"""Forecasting network: graph convolutions, spatial/temporal blocks.

The network is two spatio-temporal blocks (temporal conv then a spatial
multi-graph convolution, each with ReLU + layer norm) followed by a 1x1
channel-collapsing convolution and a learned linear map over the time
axis from the history length to the horizon length.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from roadflow.errors import ConfigError, NumericError, ShapeError
from roadflow.graphs import GraphElementSet, WeightedAdjacency, propagation_matrix
from roadflow.tensor import Parameter, Tensor, conv1d_time, layer_norm


DEFAULT_STACK_ORDER = ("distance", "direction_hybrid", "positional_hybrid", "distance_partitioned")


@dataclass
class ModelConfig:
    """All architecture knobs; every field has a sane default."""

    n_links: int = 0
    history: int = 12
    horizon: int = 12
    channels: tuple[int, ...] = (16, 16)
    temporal_kernel: int = 3
    spatial_block_kind: str = "stacked"  # single | parallel | stacked
    stacked_order: tuple[str, ...] = DEFAULT_STACK_ORDER
    cheb_k: int = 1
    enabled_groups: tuple[str, ...] = DEFAULT_STACK_ORDER
    use_cheb: bool = False  # distance-only Chebyshev spatial block
    temporal_first: bool = True
    seed: int = 0

    def __post_init__(self):
        if sorted(self.stacked_order) != sorted(DEFAULT_STACK_ORDER):
            raise ConfigError(f"stacked_order must permute {DEFAULT_STACK_ORDER}")
        if self.spatial_block_kind not in ("single", "parallel", "stacked"):
            raise ConfigError(f"unknown spatial block kind {self.spatial_block_kind!r}")
        if any(c <= 0 for c in self.channels):
            raise ConfigError("channels must be positive")
        if self.cheb_k < 1:
            raise ConfigError("cheb_k must be >= 1")

    def to_json(self) -> str:
        d = asdict(self)
        for key in ("channels", "stacked_order", "enabled_groups"):
            d[key] = list(d[key])
        return json.dumps(d, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("channels", "stacked_order", "enabled_groups"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def graph_conv(x: Tensor, prop: np.ndarray, theta: Tensor) -> Tensor:
    """First-order graph convolution: (P x) theta per batch/time slice."""
    if prop.shape[0] != prop.shape[1] or prop.shape[0] != x.shape[-2]:
        raise ShapeError(f"propagation matrix {prop.shape} vs signal {x.shape}")
    return (Tensor(prop) @ x) @ theta


def multi_graph_conv(x: Tensor, props: list[np.ndarray], thetas: list[Tensor]) -> Tensor:
    """Sum of graph convolutions over several graphs."""
    if not props:
        raise ConfigError("multi_graph_conv needs at least one graph")
    if len(props) != len(thetas):
        raise ShapeError(f"{len(props)} graphs but {len(thetas)} parameter matrices")
    out = None
    for p, th in zip(props, thetas):
        term = graph_conv(x, p, th)
        out = term if out is None else out + term
    return out


def scaled_laplacian(w: WeightedAdjacency | np.ndarray, tol: float = 1e-8, max_iter: int = 10_000) -> np.ndarray:
    """Symmetrized, degree-normalized Laplacian rescaled to [-1, 1].

    Largest eigenvalue comes from power iteration on L; rows with zero
    degree use 0 in place of the inverse sqrt degree.
    """
    values = w.values if isinstance(w, WeightedAdjacency) else np.asarray(w, dtype=np.float64)
    ws = (values + values.T) / 2.0
    deg = ws.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    n = ws.shape[0]
    lap = np.eye(n) - (inv_sqrt[:, None] * ws) * inv_sqrt[None, :]
    rng = np.random.default_rng(0)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        nv = lap @ v
        norm = np.linalg.norm(nv)
        if norm == 0:
            lam = 0.0
            break
        nv /= norm
        new_lam = float(nv @ lap @ nv)
        if abs(new_lam - lam) <= tol:
            lam = new_lam
            break
        lam, v = new_lam, nv
    else:
        raise NumericError("power iteration did not converge")
    lam = max(abs(lam), 1e-12)
    return 2.0 * lap / lam - np.eye(n)


def cheb_conv(x: Tensor, w: WeightedAdjacency | np.ndarray, k: int, thetas: list[Tensor]) -> Tensor:
    """Chebyshev-polynomial graph convolution of order K on one graph."""
    if k < 1:
        raise ConfigError("cheb order must be >= 1")
    if len(thetas) != k:
        raise ShapeError(f"need {k} parameter matrices, got {len(thetas)}")
    values = w.values if isinstance(w, WeightedAdjacency) else np.asarray(w, dtype=np.float64)
    n = values.shape[0]
    if k == 1:
        basis = [np.eye(n)]
    else:
        lt = scaled_laplacian(values)
        basis = [np.eye(n), lt]
        for _ in range(2, k):
            basis.append(2.0 * lt @ basis[-1] - basis[-2])
    out = None
    for t_k, th in zip(basis, thetas):
        term = (Tensor(t_k) @ x) @ th
        out = term if out is None else out + term
    return out


class TemporalBlock:
    """Time-axis conv1d + ReLU + layer norm."""

    def __init__(self, name: str, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        fan_in, fan_out = kernel * c_in, c_out
        self.weight = Parameter(f"{name}.weight", _glorot(rng, fan_in, fan_out, (kernel, c_in, c_out)))
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out))
        self.ln_gain = Parameter(f"{name}.ln_gain", np.ones(c_out))
        self.ln_bias = Parameter(f"{name}.ln_bias", np.zeros(c_out))

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias, self.ln_gain, self.ln_bias]

    def __call__(self, x: Tensor) -> Tensor:
        y = conv1d_time(x, self.weight.tensor, self.bias.tensor, padding="same")
        return layer_norm(y.relu(), self.ln_gain.tensor, self.ln_bias.tensor)


class SpatialBlock:
    """Multi-graph convolution block over the enabled element groups.

    ``single`` uses only the distance matrix.  ``parallel`` runs one
    multi-graph convolution per group on the same input and sums the
    results.  ``stacked`` composes the group convolutions sequentially.
    """

    def __init__(
        self,
        name: str,
        elements: GraphElementSet,
        config: ModelConfig,
        c_in: int,
        c_out: int,
        rng: np.random.Generator,
    ):
        self.kind = config.spatial_block_kind
        if self.kind == "single":
            group_names = ["distance"]
        else:
            order = config.stacked_order if self.kind == "stacked" else GraphElementSet.GROUP_NAMES
            group_names = [g for g in order if g in config.enabled_groups]
        if not group_names:
            raise ConfigError("all graph element groups are disabled")
        self.group_names = group_names

        all_groups = elements.groups()
        self.use_cheb = config.use_cheb
        self.cheb_k = config.cheb_k
        self.params: list[Parameter] = []
        self.props: dict[str, list[np.ndarray]] = {}
        self.thetas: dict[str, list[Tensor]] = {}
        self.cheb_w = None
        if self.use_cheb:
            # distance-only Chebyshev block replaces the group structure
            self.cheb_w = all_groups["distance"][0]
            self.cheb_thetas = []
            for i in range(self.cheb_k):
                p = Parameter(f"{name}.cheb_{i}", _glorot(rng, c_in, c_out, (c_in, c_out)))
                self.params.append(p)
                self.cheb_thetas.append(p.tensor)
        else:
            kept_names = []
            for g in group_names:
                # an op whose adjacency is identically zero is treated as
                # removed, so zeroing a group's matrices equals disabling it
                mats = [w for w in all_groups[g] if np.any(w.values)]
                if not mats:
                    continue
                kept_names.append(g)
                stage_in = c_in
                self.props[g] = [propagation_matrix(w) for w in mats]
                self.thetas[g] = []
                for i in range(len(mats)):
                    p = Parameter(f"{name}.{g}.theta_{i}", _glorot(rng, stage_in, c_out, (stage_in, c_out)))
                    self.params.append(p)
                    self.thetas[g].append(p.tensor)
                if self.kind == "stacked":
                    c_in = c_out  # next stage consumes this stage's output
            if not kept_names:
                raise ConfigError("no nonempty graph element groups to convolve over")
            self.group_names = kept_names
        self.ln_gain = Parameter(f"{name}.ln_gain", np.ones(c_out))
        self.ln_bias = Parameter(f"{name}.ln_bias", np.zeros(c_out))
        self.params += [self.ln_gain, self.ln_bias]

    def parameters(self) -> list[Parameter]:
        return list(self.params)

    def __call__(self, x: Tensor) -> Tensor:
        if self.use_cheb:
            y = cheb_conv(x, self.cheb_w, self.cheb_k, self.cheb_thetas)
            return layer_norm(y.relu(), self.ln_gain.tensor, self.ln_bias.tensor)
        if self.kind == "stacked":
            y = x
            for g in self.group_names:
                y = multi_graph_conv(y, self.props[g], self.thetas[g]).relu()
            return layer_norm(y, self.ln_gain.tensor, self.ln_bias.tensor)
        # single and parallel: sum of group outputs, then ReLU + LN
        y = None
        for g in self.group_names:
            term = multi_graph_conv(x, self.props[g], self.thetas[g])
            y = term if y is None else y + term
        return layer_norm(y.relu(), self.ln_gain.tensor, self.ln_bias.tensor)


class STBlock:
    """Temporal block paired with a spatial block."""

    def __init__(
        self,
        name: str,
        elements: GraphElementSet,
        config: ModelConfig,
        c_in: int,
        c_out: int,
        rng: np.random.Generator,
    ):
        self.temporal_first = config.temporal_first
        if self.temporal_first:
            self.temporal = TemporalBlock(f"{name}.temporal", c_in, c_out, config.temporal_kernel, rng)
            self.spatial = SpatialBlock(f"{name}.spatial", elements, config, c_out, c_out, rng)
        else:
            self.spatial = SpatialBlock(f"{name}.spatial", elements, config, c_in, c_out, rng)
            self.temporal = TemporalBlock(f"{name}.temporal", c_out, c_out, config.temporal_kernel, rng)

    def parameters(self) -> list[Parameter]:
        return self.temporal.parameters() + self.spatial.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        if self.temporal_first:
            return self.spatial(self.temporal(x))
        return self.temporal(self.spatial(x))


class Forecaster:
    """Full network: two ST blocks, 1x1 channel collapse, time-axis map."""

    def __init__(self, elements: GraphElementSet, config: ModelConfig):
        if config.n_links and elements.n != config.n_links:
            raise ShapeError(f"graphs built for N={elements.n}, config says {config.n_links}")
        self.config = config
        self.n = elements.n
        rng = np.random.default_rng(config.seed)
        c1, c2 = config.channels[0], config.channels[-1]
        self.block1 = STBlock("st1", elements, config, 1, c1, rng)
        self.block2 = STBlock("st2", elements, config, c1, c2, rng)
        self.head_w = Parameter("head.weight", _glorot(rng, c2, 1, (c2, 1)))
        self.head_b = Parameter("head.bias", np.zeros(1))
        self.time_w = Parameter(
            "time_map.weight", _glorot(rng, config.history, config.horizon, (config.history, config.horizon))
        )
        self.time_b = Parameter("time_map.bias", np.zeros(config.horizon))

    def parameters(self) -> list[Parameter]:
        return (
            self.block1.parameters()
            + self.block2.parameters()
            + [self.head_w, self.head_b, self.time_w, self.time_b]
        )

    def __call__(self, x: Tensor) -> Tensor:
        """(B, T_hist, N, 1) -> (B, T_horizon, N, 1)."""
        if x.shape[-2] != self.n:
            raise ShapeError(f"input has N={x.shape[-2]}, graphs have N={self.n}")
        y = self.block2(self.block1(x))
        y = y @ self.head_w.tensor + self.head_b.tensor  # (B, T, N, 1)
        # linear map over the time axis: move T last, project, move back
        y = y.permute(0, 2, 3, 1) @ self.time_w.tensor + self.time_b.tensor
        return y.permute(0, 3, 1, 2)


def save_model_config(config: ModelConfig, path: str | Path) -> None:
    Path(path).write_text(config.to_json())


def load_model_config(path: str | Path) -> ModelConfig:
    return ModelConfig.from_dict(json.loads(Path(path).read_text()))
