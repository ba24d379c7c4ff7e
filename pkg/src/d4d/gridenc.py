"""Multi-resolution hash-encoded feature grids over 3D and 4D inputs.

Each level stores a table of F-dimensional features on a virtual lattice
of N_l cells per axis, with N_l growing geometrically from ``base_res`` to
``max_res``. Coarse levels whose full lattice fits in the table budget are
stored densely (collision-free); finer levels fall back to spatial
hashing. Lookups d-linearly interpolate the 2^d corner features of the
cell containing the query point, and levels can be masked on/off without
changing the output layout (masked levels contribute exact zeros).

The time axis of a 4D grid is treated as a fourth equal lattice axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError, UsageError
from .grad import ParamTensor

# Fixed odd hash multipliers, one per axis. The first three follow common
# spatial-hashing practice for 3D grids; the fourth extends the family to
# the time axis. Changing any of these invalidates existing checkpoints.
HASH_MULTIPLIERS = (1, 2654435761, 805459861, 3674653429)

# Normalized-coordinate slack tolerated before a query is rejected.
DOMAIN_SPILL = 1e-6

# Default feature-table initialization range (near-neutral fields).
INIT_RANGE = 1e-4


@dataclass(frozen=True)
class GridConfig:
    """Static description of a multi-resolution feature grid.

    ``table_size_log2`` bounds every level at ``2**table_size_log2``
    entries; ``domain_min``/``domain_max`` map world coordinates to the
    unit cube per axis.
    """

    input_dim: int
    levels: int
    base_res: int
    max_res: int
    features_per_level: int = 2
    table_size_log2: int = 19
    domain_min: tuple[float, ...] = field(default=None)  # type: ignore[assignment]
    domain_max: tuple[float, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.input_dim not in (3, 4):
            raise ConfigError(f"input_dim must be 3 or 4, got {self.input_dim}")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if not (1 <= self.base_res <= self.max_res):
            raise ConfigError(
                f"need 1 <= base_res <= max_res, got {self.base_res}, {self.max_res}"
            )
        if self.features_per_level < 1:
            raise ConfigError("features_per_level must be >= 1")
        if self.table_size_log2 < 1:
            raise ConfigError("table_size_log2 must be >= 1")
        dmin = self.domain_min if self.domain_min is not None else (-1.0,) * self.input_dim
        dmax = self.domain_max if self.domain_max is not None else (1.0,) * self.input_dim
        dmin = tuple(float(v) for v in dmin)
        dmax = tuple(float(v) for v in dmax)
        if len(dmin) != self.input_dim or len(dmax) != self.input_dim:
            raise ConfigError("domain bounds must have one entry per axis")
        if any(lo >= hi for lo, hi in zip(dmin, dmax)):
            raise ConfigError("domain_min must be < domain_max per axis")
        object.__setattr__(self, "domain_min", dmin)
        object.__setattr__(self, "domain_max", dmax)

    @property
    def growth_factor(self) -> float:
        """Geometric per-level growth b with N_0 = base and N_{L-1} = max."""
        if self.levels == 1:
            return 1.0
        return float(np.exp((np.log(self.max_res) - np.log(self.base_res)) / (self.levels - 1)))

    @property
    def table_size(self) -> int:
        return 1 << self.table_size_log2

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level


def level_resolution(config: GridConfig, level: int) -> int:
    """Cells per axis at ``level``: floor(base * b^level), endpoints exact."""
    if not 0 <= level < config.levels:
        raise UsageError(f"level {level} out of range [0, {config.levels})")
    if level == 0:
        return config.base_res
    if level == config.levels - 1:
        return config.max_res
    return int(np.floor(config.base_res * config.growth_factor**level))


def level_table_entries(config: GridConfig, level: int) -> int:
    """Entries allocated at ``level``: dense lattice size when it fits."""
    n = level_resolution(config, level)
    dense = (n + 1) ** config.input_dim
    return min(dense, config.table_size)


def level_is_dense(config: GridConfig, level: int) -> bool:
    n = level_resolution(config, level)
    return (n + 1) ** config.input_dim <= config.table_size


def hash_index(coords: Sequence[int], dim: int, table_size: int) -> int:
    """Spatial hash of one non-negative integer lattice point.

    XOR over axes of coord_i * HASH_MULTIPLIERS[i] (wrapping 64-bit
    arithmetic), reduced modulo ``table_size``. Total and deterministic
    across runs and platforms.
    """
    acc = np.uint64(0)
    with np.errstate(over="ignore"):
        for i in range(dim):
            acc ^= np.uint64(coords[i] % (1 << 64)) * np.uint64(HASH_MULTIPLIERS[i])
    return int(acc % np.uint64(table_size))


def _hash_many(coords: np.ndarray, table_size: int) -> np.ndarray:
    """Vectorized hash_index over an (..., dim) int array."""
    dim = coords.shape[-1]
    acc = np.zeros(coords.shape[:-1], dtype=np.uint64)
    c = coords.astype(np.uint64)
    with np.errstate(over="ignore"):
        for i in range(dim):
            acc ^= c[..., i] * np.uint64(HASH_MULTIPLIERS[i])
    return (acc % np.uint64(table_size)).astype(np.int64)


def dense_index(coords: np.ndarray, resolution: int) -> np.ndarray:
    """Row-major linear index into a dense (res+1)^dim lattice."""
    dim = coords.shape[-1]
    stride = 1
    idx = np.zeros(coords.shape[:-1], dtype=np.int64)
    for i in range(dim):
        idx += coords[..., i].astype(np.int64) * stride
        stride *= resolution + 1
    return idx


def _corner_offsets(dim: int) -> np.ndarray:
    c = np.arange(1 << dim)
    return ((c[:, None] >> np.arange(dim)[None, :]) & 1).astype(np.int64)


class HashGridEncoding:
    """Trainable multi-resolution feature grid with analytic adjoints.

    Tables are exposed as :class:`ParamTensor` objects (one per level) so
    the trainer can register, freeze, and update them like any MLP weight.
    """

    def __init__(
        self,
        config: GridConfig,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
        name: str = "grid",
    ):
        self.config = config
        self.name = name
        self.resolutions = [level_resolution(config, l) for l in range(config.levels)]
        self.level_mask = np.ones(config.levels, dtype=bool)
        self._dense = [level_is_dense(config, l) for l in range(config.levels)]
        self._offsets = _corner_offsets(config.input_dim)
        self._offsets_i32 = self._offsets.astype(np.int32)
        # d(weight)/d(frac) sign per corner and axis
        self._signs = np.where(self._offsets == 1, 1.0, -1.0).astype(dtype)
        if rng is None:
            rng = np.random.default_rng(0)
        self.tables: list[ParamTensor] = []
        for l in range(config.levels):
            entries = level_table_entries(config, l)
            init = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(entries, config.features_per_level))
            self.tables.append(ParamTensor(f"{name}.level{l:02d}", init.astype(dtype)))

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    @property
    def dtype(self):
        return self.tables[0].dtype

    def set_level_mask(self, mask: np.ndarray) -> None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.config.levels,):
            raise UsageError(f"level mask must have shape ({self.config.levels},)")
        self.level_mask = mask.copy()

    def set_active_levels(self, n_active: int) -> None:
        """Activate the first ``n_active`` levels and mask the rest."""
        n = int(np.clip(n_active, 0, self.config.levels))
        mask = np.zeros(self.config.levels, dtype=bool)
        mask[:n] = True
        self.level_mask = mask

    def _normalize(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise UsageError(f"expected points of shape (P, {cfg.input_dim}), got {x.shape}")
        dmin = np.asarray(cfg.domain_min)
        dmax = np.asarray(cfg.domain_max)
        u = (x - dmin) / (dmax - dmin)
        if np.any(u < -DOMAIN_SPILL) or np.any(u > 1.0 + DOMAIN_SPILL):
            bad = np.argmax(np.maximum(-u, u - 1.0).max(axis=1))
            raise DomainError(f"point {x[bad]} lies outside the grid domain")
        inside = (u >= 0.0) & (u <= 1.0)
        return np.clip(u, 0.0, 1.0), inside

    def _axis_weights(self, frac: np.ndarray) -> list[np.ndarray]:
        """Per-axis corner weights, each (P, C): frac or 1-frac by bit."""
        out = []
        for a in range(self.config.input_dim):
            pair = np.stack([1.0 - frac[:, a], frac[:, a]], axis=1)  # (P, 2)
            out.append(pair[:, self._offsets[:, a]])
        return out

    @staticmethod
    def _excluding_products(was: list[np.ndarray]) -> list[np.ndarray]:
        """Products of all axis weights except one, per axis."""
        d = len(was)
        if d == 3:
            return [was[1] * was[2], was[0] * was[2], was[0] * was[1]]
        p01 = was[0] * was[1]
        p23 = was[2] * was[3]
        return [was[1] * p23, was[0] * p23, p01 * was[3], p01 * was[2]]

    def _level_geometry(self, u: np.ndarray, l: int):
        n = self.resolutions[l]
        g = u * n
        base = np.floor(g)
        np.clip(base, 0, n - 1, out=base)
        frac = g - base
        corners = base.astype(np.int32)[:, None, :] + self._offsets_i32[None, :, :]
        if self._dense[l]:
            idx = dense_index(corners, n)
        else:
            idx = _hash_many(corners, self.config.table_size)
        return idx, frac, n

    def encode(self, x: np.ndarray, want_cache: bool = False):
        """Interpolate features at points ``x``; returns (P, L*F) array.

        With ``want_cache=True`` also returns the cache consumed by
        :meth:`backward` (corner indices and fractional coordinates per
        level; weights and gathers are recomputed in the adjoint).
        """
        cfg = self.config
        u64, inside = self._normalize(x)
        u = u64.astype(self.dtype)
        P = u.shape[0]
        F = cfg.features_per_level
        out = np.zeros((P, cfg.levels * F), dtype=self.dtype)
        caches = []
        for l in range(cfg.levels):
            if not self.level_mask[l]:
                caches.append(None)
                continue
            idx, frac, n = self._level_geometry(u, l)
            was = self._axis_weights(frac)
            w = was[0] * was[1] * was[2]
            if cfg.input_dim == 4:
                w = w * was[3]
            feats = self.tables[l].value[idx]  # (P,C,F)
            out[:, l * F : (l + 1) * F] = np.matmul(w[:, None, :], feats)[:, 0, :]
            if want_cache:
                caches.append((idx, frac, n))
        if want_cache:
            return out, {"caches": caches, "inside": inside, "P": P}
        return out

    def backward(
        self, cache, upstream: np.ndarray, accumulate: bool = True, want_dx: bool = True
    ):
        """Adjoint of :meth:`encode`.

        Returns the gradient with respect to the input points, shape
        (P, dim). Table gradients scatter-add into ``tables[l].grad``
        unless ``accumulate`` is False, in which case they are returned as
        a list of fresh arrays instead. Frozen tables skip the scatter
        entirely, and ``want_dx=False`` skips the input-gradient work.
        """
        cfg = self.config
        F = cfg.features_per_level
        P = cache["P"]
        if upstream.shape != (P, cfg.levels * F):
            raise UsageError(
                f"upstream shape {upstream.shape} != ({P}, {cfg.levels * F})"
            )
        dmin = np.asarray(cfg.domain_min)
        dmax = np.asarray(cfg.domain_max)
        span = (dmax - dmin).astype(np.float64)
        dx = np.zeros((P, cfg.input_dim), dtype=self.dtype)
        table_grads = [] if not accumulate else None
        for l in range(cfg.levels):
            c = cache["caches"][l]
            if c is None:
                if table_grads is not None:
                    table_grads.append(np.zeros_like(self.tables[l].value))
                continue
            idx, frac, n = c
            table = self.tables[l]
            up = upstream[:, l * F : (l + 1) * F]  # (P,F)
            was = self._axis_weights(frac)
            w = was[0] * was[1] * was[2]
            if cfg.input_dim == 4:
                w = w * was[3]
            # Table gradient: scatter w * upstream into touched entries.
            if not (accumulate and table.frozen):
                entries = table.value.shape[0]
                flat_idx = idx.reshape(-1)
                tg = np.empty((entries, F), dtype=self.dtype)
                for f in range(F):
                    tg[:, f] = np.bincount(
                        flat_idx, weights=(w * up[:, f, None]).reshape(-1), minlength=entries
                    )
                if accumulate:
                    table.accumulate(tg)
                else:
                    table_grads.append(tg)
            if want_dx:
                # Input gradient: d(out)/dx through the interpolation weights.
                feats = table.value[idx]  # (P,C,F)
                s = np.matmul(feats, up[:, :, None])[:, :, 0]  # (P,C)
                excl = self._excluding_products(was)
                for a in range(cfg.input_dim):
                    dfrac = np.einsum("pc,pc->p", s, self._signs[:, a][None, :] * excl[a])
                    dx[:, a] += (dfrac * (n / span[a])).astype(self.dtype)
        if want_dx:
            dx *= cache["inside"].astype(self.dtype)
        if accumulate:
            return dx
        return dx, table_grads


def encode(grid: HashGridEncoding, x: np.ndarray) -> np.ndarray:
    """Functional alias for :meth:`HashGridEncoding.encode`."""
    return grid.encode(x)


def encode_grad(grid: HashGridEncoding, x: np.ndarray, upstream: np.ndarray):
    """Analytic adjoint of :func:`encode` as a pure function.

    Returns ``(dx, table_grads)`` without touching the grid's gradient
    buffers.
    """
    _, cache = grid.encode(x, want_cache=True)
    return grid.backward(cache, upstream, accumulate=False)
