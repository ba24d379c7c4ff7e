"""Neural fields: canonical density/color, 4D deformation, and background.

The canonical field is a 3D hash grid followed by two shallow heads
(density and view-independent color). The deformation field is a 4D hash
grid over (x, y, z, t) followed by a deeper head that outputs a world-space
displacement; its last layer is zero-initialized so a fresh model is an
exact identity warp. The background is an MLP over the unit view
direction only, i.e. an environment infinitely far from the camera.

:class:`SceneModel` bundles the three fields with a named parameter
registry and per-group freeze flags; the dynamic training stage freezes
the canonical and background groups and updates only the deformation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DomainError, UsageError
from .grad import ParamTensor
from .gridenc import GridConfig, HashGridEncoding

SCENE_BOUND = 1.0  # canonical scene box is [-1, 1]^3

# Raw-density bias so a zero-initialized network starts near transparent.
DENSITY_BIAS_INIT = -1.0

GEO_FEATURE_DIM = 15


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def softplus_grad(z: np.ndarray) -> np.ndarray:
    return expit(z)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture defaults for the full scene model."""

    canonical_grid: GridConfig = field(
        default_factory=lambda: GridConfig(input_dim=3, levels=16, base_res=16, max_res=4096)
    )
    deformation_grid: GridConfig = field(
        default_factory=lambda: GridConfig(
            input_dim=4,
            levels=12,
            base_res=4,
            max_res=232,
            domain_min=(-1.0, -1.0, -1.0, 0.0),
            domain_max=(1.0, 1.0, 1.0, 1.0),
        )
    )
    density_hidden_layers: int = 1
    color_hidden_layers: int = 1
    deformation_hidden_layers: int = 4
    background_hidden_layers: int = 3
    hidden_width: int = 64
    geo_feature_dim: int = GEO_FEATURE_DIM


class MLP:
    """Fully-connected net with tanh hidden activations and linear output.

    Forward returns a cache of layer inputs; backward consumes it,
    accumulates weight gradients (unless the tensors are frozen), and
    returns the gradient with respect to the input.
    """

    def __init__(
        self,
        name: str,
        dims: list[int],
        rng: np.random.Generator,
        dtype=np.float32,
        zero_last: bool = False,
        hidden_bias_scale: float = 0.0,
    ):
        self.name = name
        self.weights: list[ParamTensor] = []
        self.biases: list[ParamTensor] = []
        n_layers = len(dims) - 1
        for i in range(n_layers):
            fan_in, fan_out = dims[i], dims[i + 1]
            if zero_last and i == n_layers - 1:
                w = np.zeros((fan_in, fan_out))
            else:
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            if hidden_bias_scale > 0 and i < n_layers - 1:
                # Near-zero grid features would otherwise leave every hidden
                # unit at tanh(0) and throttle early gradient flow; random
                # biases keep activations O(1) from the first step.
                b = rng.uniform(-hidden_bias_scale, hidden_bias_scale, size=fan_out)
            else:
                b = np.zeros(fan_out)
            self.weights.append(ParamTensor(f"{name}.w{i}", w.astype(dtype)))
            self.biases.append(ParamTensor(f"{name}.b{i}", b.astype(dtype)))

    @property
    def params(self) -> list[ParamTensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def forward(self, x: np.ndarray, want_cache: bool = False):
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.value + b.value
            h = z if i == last else np.tanh(z)
            if want_cache:
                acts.append(h)
        if want_cache:
            return h, acts
        return h

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        acts = cache
        last = len(self.weights) - 1
        dz = dy
        for i in range(last, -1, -1):
            if i != last:
                # acts[i+1] holds tanh(z_i) for hidden layers
                dz = dz * (1.0 - acts[i + 1] ** 2)
            if not self.weights[i].frozen:
                self.weights[i].accumulate(acts[i].T @ dz)
            if not self.biases[i].frozen:
                self.biases[i].accumulate(dz.sum(axis=0))
            dz = dz @ self.weights[i].value.T
        return dz

    def zero_all(self) -> None:
        """Zero every weight and bias (used by constant-output tests)."""
        for p in self.params:
            p.value[...] = 0


class CanonicalField:
    """Time-independent radiance field: density sigma(x) and color c(x)."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.encoding = HashGridEncoding(
            config.canonical_grid, rng=rng, dtype=dtype, name="canonical.grid"
        )
        w = config.hidden_width
        enc_dim = self.encoding.output_dim
        geo = config.geo_feature_dim
        self.density_mlp = MLP(
            "canonical.density",
            [enc_dim] + [w] * config.density_hidden_layers + [1 + geo],
            rng,
            dtype,
        )
        self.color_mlp = MLP(
            "canonical.color", [geo] + [w] * config.color_hidden_layers + [3], rng, dtype
        )

    @property
    def params(self) -> list[ParamTensor]:
        return (
            [t for t in self.encoding.tables]
            + self.density_mlp.params
            + self.color_mlp.params
        )

    def _check_bounds(self, x: np.ndarray) -> None:
        if np.any(np.abs(x) > SCENE_BOUND + 1e-6):
            raise DomainError("canonical query outside the scene bounds [-1, 1]^3")

    def query(self, x: np.ndarray, want_cache: bool = False):
        """Density and color at points ``x`` (P, 3)."""
        x = np.asarray(x)
        self._check_bounds(x)
        feats, enc_cache = self.encoding.encode(x, want_cache=True)
        raw, dcache = self.density_mlp.forward(feats, want_cache=True)
        raw_sigma = raw[:, 0] + DENSITY_BIAS_INIT
        sigma = softplus(raw_sigma)
        geo = raw[:, 1:]
        logits, ccache = self.color_mlp.forward(geo, want_cache=True)
        rgb = expit(logits)
        if want_cache:
            cache = {
                "enc": enc_cache,
                "density": dcache,
                "color": ccache,
                "raw_sigma": raw_sigma,
                "rgb": rgb,
            }
            return sigma, rgb, cache
        return sigma, rgb

    def backward(
        self, cache, dsigma: np.ndarray, drgb: np.ndarray, want_dx: bool = True
    ) -> np.ndarray:
        """Adjoint of :meth:`query`; returns gradient w.r.t. the points."""
        dlogits = drgb * cache["rgb"] * (1.0 - cache["rgb"])
        dgeo = self.color_mlp.backward(cache["color"], dlogits)
        draw = np.concatenate(
            [(dsigma * softplus_grad(cache["raw_sigma"]))[:, None], dgeo], axis=1
        )
        dfeats = self.density_mlp.backward(cache["density"], draw)
        return self.encoding.backward(cache["enc"], dfeats, want_dx=want_dx)


def query_canonical(field: CanonicalField, x_c: np.ndarray):
    """Functional alias returning (density, rgb) at canonical points."""
    return field.query(np.atleast_2d(x_c))


@dataclass(frozen=True)
class LevelSchedule:
    """Progressive activation of grid levels during the dynamic stage."""

    initial_levels: int = 4
    step_every: int = 500

    def active_at(self, iteration: int, total_levels: int) -> int:
        if iteration < 0:
            raise UsageError("iteration must be >= 0")
        return min(total_levels, self.initial_levels + iteration // self.step_every)


class DeformationField:
    """4D warp d(x, t) mapping deformed space to canonical space."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.encoding = HashGridEncoding(
            config.deformation_grid, rng=rng, dtype=dtype, name="deformation.grid"
        )
        w = config.hidden_width
        self.head = MLP(
            "deformation.head",
            [self.encoding.output_dim] + [w] * config.deformation_hidden_layers + [3],
            rng,
            dtype,
            zero_last=True,
            hidden_bias_scale=0.3,
        )

    @property
    def params(self) -> list[ParamTensor]:
        return [t for t in self.encoding.tables] + self.head.params

    def set_active_levels(self, iteration: int, schedule: LevelSchedule) -> int:
        """Apply the progressive level schedule; returns the active count."""
        n = schedule.active_at(iteration, self.config.deformation_grid.levels)
        self.encoding.set_active_levels(n)
        return n

    def deform(self, x_d: np.ndarray, t: float, want_cache: bool = False):
        """Warp deformed-space points to canonical space.

        Returns ``(x_c, d)`` with x_c = clamp(x_d + d) to the scene box;
        the clamp mask is recorded so gradients are zeroed where clamping
        is active.
        """
        x_d = np.asarray(x_d)
        if np.any(np.abs(x_d) > SCENE_BOUND + 1e-6):
            raise DomainError("deformed-space query outside the scene bounds")
        if not 0.0 <= float(t) <= 1.0:
            raise DomainError(f"time {t} outside [0, 1]")
        P = x_d.shape[0]
        xt = np.concatenate(
            [x_d, np.full((P, 1), float(t), dtype=x_d.dtype)], axis=1
        )
        feats, enc_cache = self.encoding.encode(xt, want_cache=True)
        d, head_cache = self.head.forward(feats, want_cache=True)
        x_c_raw = x_d + d
        x_c = np.clip(x_c_raw, -SCENE_BOUND, SCENE_BOUND)
        unclamped = (np.abs(x_c_raw) <= SCENE_BOUND).astype(d.dtype)
        if want_cache:
            return x_c, d, {"enc": enc_cache, "head": head_cache, "unclamped": unclamped}
        return x_c, d

    def backward(self, cache, dx_c: np.ndarray, dd_direct: np.ndarray):
        """Adjoint of :meth:`deform`.

        ``dx_c`` is the upstream gradient on the clamped canonical points,
        ``dd_direct`` the gradient reaching the displacement output
        directly (e.g. from a rendered displacement map). Returns the
        gradient with respect to the (x_d, t) inputs, shape (P, 4); the
        x_d part excludes the identity passthrough of x_c = x_d + d.
        """
        dd = dd_direct + dx_c * cache["unclamped"]
        dfeats = self.head.backward(cache["head"], dd)
        return self.encoding.backward(cache["enc"], dfeats)


def deform(field: DeformationField, x_d: np.ndarray, t: float):
    """Functional alias returning (x_c, d)."""
    return field.deform(np.atleast_2d(x_d), t)


class BackgroundShader:
    """View-direction environment color for rays that miss the scene."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        w = config.hidden_width
        self.mlp = MLP(
            "background.net", [3] + [w] * config.background_hidden_layers + [3], rng, dtype
        )

    @property
    def params(self) -> list[ParamTensor]:
        return self.mlp.params

    def shade(self, dirs: np.ndarray, want_cache: bool = False):
        dirs = np.asarray(dirs)
        norms = np.linalg.norm(dirs, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise UsageError("background directions must be unit vectors")
        logits, cache = self.mlp.forward(dirs, want_cache=True)
        rgb = expit(logits)
        if want_cache:
            return rgb, {"mlp": cache, "rgb": rgb}
        return rgb

    def backward(self, cache, drgb: np.ndarray) -> None:
        dlogits = drgb * cache["rgb"] * (1.0 - cache["rgb"])
        self.mlp.backward(cache["mlp"], dlogits)


def shade_background(bg: BackgroundShader, direction: np.ndarray) -> np.ndarray:
    """Functional alias; accepts a single unit direction or a batch."""
    return bg.shade(np.atleast_2d(direction))


PARAM_GROUPS = ("canonical", "deformation", "background")


class SceneModel:
    """Canonical field + deformation field + background with freeze masks."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config if config is not None else ModelConfig()
        self.dtype = np.dtype(dtype)
        self.deformation_enabled = True
        rng = np.random.default_rng(seed)
        self.canonical = CanonicalField(self.config, rng, dtype)
        self.deformation = DeformationField(self.config, rng, dtype)
        self.background = BackgroundShader(self.config, rng, dtype)
        self._groups: dict[str, list[ParamTensor]] = {
            "canonical": self.canonical.params,
            "deformation": self.deformation.params,
            "background": self.background.params,
        }
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise UsageError("duplicate parameter names in registry")

    # ---- registry ----------------------------------------------------

    def parameters(self) -> list[ParamTensor]:
        out = []
        for g in PARAM_GROUPS:
            out.extend(self._groups[g])
        return out

    def group(self, name: str) -> list[ParamTensor]:
        if name not in self._groups:
            raise UsageError(f"unknown parameter group {name!r}; have {PARAM_GROUPS}")
        return self._groups[name]

    def freeze_group(self, name: str) -> None:
        for p in self.group(name):
            p.frozen = True
            p.zero_grad()

    def thaw_group(self, name: str) -> None:
        for p in self.group(name):
            p.frozen = False

    def frozen_groups(self) -> dict[str, bool]:
        return {g: all(p.frozen for p in self._groups[g]) for g in PARAM_GROUPS}

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def group_checksum(self, name: str) -> str:
        """SHA-256 over the group's parameter bytes, in registry order."""
        h = hashlib.sha256()
        for p in self.group(name):
            h.update(np.ascontiguousarray(p.value).tobytes())
        return h.hexdigest()

    # ---- field interface used by the renderer -------------------------

    def deform_points(self, x_d: np.ndarray, t: float, want_cache: bool = False):
        if not self.deformation_enabled:
            # Static rendering path: exact identity warp, no 4D grid work.
            d = np.zeros_like(x_d)
            return (x_d, d, None) if want_cache else (x_d, d)
        return self.deformation.deform(x_d, t, want_cache=want_cache)

    def deform_backward(self, cache, dx_c, dd_direct):
        if cache is None:
            return None
        return self.deformation.backward(cache, dx_c, dd_direct)

    def query_canonical_points(self, x_c: np.ndarray, want_cache: bool = False):
        return self.canonical.query(x_c, want_cache=want_cache)

    def canonical_backward(self, cache, dsigma, drgb, want_dx: bool = True):
        return self.canonical.backward(cache, dsigma, drgb, want_dx=want_dx)

    def shade_background_dirs(self, dirs: np.ndarray, want_cache: bool = False):
        return self.background.shade(dirs, want_cache=want_cache)

    def background_backward(self, cache, drgb):
        self.background.backward(cache, drgb)
