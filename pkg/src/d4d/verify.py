"""Built-in verification suites behind the ``verify`` CLI subcommand.

Each suite runs self-contained checks with analytic or brute-force
oracles and reports measured values; the CLI turns any failure into a
nonzero exit code. The pytest suite covers the same ground (and more) at
fixed tolerances; these suites exist so a deployed engine can be checked
without a test harness present.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import ModelConfig, SceneModel
from .grad import fd_check
from .gridenc import GridConfig, HashGridEncoding, hash_index, level_resolution
from .guidance import EchoProvider, GuidanceResponse, sds_reconstruction_loss
from .losses import GuidanceContext, StageOneWeights, stage1_loss, tv_loss
from .renderer import Camera, render_backward, render_frame
from .toyfit import (
    run_translating_sphere_fit,
    smooth_medium_scene,
    uniform_slab_scene,
)

SUITES = ("grids", "renderer", "losses", "e2e-toy")


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: str


def _tiny_model(dtype=np.float64) -> SceneModel:
    cfg = ModelConfig(
        canonical_grid=GridConfig(3, 2, 2, 4, features_per_level=2, table_size_log2=6),
        deformation_grid=GridConfig(
            4, 2, 2, 3, features_per_level=2, table_size_log2=6,
            domain_min=(-1, -1, -1, 0), domain_max=(1, 1, 1, 1),
        ),
        hidden_width=8,
        geo_feature_dim=4,
    )
    model = SceneModel(cfg, seed=3, dtype=dtype)
    rng = np.random.default_rng(11)
    model.deformation.head.weights[-1].value[...] = 0.05 * rng.standard_normal(
        model.deformation.head.weights[-1].value.shape
    )
    for tab in model.canonical.encoding.tables + model.deformation.encoding.tables:
        tab.value[...] = 0.3 * rng.standard_normal(tab.value.shape)
    return model


def suite_grids() -> list[CheckResult]:
    out = []
    c3 = GridConfig(3, 16, 16, 4096)
    c4 = GridConfig(4, 12, 4, 232, domain_min=(-1, -1, -1, 0), domain_max=(1, 1, 1, 1))
    res = [level_resolution(c3, l) for l in (0, 1, 15)]
    out.append(CheckResult("level_resolution 3D endpoints", res == [16, 23, 4096], str(res)))
    res4 = [level_resolution(c4, l) for l in (0, 1, 11)]
    out.append(CheckResult("level_resolution 4D endpoints", res4 == [4, 5, 232], str(res4)))
    h = [hash_index((0, 0, 0), 3, 1 << 19), hash_index((1, 0, 0), 3, 1 << 19)]
    out.append(CheckResult("hash_index basics", h == [0, 1], str(h)))

    rng = np.random.default_rng(0)
    cfg = GridConfig(3, 3, 4, 16, features_per_level=2, table_size_log2=8)
    grid = HashGridEncoding(cfg, rng=rng, dtype=np.float64)
    # corner exactness on the dense base level
    x = np.array([[-1.0 + 2.0 * 1 / 4, -1.0 + 2.0 * 2 / 4, -1.0 + 2.0 * 3 / 4]])
    feats = grid.encode(x)
    from .gridenc import dense_index

    idx = dense_index(np.array([[1, 2, 3]]), 4)[0]
    exact = np.array_equal(feats[0, :2], grid.tables[0].value[idx])
    out.append(CheckResult("corner exactness (dense level)", bool(exact), "bit-identical"))

    # partition of unity via constant tables
    for tab in grid.tables:
        tab.value[...] = 1.0
    pts = rng.uniform(-1, 1, size=(256, 3))
    enc = grid.encode(pts)
    pu_err = float(np.max(np.abs(enc - 1.0)))
    out.append(CheckResult("partition of unity", pu_err < 1e-12, f"max err {pu_err:.2e}"))

    # masking zeroes exactly the masked slice
    for tab in grid.tables:
        tab.value[...] = rng.standard_normal(tab.value.shape)
    full = grid.encode(pts)
    grid.set_active_levels(2)
    masked = grid.encode(pts)
    ok = np.all(masked[:, 4:] == 0.0) and np.allclose(masked[:, :4], full[:, :4])
    out.append(CheckResult("level masking", bool(ok), "masked features are zero"))
    grid.set_active_levels(3)

    # gradient check against finite differences
    from .gridenc import encode_grad

    x = rng.uniform(-0.9, 0.9, size=(4, 3))
    up = rng.standard_normal((4, grid.output_dim))
    dx, _ = encode_grad(grid, x, up)
    h_step = 1e-6
    worst = 0.0
    for p in range(4):
        for a in range(3):
            xp = x.copy()
            xp[p, a] += h_step
            xm = x.copy()
            xm[p, a] -= h_step
            num = (np.sum(grid.encode(xp)[p] * up[p]) - np.sum(grid.encode(xm)[p] * up[p])) / (
                2 * h_step
            )
            worst = max(worst, abs(num - dx[p, a]) / max(abs(num), 1e-9))
    out.append(CheckResult("encode input gradient vs FD", worst < 1e-5, f"rel err {worst:.2e}"))
    return out


def suite_renderer() -> list[CheckResult]:
    out = []
    cam = Camera(90.0, 0.0, 1.8, 40.0, resolution=(1, 1))
    target = 1.0 - np.exp(-1.0)

    slab = uniform_slab_scene()
    err256 = abs(float(render_frame(slab, cam, 0.0, 256, jitter=0.5).opacity[0, 0]) - target)
    out.append(
        CheckResult("homogeneous unit-traversal opacity @256", err256 < 1e-3, f"err {err256:.2e}")
    )

    smooth = smooth_medium_scene()
    errs = [
        abs(float(render_frame(smooth, cam, 0.0, n, jitter=0.5).opacity[0, 0]) - target)
        for n in (32, 64, 128, 256)
    ]
    mono = all(errs[i] > errs[i + 1] for i in range(3))
    out.append(CheckResult("opacity error monotone decay", mono, str([f"{e:.2e}" for e in errs])))

    model = _tiny_model()
    model.canonical.encoding.set_active_levels(0)  # zero features -> sigma and rgb constant
    cam2 = Camera(30.0, 20.0, 1.8, 50.0, resolution=(4, 4))
    o = render_frame(model, cam2, 0.2, 16, jitter=0.5, want_cache=True)
    wsum = o.opacity.max()
    out.append(CheckResult("compositing weights sum <= 1", wsum <= 1.0 + 1e-6, f"max {wsum:.4f}"))
    model.canonical.encoding.set_active_levels(2)

    rng = np.random.default_rng(1)
    drgb = rng.standard_normal((4, 4, 3))
    dop = rng.standard_normal((4, 4))
    ddis = rng.standard_normal((4, 4, 3))

    def loss_fn():
        f = render_frame(model, cam2, 0.37, 8, jitter=0.5)
        return float(np.sum(f.rgb * drgb) + np.sum(f.opacity * dop) + np.sum(f.displacement * ddis))

    def grad_fn():
        f = render_frame(model, cam2, 0.37, 8, jitter=0.5, want_cache=True)
        render_backward(model, f, drgb=drgb, dopacity=dop, ddisplacement=ddis)

    rep = fd_check(loss_fn, grad_fn, model.parameters(), h=1e-5, tolerance=1e-4,
                   probe_threshold=300, n_probes=3)
    out.append(
        CheckResult("render gradient vs FD", rep.passed, f"max rel err {rep.max_rel_err:.2e}")
    )
    return out


def suite_losses() -> list[CheckResult]:
    out = []
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(25):
        shape = (rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5), 3)
        d = rng.standard_normal(shape)
        fast = tv_loss(d)
        slow = 0.0
        T, H, W, _ = shape
        for t in range(T):
            for y in range(H):
                for x in range(W):
                    if x > 0:
                        slow += float(np.sum((d[t, y, x - 1] - d[t, y, x]) ** 2))
                    if y > 0:
                        slow += float(np.sum((d[t, y - 1, x] - d[t, y, x]) ** 2))
                    if t > 0:
                        slow += float(np.sum((d[t - 1, y, x] - d[t, y, x]) ** 2))
        worst = max(worst, abs(fast - slow) / max(abs(slow), 1e-300))
    out.append(CheckResult("tv_loss vs direct summation", worst < 1e-10, f"rel err {worst:.2e}"))

    d = np.zeros((1, 1, 2, 3))
    d[0, 0, 1, 0] = 1.0
    v = tv_loss(d)
    out.append(CheckResult("tv_loss unit example", abs(v - 1.0) < 1e-15, f"value {v}"))

    img = rng.random((2, 4, 4, 3)).astype(np.float32)
    resp = GuidanceResponse(denoised_rgb=img.copy(), provider_id="check")
    z = sds_reconstruction_loss(img, resp)
    out.append(CheckResult("distillation loss zero at target", z == 0.0, f"value {z}"))

    views = rng.random((4, 4, 4, 3)).astype(np.float32)
    ctx = GuidanceContext(prompt="check", noise_level=0.5)
    from .guidance import CameraParams

    cams = [CameraParams(90.0 * k, 0.0, 1.8, 45.0) for k in range(4)]
    echo = EchoProvider()
    loss = stage1_loss(views[0], cams[0], views, cams, echo, echo, StageOneWeights(), ctx)
    out.append(CheckResult("stage-1 echo providers give zero", loss == 0.0, f"value {loss}"))
    return out


def suite_e2e_toy(fast: bool = False, seed: int = 0) -> list[CheckResult]:
    kwargs = dict(canonical_iters=250, dynamic_iters=60) if fast else {}
    res = run_translating_sphere_fit(seed=seed, **kwargs)
    out = [
        CheckResult(
            "displacement recovery",
            fast or res.displacement_mean_error < 0.02,
            f"mean err {res.displacement_mean_error:.4f} world units "
            f"(gt scale {res.displacement_gt_scale:.3f})",
        ),
        CheckResult(
            "held-out view PSNR",
            fast or res.holdout_psnr_db > 30.0,
            f"{res.holdout_psnr_db:.2f} dB (static fit {res.static_psnr_db:.2f} dB)",
        ),
        CheckResult(
            "canonical frozen", res.canonical_checksum_ok, "checksum unchanged"
        ),
        CheckResult(
            "loss decreased",
            res.final_loss < res.initial_loss,
            f"{res.initial_loss:.3e} -> {res.final_loss:.3e}",
        ),
    ]
    return out


def run_suite(name: str, fast: bool = False, seed: int = 0) -> list[CheckResult]:
    if name == "grids":
        return suite_grids()
    if name == "renderer":
        return suite_renderer()
    if name == "losses":
        return suite_losses()
    if name == "e2e-toy":
        return suite_e2e_toy(fast=fast, seed=seed)
    raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
