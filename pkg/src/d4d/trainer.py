"""Two-stage optimization loops, decoupled-weight-decay Adam, checkpoints.

The static stage optimizes the canonical field and background under the
combined 2D/multi-view objective; the dynamic stage freezes them and
optimizes only the deformation field under video guidance with the
displacement total-variation regularizer and the progressive level
schedule. A single seeded generator drives every random draw in a step,
and its state serializes into checkpoints, so a resumed run reproduces an
uninterrupted one bit for bit when providers are local.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig, config_hash
from .errors import (
    CheckpointFormatError,
    CheckpointHashError,
    CheckpointLengthError,
    NonFiniteLossError,
    ProviderError,
    UsageError,
)
from .fields import SceneModel
from .grad import ParamTensor, Tape, clip_grad_norm
from .guidance import CameraParams, GuidanceProvider, sample_noise_level
from .losses import GuidanceContext, reference_view_loss, stage1_loss, stage2_loss
from .renderer import (
    Camera,
    bilinear_resize,
    bilinear_resize_backward,
    four_view_cameras,
    render_backward,
    render_frame,
    render_video,
    sample_camera,
    sample_time_window,
)

CHECKPOINT_MAGIC = b"D4DCKPT1"
CHECKPOINT_VERSION = 1

_DTYPE_TAGS = {"f32le": "<f4", "f64le": "<f8"}


def _dtype_tag(dtype) -> str:
    if np.dtype(dtype) == np.float32:
        return "f32le"
    if np.dtype(dtype) == np.float64:
        return "f64le"
    raise UsageError(f"unsupported checkpoint dtype {dtype}")


# ---- optimizer ------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @staticmethod
    def for_params(params: list[ParamTensor]) -> "AdamState":
        st = AdamState()
        for p in params:
            st.m[p.name] = np.zeros_like(p.value)
            st.v[p.name] = np.zeros_like(p.value)
        return st


def lr_for_param(p: ParamTensor, lr_mlp: float, lr_grid: float) -> float:
    """Hash-grid tables train faster than the MLP heads."""
    return lr_grid if ".grid." in p.name else lr_mlp


def adam_step(params: list[ParamTensor], state: AdamState, opt) -> None:
    """One decoupled-weight-decay Adam update with bias correction.

    Frozen tensors are untouched (no moment update, no decay). Raises on
    non-finite gradients, naming the offending tensor.
    """
    state.step += 1
    t = state.step
    b1, b2 = opt.betas
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        if p.frozen:
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NonFiniteLossError(f"non-finite gradient in tensor {p.name!r}")
        lr = lr_for_param(p, opt.lr_mlp, opt.lr_grid)
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        denom = np.sqrt(v / c2) + opt.eps
        p.value -= lr * (m / c1) / denom
        if opt.weight_decay:
            p.value -= lr * opt.weight_decay * p.value


# ---- checkpoints -----------------------------------------------------------


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_json(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def save_checkpoint(
    path,
    model: SceneModel,
    stage: str,
    iteration: int,
    adam_state: AdamState,
    rng: np.random.Generator,
    cfg_hash: str,
) -> None:
    """Serialize parameters, moments, rng state, and provenance."""
    tensors = []
    payload = []
    for p in model.parameters():
        tag = _dtype_tag(p.dtype)
        tensors.append(
            {
                "name": p.name,
                "dtype": tag,
                "shape": list(p.shape),
                "frozen": bool(p.frozen),
            }
        )
        np_tag = _DTYPE_TAGS[tag]
        payload.append(np.ascontiguousarray(p.value, dtype=np_tag).tobytes())
        payload.append(np.ascontiguousarray(adam_state.m[p.name], dtype=np_tag).tobytes())
        payload.append(np.ascontiguousarray(adam_state.v[p.name], dtype=np_tag).tobytes())
    header = {
        "stage": stage,
        "iteration": int(iteration),
        "config_hash": cfg_hash,
        "adam_step": int(adam_state.step),
        "rng_state": _rng_state_to_json(rng),
        "tensors": tensors,
        "layout": "value,m,v",
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hdr)))
        fh.write(hdr)
        for chunk in payload:
            fh.write(chunk)


@dataclass
class LoadedCheckpoint:
    stage: str
    iteration: int
    adam_state: AdamState
    rng: np.random.Generator
    config_hash: str


def load_checkpoint(
    path, model: SceneModel, expect_hash: str | None = None, force: bool = False
) -> LoadedCheckpoint:
    """Restore a checkpoint into ``model`` and return the training state.

    The file is fully parsed and validated before any model mutation, so a
    truncated or corrupt checkpoint never leaves a half-loaded model.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if len(blob) < 16 + hlen:
        raise CheckpointLengthError("checkpoint header truncated")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"malformed checkpoint header: {exc}") from exc
    if expect_hash is not None and header["config_hash"] != expect_hash and not force:
        raise CheckpointHashError(
            "checkpoint was written under a different config "
            f"({header['config_hash'][:12]}... != {expect_hash[:12]}...); "
            "pass force=True to load anyway"
        )
    params = {p.name: p for p in model.parameters()}
    names = [t["name"] for t in header["tensors"]]
    if set(names) != set(params):
        missing = set(params) - set(names)
        extra = set(names) - set(params)
        raise CheckpointFormatError(
            f"tensor registry mismatch (missing={sorted(missing)[:3]}, extra={sorted(extra)[:3]})"
        )
    offset = 16 + hlen
    staged = []
    for meta in header["tensors"]:
        p = params[meta["name"]]
        shape = tuple(meta["shape"])
        if shape != p.shape:
            raise CheckpointFormatError(
                f"tensor {meta['name']!r} shape {shape} != model shape {p.shape}"
            )
        np_tag = _DTYPE_TAGS.get(meta["dtype"])
        if np_tag is None:
            raise CheckpointFormatError(f"unknown tensor dtype {meta['dtype']!r}")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(np_tag).itemsize
        arrays = []
        for _ in range(3):  # value, m, v
            if len(blob) < offset + nbytes:
                raise CheckpointLengthError(
                    f"checkpoint payload truncated in tensor {meta['name']!r}"
                )
            arrays.append(
                np.frombuffer(blob, dtype=np_tag, count=count, offset=offset)
                .reshape(shape)
                .astype(p.dtype)
            )
            offset += nbytes
        staged.append((p, meta, arrays))
    adam = AdamState(step=int(header["adam_step"]))
    for p, meta, (value, m, v) in staged:
        p.value[...] = value
        p.frozen = bool(meta["frozen"])
        adam.m[p.name] = m.copy()
        adam.v[p.name] = v.copy()
    return LoadedCheckpoint(
        stage=str(header["stage"]),
        iteration=int(header["iteration"]),
        adam_state=adam,
        rng=_rng_from_json(header["rng_state"]),
        config_hash=str(header["config_hash"]),
    )


# ---- shared loop machinery -------------------------------------------------


class MetricsLog:
    """Per-iteration metrics, optionally mirrored to line-delimited JSON."""

    def __init__(self, path=None):
        self.rows: list[dict] = []
        self._fh = open(path, "a", encoding="utf-8") if path is not None else None

    def log(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh is not None:
            self._fh.write(json.dumps(row, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _camera_params(cam: Camera) -> CameraParams:
    return CameraParams(cam.azimuth_deg, cam.elevation_deg, cam.radius, cam.fov_y_deg)


def _resize_with_grad(img, size_wh):
    """Resize (H, W, C) to (w, h); identity short-circuit keeps toy runs exact."""
    w, h = size_wh
    if img.shape[0] == h and img.shape[1] == w:
        return img, None
    return bilinear_resize(img, (h, w), want_cache=True)


def _resize_grad_back(cache, grad):
    if cache is None:
        return grad
    return bilinear_resize_backward(cache, grad)


@dataclass
class TrainResult:
    metrics: list[dict]
    checkpoint_path: str | None


@dataclass
class ReferenceView:
    """Image-conditioned supervision: a reference image, its foreground
    mask, and the camera it was captured from."""

    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) in [0, 1]
    camera: Camera


def _dump_abort(out_dir, model, stage, iteration, adam_state, rng, cfg_hash, reason):
    if out_dir is None:
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"abort_{stage}.ckpt"
    save_checkpoint(path, model, stage, iteration, adam_state, rng, cfg_hash)
    with open(out / f"abort_{stage}.json", "w", encoding="utf-8") as fh:
        json.dump({"iteration": iteration, "reason": reason}, fh)
    return str(path)


# ---- static stage -----------------------------------------------------------


def train_static(
    model: SceneModel,
    g2d: GuidanceProvider | None,
    g3d: GuidanceProvider | None,
    config: TrainConfig,
    out_dir=None,
    metrics_path=None,
    start_iteration: int = 0,
    adam_state: AdamState | None = None,
    rng: np.random.Generator | None = None,
    iterations: int | None = None,
    reference: ReferenceView | None = None,
) -> TrainResult:
    """Optimize the canonical scene under combined 2D/multi-view guidance.

    For image-conditioned runs, ``reference`` adds photometric and
    silhouette supervision of the reference view on every iteration.
    """
    cfg = config.static
    n_iters = cfg.iterations if iterations is None else iterations
    cfg_hash = config_hash(config)
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if adam_state is None:
        adam_state = AdamState.for_params(model.parameters())
    # The static stage trains the canonical scene only; the deformation
    # field stays at its identity initialization for stage two.
    model.thaw_group("canonical")
    model.thaw_group("background")
    model.freeze_group("deformation")
    model.deformation_enabled = False
    metrics = MetricsLog(metrics_path)
    trainable = model.parameters()

    try:
        for i in range(start_iteration, n_iters):
            t0 = time.perf_counter()
            phase = cfg.phase_at(i)
            res = (phase.render_res, phase.render_res)
            t_noise = sample_noise_level(cfg.noise, i, rng)
            ctx = GuidanceContext(
                prompt=config.prompt,
                noise_level=t_noise,
                seed=config.seed,
                guidance_scale_2d=config.scales.scale_2d,
                guidance_scale_multiview=config.scales.scale_multiview,
                guidance_scale_video=config.scales.scale_video,
            )
            tape = Tape()
            batch_loss = 0.0
            terms_acc: dict[str, float] = {}
            opacity_acc = 0.0
            for b in range(phase.batch):
                base = sample_camera(rng, "static_stage", config.camera, res)
                views = four_view_cameras(base)
                outs = [
                    render_frame(
                        model, v, 0.0, cfg.samples_per_ray, rng=rng, want_cache=True
                    )
                    for v in views
                ]
                if cfg.independent_2d_camera:
                    cam2d = sample_camera(rng, "static_stage", config.camera, res)
                    out2d = render_frame(
                        model, cam2d, 0.0, cfg.samples_per_ray, rng=rng, want_cache=True
                    )
                    idx2d = None
                else:
                    idx2d = i % 4
                    cam2d = views[idx2d]
                    out2d = outs[idx2d]
                up2d, c2d = _resize_with_grad(out2d.rgb, (cfg.upsample_2d, cfg.upsample_2d))
                ups3d = []
                caches3d = []
                for o in outs:
                    u, c = _resize_with_grad(
                        o.rgb, (cfg.upsample_multiview, cfg.upsample_multiview)
                    )
                    ups3d.append(u)
                    caches3d.append(c)
                loss, grad2d_up, grad3d_up, terms = stage1_loss(
                    up2d,
                    _camera_params(cam2d),
                    np.stack(ups3d),
                    [_camera_params(v) for v in views],
                    g2d,
                    g3d,
                    cfg.weights,
                    ctx,
                    want_grad=True,
                )
                scale = 1.0 / phase.batch
                batch_loss += loss * scale
                for k, val in terms.items():
                    terms_acc[k] = terms_acc.get(k, 0.0) + val * scale
                opacity_acc += float(np.mean([o.opacity.mean() for o in outs])) * scale

                def _bwd(
                    seed_grad,
                    outs=outs,
                    out2d=out2d,
                    idx2d=idx2d,
                    c2d=c2d,
                    caches3d=caches3d,
                    grad2d_up=grad2d_up,
                    grad3d_up=grad3d_up,
                    scale=scale,
                ):
                    s = seed_grad * scale
                    g2 = _resize_grad_back(c2d, grad2d_up) * s
                    grads3 = [
                        _resize_grad_back(c, gu) * s
                        for c, gu in zip(caches3d, grad3d_up)
                    ]
                    if idx2d is not None:
                        grads3[idx2d] = grads3[idx2d] + g2
                    else:
                        render_backward(model, out2d, drgb=g2)
                    for o, g in zip(outs, grads3):
                        render_backward(model, o, drgb=g)

                tape.record(_bwd)
            if reference is not None:
                ref_out = render_frame(
                    model, reference.camera, 0.0, cfg.samples_per_ray, rng=rng,
                    want_cache=True,
                )
                ref_loss, g_rgb, g_op, ref_terms = reference_view_loss(
                    ref_out.rgb, ref_out.opacity, reference.image, reference.mask,
                    config.reference, want_grad=True,
                )
                batch_loss += ref_loss
                terms_acc.update({k: float(v) for k, v in ref_terms.items()})

                def _ref_bwd(seed_grad, ref_out=ref_out, g_rgb=g_rgb, g_op=g_op):
                    render_backward(
                        model, ref_out, drgb=g_rgb * seed_grad, dopacity=g_op * seed_grad
                    )

                tape.record(_ref_bwd)
            if not np.isfinite(batch_loss):
                path = _dump_abort(
                    out_dir, model, "static", i, adam_state, rng, cfg_hash, "non-finite loss"
                )
                raise NonFiniteLossError(
                    f"static iteration {i}: loss={batch_loss!r}"
                    + (f" (dump: {path})" if path else "")
                )
            model.zero_grads()
            tape.backward()
            if config.optimizer.clip_norm is not None:
                clip_grad_norm(trainable, config.optimizer.clip_norm)
            adam_step(trainable, adam_state, config.optimizer)
            row = {
                "stage": "static",
                "iter": i,
                "loss": float(batch_loss),
                "noise_level": t_noise,
                "opacity_mean": opacity_acc,
                "wall_time": time.perf_counter() - t0,
            }
            row.update({k: float(v) for k, v in terms_acc.items()})
            metrics.log(row)
    except ProviderError:
        _dump_abort(
            out_dir, model, "static", locals().get("i", start_iteration), adam_state,
            rng, cfg_hash, "provider failure",
        )
        raise
    finally:
        metrics.close()

    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = str(out / "static.ckpt")
        save_checkpoint(ckpt, model, "static", n_iters, adam_state, rng, cfg_hash)
    return TrainResult(metrics.rows, ckpt)


# ---- dynamic stage -----------------------------------------------------------


def train_dynamic(
    model: SceneModel,
    gvid: GuidanceProvider,
    config: TrainConfig,
    out_dir=None,
    metrics_path=None,
    start_iteration: int = 0,
    adam_state: AdamState | None = None,
    rng: np.random.Generator | None = None,
    iterations: int | None = None,
    freeze_check_every: int = 100,
    camera_override=None,
) -> TrainResult:
    """Optimize only the deformation field under video guidance.

    The canonical and background groups are frozen on entry and their
    checksums are asserted every ``freeze_check_every`` iterations.
    ``camera_override`` may supply the per-iteration static camera (e.g.
    cycling a fixed reference rig) in place of random sampling.
    """
    cfg = config.dynamic
    n_iters = cfg.iterations if iterations is None else iterations
    cfg_hash = config_hash(config)
    if rng is None:
        rng = np.random.default_rng(config.seed + 1)
    if adam_state is None:
        adam_state = AdamState.for_params(model.parameters())
    model.freeze_group("canonical")
    model.freeze_group("background")
    model.thaw_group("deformation")
    model.deformation_enabled = True
    checksums = {
        g: model.group_checksum(g) for g in ("canonical", "background")
    }
    metrics = MetricsLog(metrics_path)
    trainable = model.parameters()
    w_r, h_r = cfg.render_size

    def _assert_frozen(iteration):
        for g, ref in checksums.items():
            now = model.group_checksum(g)
            if now != ref:
                raise UsageError(
                    f"frozen group {g!r} changed at iteration {iteration}"
                )

    try:
        for i in range(start_iteration, n_iters):
            t0 = time.perf_counter()
            model.deformation.set_active_levels(i, cfg.level_schedule)
            t_noise = sample_noise_level(cfg.noise, i, rng)
            ctx = GuidanceContext(
                prompt=config.prompt,
                noise_level=t_noise,
                seed=config.seed,
                guidance_scale_2d=config.scales.scale_2d,
                guidance_scale_multiview=config.scales.scale_multiview,
                guidance_scale_video=config.scales.scale_video,
            )
            if camera_override is not None:
                camera = camera_override(i, rng)
            else:
                camera = sample_camera(
                    rng, "dynamic_stage", config.camera, (w_r, h_r)
                )
            timestamps = sample_time_window(rng, cfg.n_frames, cfg.window_length)
            video = render_video(
                model,
                camera,
                timestamps,
                cfg.samples_per_ray,
                rng=rng if cfg.stratified_jitter else None,
                want_cache=True,
                march_sphere_radius=cfg.march_sphere_radius,
            )
            w_u, h_u = cfg.upsample_size
            ups = []
            up_caches = []
            for f in video.frames:
                u, c = _resize_with_grad(f.rgb, (w_u, h_u))
                ups.append(u)
                up_caches.append(c)
            disp_video = video.displacement
            loss, grad_rgb_up, grad_disp, terms = stage2_loss(
                np.stack(ups),
                disp_video,
                [_camera_params(camera)] * len(video.frames),
                gvid,
                cfg.weights,
                ctx,
                want_grad=True,
            )
            if not np.isfinite(loss):
                path = _dump_abort(
                    out_dir, model, "dynamic", i, adam_state, rng, cfg_hash, "non-finite loss"
                )
                raise NonFiniteLossError(
                    f"dynamic iteration {i}: loss={loss!r}"
                    + (f" (dump: {path})" if path else "")
                )
            model.zero_grads()
            tape = Tape()

            def _bwd(
                seed_grad,
                video=video,
                up_caches=up_caches,
                grad_rgb_up=grad_rgb_up,
                grad_disp=grad_disp,
            ):
                for k, frame in enumerate(video.frames):
                    g = _resize_grad_back(up_caches[k], grad_rgb_up[k]) * seed_grad
                    render_backward(
                        model, frame, drgb=g, ddisplacement=grad_disp[k] * seed_grad
                    )

            tape.record(_bwd)
            tape.backward()
            if config.optimizer.clip_norm is not None:
                clip_grad_norm(trainable, config.optimizer.clip_norm)
            adam_step(trainable, adam_state, config.optimizer)
            if freeze_check_every and (i + 1) % freeze_check_every == 0:
                _assert_frozen(i)
            row = {
                "stage": "dynamic",
                "iter": i,
                "loss": float(loss),
                "noise_level": t_noise,
                "mean_abs_d": float(np.mean(np.abs(disp_video))),
                "opacity_mean": float(np.mean(video.opacity)),
                "active_levels": int(model.deformation.encoding.level_mask.sum()),
                "wall_time": time.perf_counter() - t0,
            }
            row.update({k: float(v) for k, v in terms.items()})
            metrics.log(row)
    except ProviderError:
        _dump_abort(
            out_dir, model, "dynamic", locals().get("i", start_iteration), adam_state,
            rng, cfg_hash, "provider failure",
        )
        raise
    finally:
        metrics.close()

    _assert_frozen(n_iters)
    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = str(out / "dynamic.ckpt")
        save_checkpoint(ckpt, model, "dynamic", n_iters, adam_state, rng, cfg_hash)
    return TrainResult(metrics.rows, ckpt)
