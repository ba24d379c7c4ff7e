"""Camera sampling and differentiable emission-absorption volume rendering.

A frame render produces, per pixel, alpha-composited color, opacity, and a
3D displacement map (the expected warp displacement under the same
compositing weights, with zero contribution from the background). Videos
are rendered frame-by-frame from one static camera with the per-ray
stratified jitter shared across frames, so a zero deformation renders
pixel-identical frames at every timestamp.

The renderer is duck-typed over the scene: any object exposing
``deform_points`` / ``query_canonical_points`` / ``shade_background_dirs``
(and their ``*_backward`` adjoints for training) can be rendered, which is
how analytic reference scenes are produced in tests and demos.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointFormatError, ConfigError, UsageError
from .fields import SCENE_BOUND

DISPLACEMENT_MAGIC = b"D4DD"
DISPLACEMENT_VERSION = 1


@dataclass(frozen=True)
class Camera:
    """Spherical look-at camera with a right-handed, +y-up frame."""

    azimuth_deg: float
    elevation_deg: float
    radius: float
    fov_y_deg: float = 50.0
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    resolution: tuple[int, int] = (64, 64)  # (width, height)

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigError("camera radius must be > 0")
        if not 0.0 < self.fov_y_deg < 180.0:
            raise ConfigError("fov_y must lie in (0, 180) degrees")

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    def position(self) -> np.ndarray:
        az = np.deg2rad(self.azimuth_deg)
        el = np.deg2rad(self.elevation_deg)
        offset = self.radius * np.array(
            [np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)]
        )
        return np.asarray(self.look_at, dtype=np.float64) + offset

    def with_resolution(self, width: int, height: int) -> "Camera":
        return Camera(
            self.azimuth_deg,
            self.elevation_deg,
            self.radius,
            self.fov_y_deg,
            self.look_at,
            (width, height),
        )


@dataclass(frozen=True)
class CameraRanges:
    """Uniform sampling ranges for random training cameras."""

    azimuth: tuple[float, float] = (0.0, 360.0)
    elevation: tuple[float, float] = (-10.0, 45.0)
    radius: tuple[float, float] = (1.5, 2.0)
    fov_y: tuple[float, float] = (40.0, 70.0)

    def __post_init__(self):
        for name in ("azimuth", "elevation", "radius", "fov_y"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"camera range {name} has min > max")


def sample_camera(
    rng: np.random.Generator,
    mode: str = "static_stage",
    ranges: CameraRanges | None = None,
    resolution: tuple[int, int] = (64, 64),
) -> Camera:
    """Draw one camera uniformly from ``ranges``.

    ``dynamic_stage`` mode signals that the camera will be reused for all
    frames of a video; the distribution itself is shared between modes.
    """
    if mode not in ("static_stage", "dynamic_stage"):
        raise UsageError(f"unknown camera sampling mode {mode!r}")
    if ranges is None:
        ranges = CameraRanges()
    az = rng.uniform(*ranges.azimuth)
    el = rng.uniform(*ranges.elevation)
    radius = rng.uniform(*ranges.radius)
    fov = rng.uniform(*ranges.fov_y)
    return Camera(az, el, radius, fov, resolution=resolution)


def four_view_cameras(base: Camera) -> list[Camera]:
    """Orthogonal-azimuth views (front, back, and the two sides)."""
    return [
        Camera(
            (base.azimuth_deg + off) % 360.0,
            base.elevation_deg,
            base.radius,
            base.fov_y_deg,
            base.look_at,
            base.resolution,
        )
        for off in (0.0, 90.0, 180.0, 270.0)
    ]


def sample_time_window(
    rng: np.random.Generator,
    n_frames: int = 24,
    length_range: tuple[float, float] = (0.8, 1.0),
) -> np.ndarray:
    """Evenly spaced timestamps over a random sub-window of [0, 1]."""
    if n_frames < 2:
        raise UsageError("need at least 2 frames")
    length = rng.uniform(*length_range)
    start = rng.uniform(0.0, 1.0 - length)
    return np.linspace(start, start + length, n_frames)


def camera_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ray origins and unit directions, shape (H, W, 3)."""
    w, h = camera.width, camera.height
    pos = camera.position()
    fwd = np.asarray(camera.look_at, dtype=np.float64) - pos
    fwd /= np.linalg.norm(fwd)
    up_world = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up_world)
    nr = np.linalg.norm(right)
    if nr < 1e-8:
        raise UsageError("camera forward is parallel to the +y up vector")
    right /= nr
    up = np.cross(right, fwd)
    tan_y = np.tan(np.deg2rad(camera.fov_y_deg) / 2.0)
    tan_x = tan_y * w / h
    xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    ys = 1.0 - (np.arange(h) + 0.5) / h * 2.0
    dirs = (
        xs[None, :, None] * tan_x * right
        + ys[:, None, None] * tan_y * up
        + fwd
    )
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pos, dirs.shape).copy()
    return origins, dirs


def ray_sphere_intersect(
    origins: np.ndarray, dirs: np.ndarray, radius: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Intersection with the origin-centered sphere of the given radius.

    Used to march only a known object bound; rays that miss show pure
    background exactly as box-marching would when the density is zero
    outside the bound.
    """
    b = np.sum(origins * dirs, axis=-1)
    c = np.sum(origins * origins, axis=-1) - radius * radius
    disc = b * b - c
    safe = np.sqrt(np.maximum(disc, 0.0))
    tn = np.maximum(-b - safe, 0.0)
    tf = -b + safe
    hit = (disc > 0) & (tf > tn)
    return tn, tf, hit


def ray_box_intersect(
    origins: np.ndarray, dirs: np.ndarray, bound: float = SCENE_BOUND
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab intersection with the axis-aligned cube [-bound, bound]^3.

    Returns (t_near, t_far, hit). Origins inside the box get t_near = 0.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (-bound - origins) * inv
        t1 = (bound - origins) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # Parallel rays: ignore that axis unless the origin is outside its slab.
    par = np.abs(dirs) < 1e-12
    inside_slab = np.abs(origins) <= bound
    tmin = np.where(par, np.where(inside_slab, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside_slab, np.inf, -np.inf), tmax)
    tn = tmin.max(axis=-1)
    tf = tmax.min(axis=-1)
    tn = np.maximum(tn, 0.0)
    hit = tf > tn
    return tn, tf, hit


@dataclass
class RenderOutput:
    """One rendered frame plus the adjoint cache for training."""

    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    opacity: np.ndarray  # (H, W) in [0, 1]
    displacement: np.ndarray  # (H, W, 3) world units
    cache: dict | None = None


@dataclass
class VideoBatch:
    """Frames rendered from one static camera at evenly spaced times."""

    frames: list[RenderOutput]
    timestamps: np.ndarray
    camera: Camera

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64)
        if len(self.frames) != ts.shape[0]:
            raise UsageError("frame count must match timestamp count")
        if ts.shape[0] >= 2:
            gaps = np.diff(ts)
            if np.any(gaps <= 0):
                raise UsageError("timestamps must be strictly increasing")
            if np.max(np.abs(gaps - gaps[0])) > 1e-9:
                raise UsageError("timestamps must be evenly spaced")
        self.timestamps = ts

    @property
    def rgb(self) -> np.ndarray:
        return np.stack([f.rgb for f in self.frames])

    @property
    def opacity(self) -> np.ndarray:
        return np.stack([f.opacity for f in self.frames])

    @property
    def displacement(self) -> np.ndarray:
        return np.stack([f.displacement for f in self.frames])


def _resolve_jitter(
    n_rays: int,
    n_samples: int,
    rng: np.random.Generator | None,
    jitter,
) -> np.ndarray:
    if jitter is not None:
        j = np.asarray(jitter, dtype=np.float64)
        if j.ndim == 0:
            return np.full((n_rays, n_samples), float(j))
        if j.shape != (n_rays, n_samples):
            raise UsageError(f"jitter shape {j.shape} != ({n_rays}, {n_samples})")
        return j
    if rng is not None:
        return rng.uniform(0.0, 1.0, size=(n_rays, n_samples))
    return np.full((n_rays, n_samples), 0.5)


def render_frame(
    model,
    camera: Camera,
    t: float,
    samples_per_ray: int = 64,
    rng: np.random.Generator | None = None,
    jitter=None,
    want_cache: bool = False,
    march_sphere_radius: float | None = None,
) -> RenderOutput:
    """Render one frame at time ``t`` by warp-then-query quadrature.

    Stratified samples along each ray are warped to canonical space,
    queried for density/color, and alpha-composited over the background.
    Rays that miss the scene box show pure background with zero opacity
    and zero displacement. When the scene's density support is known to
    fit inside a centered sphere, ``march_sphere_radius`` restricts
    sampling to that bound.
    """
    if not 0.0 <= float(t) <= 1.0:
        raise UsageError(f"time {t} outside [0, 1]")
    if samples_per_ray < 1:
        raise UsageError("samples_per_ray must be >= 1")
    h, w = camera.height, camera.width
    origins, dirs = camera_rays(camera)
    flat_origins = origins.reshape(-1, 3)
    flat_dirs = dirs.reshape(-1, 3)
    if march_sphere_radius is not None:
        tn, tf, hit = ray_sphere_intersect(flat_origins, flat_dirs, march_sphere_radius)
    else:
        tn, tf, hit = ray_box_intersect(flat_origins, flat_dirs)

    if want_cache:
        bg, bg_cache = model.shade_background_dirs(flat_dirs, want_cache=True)
    else:
        bg = model.shade_background_dirs(flat_dirs)
        bg_cache = None
    dtype = bg.dtype

    rgb = bg.reshape(h, w, 3).astype(dtype).copy()
    opacity = np.zeros((h, w), dtype=dtype)
    displacement = np.zeros((h, w, 3), dtype=dtype)

    ridx = np.nonzero(hit)[0]
    cache = {
        "hit": hit,
        "h": h,
        "w": w,
        "bg_cache": bg_cache,
        "bg": bg,
        "n_samples": samples_per_ray,
        "empty": ridx.size == 0,
    }
    if ridx.size > 0:
        n = samples_per_ray
        o = flat_origins[ridx]
        dr = flat_dirs[ridx]
        seg = (tf[ridx] - tn[ridx])
        delta = (seg / n)[:, None]  # (R, 1)
        jit = _resolve_jitter(ridx.size, n, rng, jitter)
        tsamp = tn[ridx][:, None] + (np.arange(n)[None, :] + jit) * delta
        pts = o[:, None, :] + dr[:, None, :] * tsamp[:, :, None]
        pts = np.clip(pts, -SCENE_BOUND, SCENE_BOUND)
        flat_pts = pts.reshape(-1, 3).astype(dtype)

        if want_cache:
            x_c, d, dcache = model.deform_points(flat_pts, t, want_cache=True)
            sigma, color, ccache = model.query_canonical_points(x_c, want_cache=True)
        else:
            x_c, d = model.deform_points(flat_pts, t)
            sigma, color = model.query_canonical_points(x_c)
            dcache = ccache = None

        R = ridx.size
        s = sigma.reshape(R, n) * delta.astype(dtype)
        trans_in = np.exp(-np.cumsum(s, axis=1))  # T_{i+1}
        trans_out = np.concatenate(
            [np.ones((R, 1), dtype=dtype), trans_in[:, :-1]], axis=1
        )  # T_i
        weights = trans_out - trans_in  # alpha_i * T_i
        op = weights.sum(axis=1)

        cr = color.reshape(R, n, 3)
        dd = d.reshape(R, n, 3)
        bg_hit = bg[ridx]
        rgb_hit = np.einsum("rn,rnc->rc", weights, cr) + (1.0 - op)[:, None] * bg_hit
        disp_hit = np.einsum("rn,rnc->rc", weights, dd)

        rgb.reshape(-1, 3)[ridx] = rgb_hit
        opacity.reshape(-1)[ridx] = op
        displacement.reshape(-1, 3)[ridx] = disp_hit

        cache.update(
            ridx=ridx,
            delta=delta.astype(dtype),
            weights=weights,
            trans_in=trans_in,
            trans_out=trans_out,
            s=s,
            color=cr,
            disp=dd,
            opacity_hit=op,
            dcache=dcache,
            ccache=ccache,
            jitter=jit,
        )

    return RenderOutput(rgb, opacity, displacement, cache if want_cache else None)


def render_backward(
    model,
    output: RenderOutput,
    drgb: np.ndarray | None = None,
    dopacity: np.ndarray | None = None,
    ddisplacement: np.ndarray | None = None,
) -> None:
    """Adjoint of :func:`render_frame`.

    Routes upstream gradients on the rgb/opacity/displacement maps through
    the compositing weights, the canonical query, the deformation, and the
    background shader, accumulating into all unfrozen parameter tensors.
    """
    cache = output.cache
    if cache is None:
        raise UsageError("render_backward needs a frame rendered with want_cache=True")
    h, w = cache["h"], cache["w"]
    bg = cache["bg"]
    dtype = bg.dtype
    if drgb is None:
        drgb = np.zeros((h, w, 3), dtype=dtype)
    if dopacity is None:
        dopacity = np.zeros((h, w), dtype=dtype)
    if ddisplacement is None:
        ddisplacement = np.zeros((h, w, 3), dtype=dtype)
    drgb_flat = drgb.reshape(-1, 3).astype(dtype)
    dop_flat = dopacity.reshape(-1).astype(dtype)
    ddisp_flat = ddisplacement.reshape(-1, 3).astype(dtype)

    dbg = drgb_flat.copy()  # miss pixels see the background directly

    if not cache["empty"]:
        ridx = cache["ridx"]
        weights = cache["weights"]
        trans_in = cache["trans_in"]
        delta = cache["delta"]
        cr = cache["color"]
        dd = cache["disp"]
        op = cache["opacity_hit"]
        bg_hit = bg[ridx]

        dr = drgb_flat[ridx]  # (R, 3)
        do = dop_flat[ridx]  # (R,)
        dD = ddisp_flat[ridx]  # (R, 3)

        # dL/dw_i = drgb . (c_i - bg) + dopacity + ddisp . d_i
        A = (
            np.einsum("rc,rnc->rn", dr, cr - bg_hit[:, None, :])
            + do[:, None]
            + np.einsum("rc,rnc->rn", dD, dd)
        )
        wa = weights * A
        suffix = np.cumsum(wa[:, ::-1], axis=1)[:, ::-1] - wa  # sum over k > i
        # dL/dsigma_i = delta_i * (T_{i+1} A_i - sum_{k>i} w_k A_k)
        dsigma = delta * (trans_in * A - suffix)
        dcolor = weights[:, :, None] * dr[:, None, :]
        ddisp_samples = weights[:, :, None] * dD[:, None, :]

        dbg[ridx] = (1.0 - op)[:, None] * dr

        warp_active = cache["dcache"] is not None
        dx_c = model.canonical_backward(
            cache["ccache"],
            dsigma.reshape(-1).astype(dtype),
            dcolor.reshape(-1, 3).astype(dtype),
            want_dx=warp_active,
        )
        if warp_active:
            model.deform_backward(
                cache["dcache"], dx_c, ddisp_samples.reshape(-1, 3).astype(dtype)
            )

    model.background_backward(cache["bg_cache"], dbg)
    output.cache = None  # adjoint caches are single-use; free them eagerly


def render_video(
    model,
    camera: Camera,
    timestamps: np.ndarray,
    samples_per_ray: int = 64,
    rng: np.random.Generator | None = None,
    want_cache: bool = False,
    march_sphere_radius: float | None = None,
) -> VideoBatch:
    """Render one frame per timestamp from a single static camera.

    The stratified jitter is drawn once and shared by every frame, so the
    only difference between frames is the deformation at their timestamps.
    """
    ts = np.asarray(timestamps, dtype=np.float64)
    origins, dirs = camera_rays(camera)
    flat_o = origins.reshape(-1, 3)
    flat_d = dirs.reshape(-1, 3)
    if march_sphere_radius is not None:
        _, _, hit = ray_sphere_intersect(flat_o, flat_d, march_sphere_radius)
    else:
        _, _, hit = ray_box_intersect(flat_o, flat_d)
    n_hit = int(hit.sum())
    jit = _resolve_jitter(n_hit, samples_per_ray, rng, None) if rng is not None else None
    frames = [
        render_frame(
            model,
            camera,
            float(t),
            samples_per_ray,
            jitter=jit if jit is not None else 0.5,
            want_cache=want_cache,
            march_sphere_radius=march_sphere_radius,
        )
        for t in ts
    ]
    return VideoBatch(frames, ts, camera)


# ---- differentiable bilinear resize ------------------------------------


def bilinear_resize(img: np.ndarray, out_hw: tuple[int, int], want_cache: bool = False):
    """Bilinear resample of an (H, W, C) image (half-pixel-center grid)."""
    hin, win = img.shape[:2]
    hout, wout = out_hw
    ys = (np.arange(hout) + 0.5) * hin / hout - 0.5
    xs = (np.arange(wout) + 0.5) * win / wout - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, hin - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, win - 1)
    y1 = np.minimum(y0 + 1, hin - 1)
    x1 = np.minimum(x0 + 1, win - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)
    fx = np.clip(xs - x0, 0.0, 1.0)
    wy = np.stack([1.0 - fy, fy])  # (2, Hout)
    wx = np.stack([1.0 - fx, fx])  # (2, Wout)
    out = np.zeros((hout, wout) + img.shape[2:], dtype=img.dtype)
    for iy, yidx in enumerate((y0, y1)):
        for ix, xidx in enumerate((x0, x1)):
            wgt = (wy[iy][:, None] * wx[ix][None, :]).astype(img.dtype)
            out += wgt[..., None] * img[yidx[:, None], xidx[None, :]]
    if want_cache:
        return out, {"in_hw": (hin, win), "y": (y0, y1), "x": (x0, x1), "wy": wy, "wx": wx}
    return out


def bilinear_resize_backward(cache, dout: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`bilinear_resize` (scatter to the input grid)."""
    hin, win = cache["in_hw"]
    y0, y1 = cache["y"]
    x0, x1 = cache["x"]
    wy, wx = cache["wy"], cache["wx"]
    din = np.zeros((hin, win) + dout.shape[2:], dtype=dout.dtype)
    for iy, yidx in enumerate((y0, y1)):
        for ix, xidx in enumerate((x0, x1)):
            wgt = (wy[iy][:, None] * wx[ix][None, :]).astype(dout.dtype)
            np.add.at(
                din,
                (yidx[:, None], xidx[None, :]),
                wgt[..., None] * dout,
            )
    return din


# ---- frame export -------------------------------------------------------


def write_displacement_raw(path, disp_video: np.ndarray) -> None:
    """Write a (T, H, W, 3) displacement video as the raw float format.

    Layout: magic ``D4DD``, u32 version, u32 W, H, T, then little-endian
    float32 vectors row-major within each frame, frame-major overall.
    """
    d = np.asarray(disp_video, dtype=np.float32)
    if d.ndim != 4 or d.shape[-1] != 3:
        raise UsageError(f"expected (T, H, W, 3) displacement video, got {d.shape}")
    t, h, w = d.shape[:3]
    with open(path, "wb") as fh:
        fh.write(DISPLACEMENT_MAGIC)
        fh.write(struct.pack("<IIII", DISPLACEMENT_VERSION, w, h, t))
        fh.write(d.astype("<f4").tobytes(order="C"))


def read_displacement_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DISPLACEMENT_MAGIC:
        raise CheckpointFormatError("bad displacement file magic")
    version, w, h, t = struct.unpack_from("<IIII", blob, 4)
    if version != DISPLACEMENT_VERSION:
        raise CheckpointFormatError(f"unsupported displacement version {version}")
    need = 20 + t * h * w * 3 * 4
    if len(blob) < need:
        raise CheckpointFormatError("truncated displacement payload")
    data = np.frombuffer(blob, dtype="<f4", count=t * h * w * 3, offset=20)
    return data.reshape(t, h, w, 3).copy()


def write_png(path, img: np.ndarray) -> None:
    """Minimal 8-bit RGB PNG writer (no external imaging dependency)."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.dtype != np.uint8:
        arr = (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = arr.shape[:2]
    raw = b"".join(b"\x00" + arr[i].tobytes() for i in range(h))

    def chunk(tag: bytes, payload: bytes) -> bytes:
        out = struct.pack(">I", len(payload)) + tag + payload
        return out + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    blob = (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", ihdr)
        + chunk(b"IDAT", zlib.compress(raw, 6))
        + chunk(b"IEND", b"")
    )
    with open(path, "wb") as fh:
        fh.write(blob)


def read_png(path) -> np.ndarray:
    """Reader for PNGs produced by :func:`write_png` (filter 0 only)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != b"\x89PNG\r\n\x1a\n":
        raise CheckpointFormatError("not a PNG file")
    pos = 8
    w = h = None
    idat = b""
    while pos < len(blob):
        (ln,) = struct.unpack_from(">I", blob, pos)
        tag = blob[pos + 4 : pos + 8]
        payload = blob[pos + 8 : pos + 8 + ln]
        if tag == b"IHDR":
            w, h, depth, ctype = struct.unpack_from(">IIBB", payload, 0)
            if depth != 8 or ctype != 2:
                raise CheckpointFormatError("only 8-bit RGB PNGs are supported")
        elif tag == b"IDAT":
            idat += payload
        pos += 12 + ln
    raw = zlib.decompress(idat)
    stride = w * 3 + 1
    rows = []
    for i in range(h):
        row = raw[i * stride : (i + 1) * stride]
        if row[0] != 0:
            raise CheckpointFormatError("unsupported PNG filter type")
        rows.append(np.frombuffer(row[1:], dtype=np.uint8))
    return np.stack(rows).reshape(h, w, 3)
