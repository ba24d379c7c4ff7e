"""Loss assembly for both training stages.

Stage one combines 2D and multi-view 3D distillation terms over renders of
the static scene. Stage two combines a video distillation term with a
total-variation regularizer on the rendered 3D displacement video. All
losses are pure functions returning their value together with analytic
gradients on the rendered inputs; provider targets are constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .guidance import (
    CameraParams,
    GuidanceProvider,
    GuidanceRequest,
    SDSWeights,
    sds_reconstruction_loss,
)


@dataclass(frozen=True)
class StageOneWeights:
    """Relative weight of the 2D and multi-view guidance terms."""

    lambda_2d: float = 1.0
    lambda_3d: float = 1.0

    def __post_init__(self):
        if self.lambda_2d < 0 or self.lambda_3d < 0:
            raise UsageError("stage-one weights must be >= 0")


@dataclass(frozen=True)
class StageTwoWeights:
    """Video-term decomposition weight and motion total-variation weight."""

    lambda_tv: float = 1000.0
    lambda_dec: float = 0.1

    def __post_init__(self):
        if self.lambda_tv < 0 or self.lambda_dec < 0:
            raise UsageError("stage-two weights must be >= 0")


@dataclass(frozen=True)
class ReferenceViewWeights:
    rgb: float = 1000.0
    mask: float = 100.0


@dataclass(frozen=True)
class GuidanceContext:
    """Conditioning shared by every request of one optimization step."""

    prompt: str
    noise_level: float
    seed: int = 0
    guidance_scale_2d: float = 100.0
    guidance_scale_multiview: float = 50.0
    guidance_scale_video: float = 100.0


def stage1_loss(
    render_2d: np.ndarray,
    camera_2d: CameraParams,
    renders_3d: np.ndarray,
    cameras_3d: list[CameraParams],
    g2d: GuidanceProvider | None,
    g3d: GuidanceProvider | None,
    weights: StageOneWeights,
    ctx: GuidanceContext,
    want_grad: bool = False,
):
    """Combined static-stage objective on one multi-view render batch.

    ``render_2d`` is a single view (H, W, 3) for the generic 2D guidance;
    ``renders_3d`` stacks four orthogonal-azimuth views (4, H, W, 3) for
    the pose-conditioned multi-view guidance. A term with zero weight is
    skipped entirely (its provider is never called).
    """
    render_2d = np.asarray(render_2d)
    renders_3d = np.asarray(renders_3d)
    if renders_3d.shape[0] != 4:
        raise UsageError("multi-view guidance expects exactly 4 views")
    loss = 0.0
    terms: dict[str, float] = {}
    grad_2d = np.zeros_like(render_2d)
    grad_3d = np.zeros_like(renders_3d)
    if weights.lambda_2d > 0:
        if g2d is None:
            raise UsageError("lambda_2d > 0 but no 2D provider given")
        g2d.check_capability("image2d")
        req = GuidanceRequest(
            kind="image2d",
            images=render_2d[None],
            prompt=ctx.prompt,
            cameras=[camera_2d],
            noise_level=ctx.noise_level,
            guidance_scale=ctx.guidance_scale_2d,
            seed=ctx.seed,
        )
        resp = g2d.denoise(req)
        l2d, g = sds_reconstruction_loss(req.images, resp, want_grad=True)
        loss += weights.lambda_2d * l2d
        terms["loss_2d"] = l2d
        grad_2d += weights.lambda_2d * g[0]
    if weights.lambda_3d > 0:
        if g3d is None:
            raise UsageError("lambda_3d > 0 but no multi-view provider given")
        g3d.check_capability("multiview3d")
        req = GuidanceRequest(
            kind="multiview3d",
            images=renders_3d,
            prompt=ctx.prompt,
            cameras=list(cameras_3d),
            noise_level=ctx.noise_level,
            guidance_scale=ctx.guidance_scale_multiview,
            seed=ctx.seed,
        )
        resp = g3d.denoise(req)
        l3d, g = sds_reconstruction_loss(req.images, resp, want_grad=True)
        loss += weights.lambda_3d * l3d
        terms["loss_3d"] = l3d
        grad_3d += weights.lambda_3d * g
    if want_grad:
        return loss, grad_2d, grad_3d, terms
    return loss


def tv_loss(displacement_video: np.ndarray, want_grad: bool = False):
    """Total variation of a (T, H, W, 3) displacement video.

    Sum over all interior sites of the squared L2 norm of backward
    differences along x, y, and t; boundary terms whose neighbor falls
    outside the video are omitted, and there is no wraparound.
    """
    d = np.asarray(displacement_video)
    if d.ndim != 4 or d.shape[-1] != 3:
        raise UsageError(f"expected (T, H, W, 3) displacement video, got {d.shape}")
    dx = d[:, :, 1:] - d[:, :, :-1]
    dy = d[:, 1:, :] - d[:, :-1, :]
    dt = d[1:] - d[:-1]
    value = float(np.sum(dx**2) + np.sum(dy**2) + np.sum(dt**2))
    if not want_grad:
        return value
    grad = np.zeros_like(d)
    grad[:, :, 1:] += 2.0 * dx
    grad[:, :, :-1] -= 2.0 * dx
    grad[:, 1:, :] += 2.0 * dy
    grad[:, :-1, :] -= 2.0 * dy
    grad[1:] += 2.0 * dt
    grad[:-1] -= 2.0 * dt
    return value, grad


def stage2_loss(
    video_rgb: np.ndarray,
    displacement_video: np.ndarray,
    cameras: list[CameraParams],
    gvid: GuidanceProvider,
    weights: StageTwoWeights,
    ctx: GuidanceContext,
    want_grad: bool = False,
):
    """Dynamic-stage objective: video distillation + motion smoothness.

    ``video_rgb`` is the (T, H, W, 3) video presented to the provider
    (already upsampled to the guidance resolution when applicable);
    ``displacement_video`` is the rendered displacement video the total
    variation acts on. The two gradients are returned separately because
    they flow into different render channels.
    """
    video_rgb = np.asarray(video_rgb)
    gvid.check_capability("video")
    req = GuidanceRequest(
        kind="video",
        images=video_rgb,
        prompt=ctx.prompt,
        cameras=list(cameras),
        noise_level=ctx.noise_level,
        guidance_scale=ctx.guidance_scale_video,
        seed=ctx.seed,
    )
    resp = gvid.denoise(req)
    sds = SDSWeights(latent=1.0, dec=weights.lambda_dec)
    l_video, grad_rgb = sds_reconstruction_loss(video_rgb, resp, sds, want_grad=True)
    terms = {"loss_video": l_video}
    if weights.lambda_tv > 0:
        l_tv, grad_disp = tv_loss(displacement_video, want_grad=True)
        grad_disp = weights.lambda_tv * grad_disp
    else:
        l_tv = tv_loss(displacement_video)
        grad_disp = np.zeros_like(np.asarray(displacement_video))
    terms["loss_tv"] = l_tv
    loss = l_video + weights.lambda_tv * l_tv
    if want_grad:
        return loss, grad_rgb, grad_disp, terms
    return loss


def reference_view_loss(
    rgb: np.ndarray,
    opacity: np.ndarray,
    ref_image: np.ndarray,
    ref_mask: np.ndarray,
    weights: ReferenceViewWeights = ReferenceViewWeights(),
    want_grad: bool = False,
):
    """Photometric + silhouette supervision against a reference view.

    The RGB residual is masked by the reference foreground mask; the
    opacity map is regressed to the mask itself.
    """
    rgb = np.asarray(rgb)
    opacity = np.asarray(opacity)
    ref_image = np.asarray(ref_image)
    ref_mask = np.asarray(ref_mask)
    if rgb.shape != ref_image.shape or opacity.shape != ref_mask.shape:
        raise UsageError("reference image/mask shapes must match the render")
    if np.any(ref_mask < 0) or np.any(ref_mask > 1):
        raise UsageError("reference mask values must lie in [0, 1]")
    masked = (rgb - ref_image) * ref_mask[..., None]
    rgb_term = float(np.mean(masked**2))
    mask_resid = opacity - ref_mask
    mask_term = float(np.mean(mask_resid**2))
    loss = weights.rgb * rgb_term + weights.mask * mask_term
    if not want_grad:
        return loss
    grad_rgb = (2.0 * weights.rgb / masked.size) * masked * ref_mask[..., None]
    grad_opacity = (2.0 * weights.mask / mask_resid.size) * mask_resid
    return loss, grad_rgb.astype(rgb.dtype), grad_opacity.astype(opacity.dtype), {
        "loss_ref_rgb": rgb_term,
        "loss_ref_mask": mask_term,
    }
