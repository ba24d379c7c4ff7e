"""Denoising-guidance providers and reconstruction-style distillation loss.

The engine never runs a diffusion model itself. Rendered frames go out
through a :class:`GuidanceProvider`, which returns a denoised target (and
optionally latent-space pairs). The distillation loss is then a plain
residual against that target with stop-gradient semantics: provider
outputs are constants, so gradients only ever reach the rendered inputs.

Built-in providers:

* :class:`OracleProvider` returns a fixed reference regardless of the
  noise level, reducing distillation to photometric fitting. Used for
  verification and end-to-end toy fits.
* :class:`AnalyticProvider` blends the rendered input toward a known mean
  image, a toy denoiser whose descent fixed point is the mean image.
* :class:`RemoteProvider` speaks the binary wire protocol below to an
  external service hosting real diffusion models.

Wire protocol (bit-exact contract, shared with any conforming service):
``POST /v1/denoise`` with body = 8-byte magic ``D4DGUID1``, little-endian
u32 header length, canonical JSON header (sorted keys, no spaces), then
raw little-endian float32 image payload, row-major, frame-major. The
response mirrors the framing. ``GET /v1/health`` returns ``{"version":"1"}``.
"""

from __future__ import annotations

import json
import socket
import struct
import time
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np

from .errors import (
    PayloadError,
    ProviderCapabilityError,
    ProviderError,
    RemoteModelError,
    TransportError,
    TransportTimeoutError,
    UsageError,
    VersionMismatchError,
)

PROTOCOL_MAGIC = b"D4DGUID1"
PROTOCOL_VERSION = "1"

KINDS = ("image2d", "multiview3d", "video")
KIND_FRAMES = {"image2d": 1, "multiview3d": 4}


@dataclass(frozen=True)
class NoiseSchedule:
    """Linearly annealed noise-level range over training iterations."""

    t_range_start: tuple[float, float] = (0.99, 0.99)
    t_range_end: tuple[float, float] = (0.2, 0.5)
    total_iters: int = 10000

    def __post_init__(self):
        for lo, hi in (self.t_range_start, self.t_range_end):
            if not (0.0 < lo <= hi < 1.0):
                raise UsageError(f"noise range ({lo}, {hi}) must satisfy 0 < lo <= hi < 1")

    def range_at(self, iteration: int) -> tuple[float, float]:
        if not 0 <= iteration <= self.total_iters:
            raise UsageError(
                f"iteration {iteration} outside [0, {self.total_iters}]"
            )
        a = iteration / self.total_iters if self.total_iters > 0 else 1.0
        lo = (1 - a) * self.t_range_start[0] + a * self.t_range_end[0]
        hi = (1 - a) * self.t_range_start[1] + a * self.t_range_end[1]
        return lo, hi


def sample_noise_level(
    schedule: NoiseSchedule, iteration: int, rng: np.random.Generator
) -> float:
    """Draw t uniformly from the schedule's interpolated range."""
    lo, hi = schedule.range_at(iteration)
    return float(rng.uniform(lo, hi))


@dataclass(frozen=True)
class CameraParams:
    """Camera conditioning forwarded to pose-aware providers."""

    azimuth_deg: float
    elevation_deg: float
    radius: float
    fov_y_deg: float

    def to_json(self) -> dict:
        return {
            "azimuth": self.azimuth_deg,
            "elevation": self.elevation_deg,
            "radius": self.radius,
            "fov_y": self.fov_y_deg,
        }

    @staticmethod
    def from_json(obj: dict) -> "CameraParams":
        return CameraParams(obj["azimuth"], obj["elevation"], obj["radius"], obj["fov_y"])


@dataclass
class GuidanceRequest:
    """Rendered frames plus conditioning, bound for a provider."""

    kind: str
    images: np.ndarray  # (N, H, W, 3) in [0, 1]
    prompt: str
    cameras: list[CameraParams]
    noise_level: float
    guidance_scale: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UsageError(f"unknown guidance kind {self.kind!r}")
        self.images = np.asarray(self.images)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise UsageError(f"images must be (N, H, W, 3), got {self.images.shape}")
        expect = KIND_FRAMES.get(self.kind)
        if expect is not None and self.images.shape[0] != expect:
            raise UsageError(
                f"kind {self.kind!r} expects {expect} frames, got {self.images.shape[0]}"
            )
        if not 0.0 < self.noise_level < 1.0:
            raise UsageError("noise_level must lie in (0, 1)")
        if len(self.cameras) != self.images.shape[0]:
            raise UsageError("need one camera per image")


@dataclass
class GuidanceResponse:
    """Denoised targets; constants with stop-gradient semantics."""

    denoised_rgb: np.ndarray
    provider_id: str
    denoised_latent: np.ndarray | None = None
    rendered_latent: np.ndarray | None = None

    @property
    def has_latent(self) -> bool:
        return self.denoised_latent is not None and self.rendered_latent is not None


class GuidanceProvider:
    """Interface: deterministic (request, seed) -> denoised targets."""

    capabilities: frozenset = frozenset()
    latent_support: bool = False
    provider_id: str = "base"

    def denoise(self, request: GuidanceRequest) -> GuidanceResponse:
        raise NotImplementedError

    def check_capability(self, kind: str) -> None:
        if kind not in self.capabilities:
            raise ProviderCapabilityError(
                f"provider {self.provider_id!r} lacks capability {kind!r}"
            )


class OracleProvider(GuidanceProvider):
    """Returns a fixed reference target regardless of noise level.

    ``target`` may be a single (N, H, W, 3) array or a callable mapping a
    request to one, which keeps the provider deterministic while letting a
    test serve per-camera reference videos.
    """

    capabilities = frozenset(KINDS)
    latent_support = False
    provider_id = "oracle"

    def __init__(self, target):
        self._target = target

    def denoise(self, request: GuidanceRequest) -> GuidanceResponse:
        self.check_capability(request.kind)
        tgt = self._target(request) if callable(self._target) else self._target
        tgt = np.asarray(tgt)
        if tgt.shape != request.images.shape:
            raise ProviderError(
                f"oracle target shape {tgt.shape} != request {request.images.shape}"
            )
        return GuidanceResponse(denoised_rgb=tgt.copy(), provider_id=self.provider_id)


class AnalyticProvider(GuidanceProvider):
    """Toy denoiser: target = (1 - blend) * rendered + blend * mean image.

    The induced distillation loss is blend^2 * ||rendered - mean||^2 (up
    to averaging), a convex quadratic whose fixed point is the mean image.
    """

    capabilities = frozenset(KINDS)
    latent_support = False
    provider_id = "analytic"

    def __init__(self, mean_image: np.ndarray, blend: float = 1.0):
        if not 0.0 < blend <= 1.0:
            raise UsageError("blend must lie in (0, 1]")
        self.mean_image = np.asarray(mean_image)
        self.blend = float(blend)

    def denoise(self, request: GuidanceRequest) -> GuidanceResponse:
        self.check_capability(request.kind)
        mean = self.mean_image
        if mean.ndim == 3:
            mean = np.broadcast_to(mean, request.images.shape)
        if mean.shape != request.images.shape:
            raise ProviderError(
                f"mean image shape {self.mean_image.shape} incompatible with "
                f"request {request.images.shape}"
            )
        target = (1.0 - self.blend) * request.images + self.blend * mean
        return GuidanceResponse(denoised_rgb=target, provider_id=self.provider_id)


class EchoProvider(OracleProvider):
    """Returns the rendered input itself; downstream loss is exactly zero."""

    provider_id = "echo"

    def __init__(self):
        super().__init__(lambda request: request.images)


# ---- reconstruction-formulation distillation loss ------------------------


@dataclass(frozen=True)
class SDSWeights:
    latent: float = 1.0
    dec: float = 0.1  # weight of the decoded-RGB residual when latents exist


def sds_reconstruction_loss(
    rendered: np.ndarray,
    response: GuidanceResponse,
    weights: SDSWeights = SDSWeights(),
    want_grad: bool = False,
):
    """Residual against the provider's denoised target.

    With latent pairs present the value is
    ``latent * mean||r_lat - d_lat||^2 + dec * mean||rgb - d_rgb||^2``;
    otherwise it is the plain RGB mean-square residual. Targets are
    constants: the returned gradient only touches the rendered input. The
    latent encoder lives provider-side, so the latent term's gradient is
    approximated through the decoded-RGB pathway (scaled residual); local
    providers return no latents and are exact.
    """
    rendered = np.asarray(rendered)
    target = np.asarray(response.denoised_rgb)
    if rendered.shape != target.shape:
        raise UsageError(
            f"rendered shape {rendered.shape} != target shape {target.shape}"
        )
    resid = rendered - target
    rgb_mse = float(np.mean(resid**2))
    if response.has_latent:
        lat_resid = np.asarray(response.rendered_latent) - np.asarray(
            response.denoised_latent
        )
        loss = weights.latent * float(np.mean(lat_resid**2)) + weights.dec * rgb_mse
        grad_scale = 2.0 * (weights.latent + weights.dec) / resid.size
    else:
        if weights.latent <= 0:
            raise UsageError("latent weight must be positive for the primary residual")
        loss = weights.latent * rgb_mse
        grad_scale = 2.0 * weights.latent / resid.size
    if want_grad:
        return loss, (grad_scale * resid).astype(rendered.dtype)
    return loss


# ---- wire protocol --------------------------------------------------------


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _frame(header: dict, payloads: list[np.ndarray]) -> bytes:
    hdr = _canonical_json(header)
    parts = [PROTOCOL_MAGIC, struct.pack("<I", len(hdr)), hdr]
    for p in payloads:
        parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes(order="C"))
    return b"".join(parts)


def _unframe(blob: bytes) -> tuple[dict, bytes]:
    if len(blob) < len(PROTOCOL_MAGIC) + 4:
        raise PayloadError("frame shorter than magic + header length")
    if blob[: len(PROTOCOL_MAGIC)] != PROTOCOL_MAGIC:
        raise VersionMismatchError(
            f"bad protocol magic {blob[:len(PROTOCOL_MAGIC)]!r}"
        )
    (hlen,) = struct.unpack_from("<I", blob, len(PROTOCOL_MAGIC))
    start = len(PROTOCOL_MAGIC) + 4
    if len(blob) < start + hlen:
        raise PayloadError("truncated frame header")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PayloadError(f"malformed frame header: {exc}") from exc
    return header, blob[start + hlen :]


def _take_payload(raw: bytes, offset: int, shape) -> tuple[np.ndarray, int]:
    count = int(np.prod(shape))
    need = count * 4
    if len(raw) < offset + need:
        raise PayloadError(
            f"payload truncated: need {need} bytes at offset {offset}, have {len(raw) - offset}"
        )
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    return arr.reshape(shape).copy(), offset + need


def encode_request(request: GuidanceRequest) -> bytes:
    header = {
        "kind": request.kind,
        "prompt": request.prompt,
        "cameras": [c.to_json() for c in request.cameras],
        "t": float(request.noise_level),
        "guidance_scale": float(request.guidance_scale),
        "seed": int(request.seed),
        "shape": list(request.images.shape),
        "dtype": "f32le",
    }
    return _frame(header, [request.images])


def decode_request(blob: bytes) -> GuidanceRequest:
    header, raw = _unframe(blob)
    try:
        shape = tuple(int(v) for v in header["shape"])
        if header.get("dtype") != "f32le":
            raise PayloadError(f"unsupported payload dtype {header.get('dtype')!r}")
        images, _ = _take_payload(raw, 0, shape)
        return GuidanceRequest(
            kind=header["kind"],
            images=images,
            prompt=header["prompt"],
            cameras=[CameraParams.from_json(c) for c in header["cameras"]],
            noise_level=float(header["t"]),
            guidance_scale=float(header["guidance_scale"]),
            seed=int(header["seed"]),
        )
    except KeyError as exc:
        raise PayloadError(f"request header missing field {exc}") from exc


def encode_response(response: GuidanceResponse) -> bytes:
    header = {
        "provider_id": response.provider_id,
        "has_latent": bool(response.has_latent),
        "rgb_shape": list(response.denoised_rgb.shape),
    }
    payloads = [response.denoised_rgb]
    if response.has_latent:
        header["latent_shape"] = list(response.denoised_latent.shape)
        payloads.extend([response.denoised_latent, response.rendered_latent])
    return _frame(header, payloads)


def decode_response(blob: bytes) -> GuidanceResponse:
    header, raw = _unframe(blob)
    try:
        rgb_shape = tuple(int(v) for v in header["rgb_shape"])
        rgb, offset = _take_payload(raw, 0, rgb_shape)
        denoised_latent = rendered_latent = None
        if header.get("has_latent"):
            lat_shape = tuple(int(v) for v in header["latent_shape"])
            denoised_latent, offset = _take_payload(raw, offset, lat_shape)
            rendered_latent, offset = _take_payload(raw, offset, lat_shape)
        return GuidanceResponse(
            denoised_rgb=rgb,
            provider_id=str(header["provider_id"]),
            denoised_latent=denoised_latent,
            rendered_latent=rendered_latent,
        )
    except KeyError as exc:
        raise PayloadError(f"response header missing field {exc}") from exc


class RemoteProvider(GuidanceProvider):
    """Client for a guidance service speaking the wire protocol.

    Construction performs a health check and rejects any endpoint whose
    reported protocol version differs. Transport and payload failures are
    retried with exponential backoff; version mismatches never retry.
    """

    latent_support = True
    provider_id = "remote"

    def __init__(
        self,
        endpoint: str,
        timeout: float = 30.0,
        retries: int = 2,
        backoff: float = 0.25,
        capabilities=KINDS,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = float(timeout)
        self.retries = int(retries)
        self.backoff = float(backoff)
        self.capabilities = frozenset(capabilities)
        info = self._health()
        version = str(info.get("version"))
        if version != PROTOCOL_VERSION:
            raise VersionMismatchError(
                f"endpoint speaks protocol version {version!r}, expected {PROTOCOL_VERSION!r}"
            )

    def _health(self) -> dict:
        try:
            with urllib.request.urlopen(
                self.endpoint + "/v1/health", timeout=self.timeout
            ) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, socket.timeout, OSError) as exc:
            raise TransportError(f"health check failed: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise PayloadError(f"health check returned malformed JSON: {exc}") from exc

    def _post(self, body: bytes) -> bytes:
        req = urllib.request.Request(
            self.endpoint + "/v1/denoise",
            data=body,
            headers={"Content-Type": "application/octet-stream"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.read()
        except urllib.error.HTTPError as exc:
            detail = exc.read().decode("utf-8", "replace")[:200]
            raise RemoteModelError(
                f"service returned HTTP {exc.code}: {detail}"
            ) from exc
        except socket.timeout as exc:
            raise TransportTimeoutError(f"denoise timed out after {self.timeout}s") from exc
        except (urllib.error.URLError, OSError) as exc:
            if isinstance(getattr(exc, "reason", None), socket.timeout):
                raise TransportTimeoutError(
                    f"denoise timed out after {self.timeout}s"
                ) from exc
            raise TransportError(f"denoise transport failure: {exc}") from exc

    def denoise(self, request: GuidanceRequest) -> GuidanceResponse:
        self.check_capability(request.kind)
        body = encode_request(request)
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                return decode_response(self._post(body))
            except VersionMismatchError:
                raise
            except RemoteModelError:
                raise
            except (TransportError, PayloadError) as exc:
                last = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * (2**attempt))
        assert last is not None
        raise last
