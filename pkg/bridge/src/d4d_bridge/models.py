"""Denoiser backends behind the service's model slots.

A slot binds one guidance kind (2D image, camera-conditioned multi-view,
or video) to a denoiser. The service noises the incoming clean frames at
the requested level and asks the backend for a one-step prediction of the
clean frames, so diffusion-schedule constants never leak into the engine.

Two in-tree backends need no downloads:

* ``mock``: identity denoiser; the response payload equals the request
  payload byte for byte. This is the protocol-conformance backend.
* ``toyprior``: pulls the noised input toward a fixed procedural prior
  image with strength equal to the noise level, and reports latent pairs
  (4x-downsampled frames). As the noise level approaches zero its output
  approaches the input, mimicking the limiting behavior of a real
  denoiser while staying fully deterministic.

Real diffusion checkpoints plug in through :func:`register_backend`; the
service itself is model-agnostic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .protocol import KINDS, DenoiseRequest, DenoiseResponse


class SlotError(Exception):
    """Request kind has no loaded model (HTTP 409 territory)."""


class BackendError(Exception):
    """The model itself failed (HTTP 500 territory)."""


class DenoiserBackend:
    """Interface: deterministic (request, seed) -> clean-frame prediction."""

    latent_support = False

    def denoise(self, request: DenoiseRequest, noised: np.ndarray) -> DenoiseResponse:
        raise NotImplementedError


class MockBackend(DenoiserBackend):
    """Identity denoiser used for conformance tests and dry runs."""

    latent_support = False

    def denoise(self, request: DenoiseRequest, noised: np.ndarray) -> DenoiseResponse:
        return DenoiseResponse(provider_id="mock-echo", denoised_rgb=request.images)


def _downsample4(frames: np.ndarray) -> np.ndarray:
    n, h, w, c = frames.shape
    hh, ww = max(h // 4, 1), max(w // 4, 1)
    cut = frames[:, : hh * 4, : ww * 4, :]
    return cut.reshape(n, hh, 4, ww, 4, c).mean(axis=(2, 4)).astype(np.float32)


class ToyPriorBackend(DenoiserBackend):
    """Deterministic stand-in denoiser with noise-level-dependent output.

    The "prior" is a fixed smooth gradient image; the prediction blends
    the noised input toward it by the noise level, then clips to [0, 1].
    """

    latent_support = True

    def denoise(self, request: DenoiseRequest, noised: np.ndarray) -> DenoiseResponse:
        n, h, w, _ = request.images.shape
        ys = np.linspace(0.2, 0.8, h, dtype=np.float32)[:, None]
        xs = np.linspace(0.3, 0.7, w, dtype=np.float32)[None, :]
        prior = np.stack([ys + 0 * xs, 0 * ys + xs, 0.5 * (ys + xs)], axis=-1)
        t = np.float32(request.noise_level)
        pred = np.clip((1 - t) * noised + t * prior[None], 0.0, 1.0).astype(np.float32)
        return DenoiseResponse(
            provider_id="toyprior",
            denoised_rgb=pred,
            denoised_latent=_downsample4(pred),
            rendered_latent=_downsample4(request.images),
        )


_BACKENDS: dict[str, type[DenoiserBackend]] = {
    "mock": MockBackend,
    "toyprior": ToyPriorBackend,
}


def register_backend(name: str, cls: type[DenoiserBackend]) -> None:
    """Extension hook for real diffusion model wrappers."""
    _BACKENDS[name] = cls


def make_backend(model_id: str) -> DenoiserBackend:
    if model_id not in _BACKENDS:
        raise BackendError(
            f"no backend named {model_id!r}; built-ins are {sorted(_BACKENDS)} "
            "and real models attach via register_backend()"
        )
    return _BACKENDS[model_id]()


@dataclass
class ModelSlot:
    """One loaded denoiser serving one guidance kind."""

    kind: str
    model_id: str
    guidance_scale: float = 100.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SlotError(f"unknown slot kind {self.kind!r}")
        self.backend = make_backend(self.model_id)

    @property
    def latent_support(self) -> bool:
        return self.backend.latent_support

    def run(self, request: DenoiseRequest) -> DenoiseResponse:
        # Noise injection happens service-side: the engine always sends
        # clean renders and never sees schedule constants.
        rng = np.random.default_rng(request.seed)
        noise = rng.standard_normal(request.images.shape).astype(np.float32)
        t = np.float32(request.noise_level)
        noised = np.sqrt(1.0 - t * t) * request.images + t * noise
        return self.backend.denoise(request, noised)
