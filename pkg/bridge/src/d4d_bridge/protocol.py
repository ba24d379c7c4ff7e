"""Wire protocol framing, implemented independently of the engine.

Frame layout (bit-exact contract):

* 8-byte magic ``D4DGUID1``
* little-endian u32 header length
* UTF-8 JSON header, canonical form (sorted keys, ``,``/``:`` separators)
* raw little-endian float32 payload(s), row-major, frame-major

Request headers carry ``kind``, ``prompt``, ``cameras``, ``t``,
``guidance_scale``, ``seed``, ``shape`` and ``dtype`` (always ``f32le``).
Response headers carry ``provider_id``, ``has_latent``, ``rgb_shape`` and,
when latents are present, ``latent_shape``; latent payloads follow the rgb
payload in the order (denoised, rendered).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"D4DGUID1"
VERSION = "1"

KINDS = ("image2d", "multiview3d", "video")


class ProtocolError(Exception):
    """Malformed framing or payload (HTTP 400 territory)."""


class VersionError(ProtocolError):
    """Foreign magic: a different protocol version or not ours at all."""


@dataclass
class DenoiseRequest:
    kind: str
    images: np.ndarray  # (N, H, W, 3) float32
    prompt: str
    cameras: list[dict]
    noise_level: float
    guidance_scale: float
    seed: int = 0


@dataclass
class DenoiseResponse:
    provider_id: str
    denoised_rgb: np.ndarray
    denoised_latent: np.ndarray | None = None
    rendered_latent: np.ndarray | None = None

    @property
    def has_latent(self) -> bool:
        return self.denoised_latent is not None and self.rendered_latent is not None


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def split_frame(blob: bytes) -> tuple[dict, bytes]:
    if len(blob) < 12:
        raise ProtocolError("frame shorter than magic plus header length")
    if blob[:8] != MAGIC:
        raise VersionError(f"unexpected magic {blob[:8]!r}")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    if len(blob) < 12 + hlen:
        raise ProtocolError("frame header truncated")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"header is not valid JSON: {exc}") from exc
    return header, blob[12 + hlen :]


def join_frame(header: dict, payloads: list[np.ndarray]) -> bytes:
    hdr = canonical_json(header)
    parts = [MAGIC, struct.pack("<I", len(hdr)), hdr]
    parts += [np.ascontiguousarray(p, dtype="<f4").tobytes() for p in payloads]
    return b"".join(parts)


def _read_array(raw: bytes, offset: int, shape: tuple[int, ...]) -> tuple[np.ndarray, int]:
    count = int(np.prod(shape))
    end = offset + count * 4
    if len(raw) < end:
        raise ProtocolError(
            f"payload truncated: expected {count * 4} bytes at {offset}, "
            f"have {len(raw) - offset}"
        )
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
    return arr.copy(), end


def parse_request(blob: bytes) -> DenoiseRequest:
    header, raw = split_frame(blob)
    try:
        kind = header["kind"]
        if kind not in KINDS:
            raise ProtocolError(f"unknown guidance kind {kind!r}")
        if header["dtype"] != "f32le":
            raise ProtocolError(f"unsupported dtype {header['dtype']!r}")
        shape = tuple(int(v) for v in header["shape"])
        if len(shape) != 4 or shape[-1] != 3:
            raise ProtocolError(f"image shape must be (N, H, W, 3), got {shape}")
        images, _ = _read_array(raw, 0, shape)
        return DenoiseRequest(
            kind=kind,
            images=images,
            prompt=str(header["prompt"]),
            cameras=list(header["cameras"]),
            noise_level=float(header["t"]),
            guidance_scale=float(header["guidance_scale"]),
            seed=int(header["seed"]),
        )
    except KeyError as exc:
        raise ProtocolError(f"request header missing field {exc}") from exc


def serialize_response(resp: DenoiseResponse) -> bytes:
    header = {
        "provider_id": resp.provider_id,
        "has_latent": bool(resp.has_latent),
        "rgb_shape": list(resp.denoised_rgb.shape),
    }
    payloads = [resp.denoised_rgb]
    if resp.has_latent:
        header["latent_shape"] = list(resp.denoised_latent.shape)
        payloads += [resp.denoised_latent, resp.rendered_latent]
    return join_frame(header, payloads)


def parse_response(blob: bytes) -> DenoiseResponse:
    header, raw = split_frame(blob)
    try:
        rgb, offset = _read_array(raw, 0, tuple(int(v) for v in header["rgb_shape"]))
        den = ren = None
        if header.get("has_latent"):
            lshape = tuple(int(v) for v in header["latent_shape"])
            den, offset = _read_array(raw, offset, lshape)
            ren, offset = _read_array(raw, offset, lshape)
        return DenoiseResponse(
            provider_id=str(header["provider_id"]),
            denoised_rgb=rgb,
            denoised_latent=den,
            rendered_latent=ren,
        )
    except KeyError as exc:
        raise ProtocolError(f"response header missing field {exc}") from exc
