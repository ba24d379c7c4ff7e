"""Guidance service for the d4d engine's denoising wire protocol."""

from .models import BackendError, DenoiserBackend, ModelSlot, SlotError, register_backend
from .protocol import (
    DenoiseRequest,
    DenoiseResponse,
    ProtocolError,
    VersionError,
    parse_request,
    parse_response,
    serialize_response,
)
from .service import GuidanceService, ServiceConfig

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "DenoiseRequest",
    "DenoiseResponse",
    "DenoiserBackend",
    "GuidanceService",
    "ModelSlot",
    "ProtocolError",
    "ServiceConfig",
    "SlotError",
    "VersionError",
    "parse_request",
    "parse_response",
    "register_backend",
    "serialize_response",
]
