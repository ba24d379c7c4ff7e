"""Generate the committed golden-bytes fixtures.

Run once (and only rerun on a deliberate protocol change):

    python bridge/tools/make_golden.py

Request frames are produced by the ENGINE's encoder and the expected
responses by the BRIDGE's mock service, so the fixtures pin both
independent implementations to the same bytes.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).resolve().parent
GOLDEN = HERE.parent / "tests" / "golden"

sys.path.insert(0, str(HERE.parent / "src"))

from d4d.guidance import CameraParams, GuidanceRequest, encode_request  # noqa: E402

from d4d_bridge.service import GuidanceService, ServiceConfig  # noqa: E402


def deterministic_images(n, h, w, seed):
    rng = np.random.default_rng(seed)
    return rng.random((n, h, w, 3)).astype(np.float32)


def main():
    GOLDEN.mkdir(parents=True, exist_ok=True)
    service = GuidanceService(ServiceConfig.mock())
    cases = []

    specs = [
        ("image2d", 1, (6, 8), "a golden cat", 100.0, 11),
        ("multiview3d", 4, (6, 8), "a golden statue", 50.0, 22),
        ("video", 24, (6, 8), "a golden flame", 100.0, 33),
    ]
    for kind, n, (h, w), prompt, scale, seed in specs:
        request = GuidanceRequest(
            kind=kind,
            images=deterministic_images(n, h, w, seed),
            prompt=prompt,
            cameras=[CameraParams(360.0 * k / n, 12.5, 1.8, 47.5) for k in range(n)],
            noise_level=0.73,
            guidance_scale=scale,
            seed=seed,
        )
        blob = encode_request(request)
        status, body = service.handle_denoise(blob)
        assert status == 200, status
        (GOLDEN / f"request_{kind}.bin").write_bytes(blob)
        (GOLDEN / f"response_{kind}.bin").write_bytes(body)
        cases.append(
            {
                "name": f"{kind} echo round trip",
                "request": f"request_{kind}.bin",
                "response": f"response_{kind}.bin",
                "status": 200,
            }
        )

    # Error-path fixtures.
    good = (GOLDEN / "request_image2d.bin").read_bytes()
    bad_magic = b"D4DGUID2" + good[8:]
    (GOLDEN / "request_bad_magic.bin").write_bytes(bad_magic)
    cases.append(
        {
            "name": "version mismatch rejected",
            "request": "request_bad_magic.bin",
            "status": 400,
        }
    )
    truncated = good[: len(good) - 17]
    (GOLDEN / "request_truncated.bin").write_bytes(truncated)
    cases.append(
        {"name": "truncated payload rejected", "request": "request_truncated.bin", "status": 400}
    )

    (GOLDEN / "manifest.json").write_text(
        json.dumps({"protocol": "D4DGUID1", "cases": cases}, indent=2) + "\n"
    )
    print(f"wrote {len(cases)} fixture cases to {GOLDEN}")


if __name__ == "__main__":
    main()
