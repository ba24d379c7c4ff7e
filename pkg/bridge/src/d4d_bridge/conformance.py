"""Golden-fixture conformance: every byte of framing is the contract.

The committed fixtures hold request frames (produced once by the engine's
encoder), the mock service's expected response bytes, and malformed
frames with their expected HTTP statuses. ``run_conformance`` replays
them against the in-process service handler and reports mismatches.
"""

from __future__ import annotations

import json
from pathlib import Path

from .service import GuidanceService, ServiceConfig

DEFAULT_GOLDEN = Path(__file__).resolve().parents[2] / "tests" / "golden"


def run_conformance(golden_dir=None, verbose: bool = True) -> list[str]:
    golden = Path(golden_dir) if golden_dir else DEFAULT_GOLDEN
    manifest = json.loads((golden / "manifest.json").read_text())
    service = GuidanceService(ServiceConfig.mock())
    failures = []
    for case in manifest["cases"]:
        request = (golden / case["request"]).read_bytes()
        status, body = service.handle_denoise(request)
        ok = status == case["status"]
        if ok and "response" in case:
            expected = (golden / case["response"]).read_bytes()
            ok = body == expected
        if verbose:
            print(f"[{'PASS' if ok else 'FAIL'}] {case['name']} (HTTP {status})")
        if not ok:
            failures.append(case["name"])
    return failures
