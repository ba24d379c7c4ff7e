"""Service behavior over live HTTP: health, slots, errors, backpressure."""

import json
import threading
import urllib.error
import urllib.request

import numpy as np
import pytest

from d4d_bridge.models import MockBackend, ModelSlot, ToyPriorBackend
from d4d_bridge.protocol import (
    DenoiseRequest,
    canonical_json,
    join_frame,
    parse_response,
)
from d4d_bridge.service import GuidanceService, ServiceConfig


def make_request_blob(kind="image2d", n=1, hw=(4, 4), seed=5, t=0.5):
    rng = np.random.default_rng(seed)
    images = rng.random((n, hw[0], hw[1], 3)).astype(np.float32)
    header = {
        "kind": kind,
        "prompt": "service test",
        "cameras": [
            {"azimuth": 90.0 * k, "elevation": 10.0, "radius": 1.8, "fov_y": 45.0}
            for k in range(n)
        ],
        "t": t,
        "guidance_scale": 100.0,
        "seed": seed,
        "shape": list(images.shape),
        "dtype": "f32le",
    }
    return join_frame(header, [images]), images


def post(url, blob, timeout=10.0):
    req = urllib.request.Request(
        url + "/v1/denoise", data=blob, method="POST",
        headers={"Content-Type": "application/octet-stream"},
    )
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return resp.status, resp.read()


@pytest.fixture
def mock_service():
    service = GuidanceService(ServiceConfig.mock())
    url = service.start()
    yield service, url
    service.stop()


class TestHealth:
    def test_reports_version_one_and_slots(self, mock_service):
        _, url = mock_service
        with urllib.request.urlopen(url + "/v1/health", timeout=5) as resp:
            body = json.loads(resp.read())
        assert body["version"] == "1"
        assert set(body["slots"]) == {"image2d", "multiview3d", "video"}

    def test_unknown_path_404(self, mock_service):
        _, url = mock_service
        with pytest.raises(urllib.error.HTTPError) as err:
            urllib.request.urlopen(url + "/v1/nope", timeout=5)
        assert err.value.code == 404


class TestDenoise:
    def test_mock_echoes_request_payload(self, mock_service):
        _, url = mock_service
        blob, images = make_request_blob()
        status, body = post(url, blob)
        assert status == 200
        resp = parse_response(body)
        np.testing.assert_array_equal(resp.denoised_rgb, images)

    def test_all_kinds_served(self, mock_service):
        _, url = mock_service
        for kind, n in (("image2d", 1), ("multiview3d", 4), ("video", 24)):
            blob, images = make_request_blob(kind=kind, n=n)
            status, body = post(url, blob)
            assert status == 200
            np.testing.assert_array_equal(parse_response(body).denoised_rgb, images)

    def test_fixed_seed_byte_identical_responses(self, mock_service):
        _, url = mock_service
        blob, _ = make_request_blob(seed=77)
        _, body1 = post(url, blob)
        _, body2 = post(url, blob)
        assert body1 == body2

    def test_malformed_framing_400(self, mock_service):
        _, url = mock_service
        with pytest.raises(urllib.error.HTTPError) as err:
            post(url, b"garbage bytes that are not a frame")
        assert err.value.code == 400

    def test_unloaded_slot_409(self):
        service = GuidanceService(
            ServiceConfig(port=0, slots={"image2d": "mock"})
        )
        url = service.start()
        try:
            blob, _ = make_request_blob(kind="video", n=24)
            with pytest.raises(urllib.error.HTTPError) as err:
                post(url, blob)
            assert err.value.code == 409
        finally:
            service.stop()

    def test_backpressure_429_above_limit(self):
        config = ServiceConfig.mock(max_concurrency=1, mock_delay_s=0.4)
        service = GuidanceService(config)
        url = service.start()
        try:
            blob, _ = make_request_blob()
            results = []

            def worker():
                try:
                    results.append(post(url, blob)[0])
                except urllib.error.HTTPError as err:
                    results.append(err.code)

            threads = [threading.Thread(target=worker) for _ in range(4)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            assert 200 in results
            assert 429 in results
        finally:
            service.stop()


class TestToyPriorBackend:
    def test_latents_returned(self):
        slot = ModelSlot("video", "toyprior")
        assert slot.latent_support
        blob, images = make_request_blob(kind="video", n=24, hw=(8, 8))
        from d4d_bridge.protocol import parse_request

        resp = slot.run(parse_request(blob))
        assert resp.has_latent
        assert resp.denoised_latent.shape == (24, 2, 2, 3)
        assert resp.rendered_latent.shape == (24, 2, 2, 3)

    def test_low_noise_approaches_input(self):
        # halving t halves-ish the deviation from the input: the 1-step
        # prediction approaches the clean frames as the noise level drops
        slot = ModelSlot("image2d", "toyprior")
        diffs = []
        for t in (0.4, 0.2, 0.1, 0.05):
            blob, images = make_request_blob(t=t, seed=3)
            from d4d_bridge.protocol import parse_request

            resp = slot.run(parse_request(blob))
            diffs.append(float(np.mean(np.abs(resp.denoised_rgb - images))))
        assert all(a > b for a, b in zip(diffs, diffs[1:]))
        assert diffs[-1] < 0.25 * diffs[0] + 1e-6

    def test_unknown_backend_rejected(self):
        from d4d_bridge.models import BackendError

        with pytest.raises(BackendError):
            ModelSlot("image2d", "definitely-not-a-model")


class TestCLI:
    def test_conformance_command(self, capsys):
        from d4d_bridge.__main__ import main

        assert main(["conformance"]) == 0
        assert "[PASS]" in capsys.readouterr().out
