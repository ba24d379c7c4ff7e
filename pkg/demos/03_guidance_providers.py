"""Guidance providers and the reconstruction-style distillation loss.

Shows the three built-in provider families: the oracle (fixed reference
targets; distillation becomes photometric fitting), the analytic toy
denoiser (known fixed point, handy for convergence tests), and the
remote client speaking the binary wire protocol to an in-process stub
service.

Run:  python demos/03_guidance_providers.py
"""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from d4d.guidance import (
    AnalyticProvider,
    CameraParams,
    GuidanceRequest,
    GuidanceResponse,
    NoiseSchedule,
    OracleProvider,
    RemoteProvider,
    decode_request,
    encode_response,
    sample_noise_level,
    sds_reconstruction_loss,
)

rng = np.random.default_rng(0)

# The annealed noise-level schedule: starts pinned at 0.99 and widens
# toward [0.2, 0.5] by the end of training.
sched = NoiseSchedule()
for it in (0, 2500, 5000, 7500, 10000):
    lo, hi = sched.range_at(it)
    print(f"iteration {it:5d}: t ~ U[{lo:.3f}, {hi:.3f}] "
          f"(sample: {sample_noise_level(sched, it, rng):.3f})")

# Oracle provider: descending the distillation loss fits the reference.
target = np.full((1, 8, 8, 3), 0.25)
provider = OracleProvider(target)
pixels = rng.random((1, 8, 8, 3))
for step in range(400):
    req = GuidanceRequest(
        kind="image2d", images=pixels, prompt="demo",
        cameras=[CameraParams(0, 0, 1.8, 45)], noise_level=0.5, guidance_scale=1.0,
    )
    loss, grad = sds_reconstruction_loss(pixels, provider.denoise(req), want_grad=True)
    pixels = pixels - 0.01 * grad * pixels.size
print(f"\noracle fitting: final max |pixel - target| = {np.abs(pixels - target).max():.2e}")

# Analytic provider: the descent fixed point is the mean image.
mean = np.full((8, 8, 3), 0.6)
analytic = AnalyticProvider(mean, blend=0.5)
pixels = rng.random((1, 8, 8, 3))
losses = []
for step in range(200):
    req = GuidanceRequest(
        kind="image2d", images=pixels, prompt="demo",
        cameras=[CameraParams(0, 0, 1.8, 45)], noise_level=0.5, guidance_scale=1.0,
    )
    loss, grad = sds_reconstruction_loss(pixels, analytic.denoise(req), want_grad=True)
    losses.append(loss)
    pixels = pixels - 0.02 * grad * pixels.size
print(f"analytic provider: loss {losses[0]:.3e} -> {losses[-1]:.3e}, "
      f"monotone: {all(a >= b for a, b in zip(losses, losses[1:]))}")


# Remote provider: spin up a minimal echo service speaking the wire
# protocol, then drive it through the HTTP client.
class EchoHandler(BaseHTTPRequestHandler):
    def log_message(self, *a):
        pass

    def do_GET(self):
        body = json.dumps({"version": "1"}).encode()
        self.send_response(200)
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        blob = self.rfile.read(int(self.headers["Content-Length"]))
        req = decode_request(blob)
        out = encode_response(GuidanceResponse(denoised_rgb=req.images, provider_id="demo-echo"))
        self.send_response(200)
        self.end_headers()
        self.wfile.write(out)


server = ThreadingHTTPServer(("127.0.0.1", 0), EchoHandler)
threading.Thread(target=server.serve_forever, daemon=True).start()
url = f"http://127.0.0.1:{server.server_address[1]}"

remote = RemoteProvider(url, timeout=10.0)
req = GuidanceRequest(
    kind="multiview3d", images=rng.random((4, 8, 8, 3)).astype(np.float32),
    prompt="demo", cameras=[CameraParams(90.0 * k, 10, 1.8, 45) for k in range(4)],
    noise_level=0.7, guidance_scale=50.0,
)
resp = remote.denoise(req)
print(f"remote echo round trip: provider={resp.provider_id!r}, "
      f"loss={sds_reconstruction_loss(req.images, resp):.1f}")
server.shutdown()
