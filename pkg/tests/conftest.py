import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from creativegen.imaging import RasterImage, image_png_bytes


class FakeClock:
    """Injectable clock for deterministic lease and attribution tests."""

    def __init__(self, t=1_700_000_000.0):
        self.t = t
        self._lock = threading.Lock()

    def __call__(self):
        with self._lock:
            return self.t

    def advance(self, dt):
        with self._lock:
            self.t += dt


class CallbackReceiver:
    """Records callback deliveries; can be scripted to fail first N times."""

    def __init__(self, fail_first=0):
        self.deliveries = []
        self.fail_remaining = fail_first
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length)) if length else {}
                if outer.fail_remaining > 0:
                    outer.fail_remaining -= 1
                    self.send_response(500)
                    self.end_headers()
                    return
                outer.deliveries.append(body)
                self.send_response(200)
                self.send_header("Content-Length", "2")
                self.end_headers()
                self.wfile.write(b"{}")

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self):
        return f"http://127.0.0.1:{self.server.server_port}/callback"

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def callback_receiver():
    receivers = []

    def make(fail_first=0):
        r = CallbackReceiver(fail_first=fail_first)
        receivers.append(r)
        return r

    yield make
    for r in receivers:
        r.close()


def make_product_png(color=(200, 30, 30), size=48, inset=10, seed=None):
    """PNG bytes of a simple product: colored square on opaque white."""
    px = np.full((size, size, 4), 255, dtype=np.uint8)
    if seed is not None:
        rng = np.random.default_rng(seed)
        color = tuple(int(v) for v in rng.integers(0, 256, 3))
    px[inset:-inset, inset:-inset, :3] = color
    return image_png_bytes(RasterImage(px))


def product_b64(**kwargs):
    return base64.b64encode(make_product_png(**kwargs)).decode("ascii")
