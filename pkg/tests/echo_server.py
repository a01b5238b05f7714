"""Local /predict_noise HTTP server used by the remote-guidance tests."""

import json
import threading
from typing import Any, Callable

import numpy as np

from layercut.guidance import decode_image, encode_image


class EchoServer:
    """Tiny local /predict_noise server for tests; ``handler(image, doc)`` builds the reply."""

    def __init__(self, handler: Callable[[np.ndarray, dict], Any] | None = None):
        from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

        outer = self
        self.handler = handler or (lambda img, doc: img)

        class _H(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                n = int(self.headers.get("Content-Length", 0))
                doc = json.loads(self.rfile.read(n))
                shape = (doc["H"], doc["W"]) + ((doc["C"],) if doc["C"] > 1 else ())
                img = decode_image(doc["image"], shape)
                out = outer.handler(img, doc)
                if isinstance(out, tuple):  # (status, raw bytes)
                    status, raw = out
                else:
                    o = np.asarray(out)
                    reply = {"H": o.shape[0], "W": o.shape[1], "C": 1 if o.ndim == 2 else o.shape[2],
                             "image": encode_image(o)}
                    status, raw = 200, json.dumps(reply).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

        class _Server(ThreadingHTTPServer):
            def handle_error(self, request, client_address):
                pass  # clients that time out leave broken pipes behind

        self.server = _Server(("127.0.0.1", 0), _H)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()
