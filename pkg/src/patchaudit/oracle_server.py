"""HTTP serving of a blackbox artifact behind the /predict protocol.

Request : POST /predict {"version": "1", "images": [{data, shape, dtype}, ...]}
Response: {"version": "1", "predictions": [{"label": 0|1, "score": float?} ...]}

Items that fail to decode produce {"error": "..."} in their slot; the rest
of the batch is still answered.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import torch

from .blackbox import WIRE_VERSION, decode_image, load_blackbox_artifact

log = logging.getLogger(__name__)


def _predict_payload(model, payload: dict, expose_scores: bool) -> dict:
    if payload.get("version") != WIRE_VERSION:
        return {"error": f"unsupported protocol version {payload.get('version')!r}"}
    predictions = []
    items = payload.get("images", [])
    decoded: list[np.ndarray | None] = []
    for item in items:
        try:
            decoded.append(decode_image(item))
        except Exception as exc:
            decoded.append(None)
            predictions.append({"error": str(exc)})
            continue
        predictions.append({})
    good = [i for i, arr in enumerate(decoded) if arr is not None]
    if good:
        batch = np.stack([decoded[i] for i in good]).astype(np.float32)
        with torch.inference_mode():
            t = torch.from_numpy(batch).permute(0, 3, 1, 2)
            t = t.contiguous(memory_format=torch.channels_last)
            logits = model.image_logits(t).double().numpy()
        for i, logit in zip(good, logits):
            predictions[i]["label"] = int(logit > 0)
            if expose_scores:
                predictions[i]["score"] = float(1.0 / (1.0 + np.exp(-logit)))
    return {"version": WIRE_VERSION, "predictions": predictions}


class _OracleHandler(BaseHTTPRequestHandler):
    model = None
    expose_scores = False
    lock: threading.Lock = threading.Lock()

    def do_POST(self):
        if self.path != "/predict":
            self.send_error(404, "unknown endpoint")
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length))
        except Exception as exc:
            self._reply(400, {"error": f"bad request: {exc}"})
            return
        with self.lock:
            body = _predict_payload(self.model, payload, self.expose_scores)
        self._reply(400 if "error" in body else 200, body)

    def _reply(self, status: int, body: dict):
        raw = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def log_message(self, fmt, *args):
        log.debug("oracle-server: " + fmt, *args)


def make_server(artifact_path, port: int = 0, host: str = "127.0.0.1",
                expose_scores: bool = False) -> ThreadingHTTPServer:
    """Build (but do not run) the server; port 0 picks a free port."""
    model = load_blackbox_artifact(artifact_path)
    handler = type(
        "BoundOracleHandler",
        (_OracleHandler,),
        {"model": model, "expose_scores": expose_scores, "lock": threading.Lock()},
    )
    return ThreadingHTTPServer((host, port), handler)


def serve_oracle(artifact_path, port: int, host: str = "0.0.0.0",
                 expose_scores: bool = False) -> None:
    server = make_server(artifact_path, port=port, host=host, expose_scores=expose_scores)
    log.info("serving oracle on %s:%d", host, server.server_address[1])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
