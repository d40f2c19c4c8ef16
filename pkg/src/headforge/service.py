"""Local render-at-pose HTTP service backing the pose editor.

Endpoints:
  GET  /head         asset metadata as JSON
  POST /render       pose JSON {yaw,pitch,roll (deg), tx,ty,tz (mm), fill?}
                     -> image/png of the reprojected head
  GET  /mask?pose=   hole mask for the given (URL-encoded JSON) pose as PNG
  GET  /ui/...       static files of the editor (when a ui directory is set)

The service holds the assets read-only; every render is stateless in the
request body, so identical requests produce identical bytes.
"""

from __future__ import annotations

import json
import mimetypes
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, unquote, urlparse

import numpy as np

from .fileio import png_bytes
from .manipulate import HeadAssets, PoseDelta, fill_holes, manipulate_pose

_POSE_KEYS = {"yaw", "pitch", "roll", "tx", "ty", "tz"}


class PoseRequestError(ValueError):
    pass


def parse_pose_json(text: str) -> tuple[PoseDelta, bool]:
    """Strict pose parsing: numeric known keys only, optional boolean fill."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PoseRequestError(f"invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise PoseRequestError("pose must be a JSON object")
    unknown = set(raw) - _POSE_KEYS - {"fill"}
    if unknown:
        raise PoseRequestError(f"unknown pose keys: {sorted(unknown)}")
    fill = raw.pop("fill", False)
    if not isinstance(fill, bool):
        raise PoseRequestError("fill must be a boolean")
    values = {}
    for key, value in raw.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise PoseRequestError(f"pose key {key!r} must be a number")
        if not np.isfinite(value):
            raise PoseRequestError(f"pose key {key!r} must be finite")
        values[key] = float(value)
    return PoseDelta(**values), fill


def _render_bytes(assets: HeadAssets, delta: PoseDelta, fill: bool) -> bytes:
    image, hole, _ = manipulate_pose(assets, delta)
    metadata = None
    if fill:
        image = fill_holes(image, hole)
        metadata = {"headforge:filled": "1",
                    "headforge:filled_pixels": str(int(hole.sum()))}
    return png_bytes(image, metadata=metadata)


def _mask_bytes(assets: HeadAssets, delta: PoseDelta) -> bytes:
    _, hole, _ = manipulate_pose(assets, delta)
    return png_bytes(hole.astype(np.float64))


def make_handler(assets: HeadAssets, ui_dir: str | None):
    ui_root = Path(ui_dir).resolve() if ui_dir else None

    class Handler(BaseHTTPRequestHandler):
        server_version = "headforge"

        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _send(self, status: int, body: bytes, content_type: str):
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _send_json(self, status: int, payload: dict):
            self._send(status, json.dumps(payload).encode(), "application/json")

        def do_GET(self):
            url = urlparse(self.path)
            if url.path == "/head":
                meta = {
                    "face_vertices": int(len(assets.face_mesh.vertices)),
                    "face_triangles": int(len(assets.face_mesh.triangles)),
                    "hair_vertices": int(len(assets.hair_mesh.vertices))
                    if assets.hair_mesh is not None else 0,
                    "gamma": [float(g) for g in assets.gamma],
                    "camera": {
                        "focal": float(assets.camera.focal),
                        "principal_point": [float(c) for c in assets.camera.principal_point],
                        "width": assets.camera.width,
                        "height": assets.camera.height,
                    },
                    "source_pose": {
                        "quaternion": [float(q) for q in assets.source_pose.quaternion],
                        "translation": [float(t) for t in assets.source_pose.translation],
                    },
                    "head_center": [float(c) for c in assets.head_center],
                }
                self._send_json(200, meta)
            elif url.path == "/mask":
                query = parse_qs(url.query)
                if "pose" not in query:
                    self._send_json(400, {"error": "missing pose query parameter"})
                    return
                try:
                    delta, _ = parse_pose_json(unquote(query["pose"][0]))
                except PoseRequestError as exc:
                    self._send_json(400, {"error": str(exc)})
                    return
                self._send(200, _mask_bytes(assets, delta), "image/png")
            elif url.path == "/ui" or url.path.startswith("/ui/"):
                self._serve_static(url.path)
            else:
                self._send_json(404, {"error": f"no such endpoint {url.path}"})

        def do_POST(self):
            url = urlparse(self.path)
            if url.path != "/render":
                self._send_json(404, {"error": f"no such endpoint {url.path}"})
                return
            length = int(self.headers.get("Content-Length", 0))
            body = self.rfile.read(length).decode("utf-8", errors="replace")
            try:
                delta, fill = parse_pose_json(body)
            except PoseRequestError as exc:
                self._send_json(400, {"error": str(exc)})
                return
            try:
                png = _render_bytes(assets, delta, fill)
            except Exception as exc:
                self._send_json(500, {"error": f"{type(exc).__name__}: {exc}"})
                return
            self._send(200, png, "image/png")

        def _serve_static(self, path: str):
            if ui_root is None:
                self._send_json(404, {"error": "no ui directory configured"})
                return
            rel = path[len("/ui"):].lstrip("/") or "index.html"
            target = (ui_root / rel).resolve()
            if not str(target).startswith(str(ui_root)) or not target.is_file():
                self._send_json(404, {"error": f"no such file {rel}"})
                return
            ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
            self._send(200, target.read_bytes(), ctype)

    return Handler


def make_server(assets: HeadAssets, host: str = "127.0.0.1", port: int = 0,
                ui_dir: str | None = None) -> ThreadingHTTPServer:
    """Bound server (port 0 picks a free one); call serve_forever to run."""
    return ThreadingHTTPServer((host, port), make_handler(assets, ui_dir))


def serve(assets: HeadAssets, host: str = "127.0.0.1", port: int = 8377,
          ui_dir: str | None = None) -> None:
    server = make_server(assets, host, port, ui_dir)
    print(f"serving on http://{host}:{server.server_address[1]}"
          + (f" (ui at /ui from {ui_dir})" if ui_dir else ""))
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def start_background(assets: HeadAssets, host: str = "127.0.0.1",
                     ui_dir: str | None = None):
    """Server on a free port in a daemon thread; returns (server, base_url).
    Used by tests; shut down with server.shutdown()."""
    server = make_server(assets, host, 0, ui_dir)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, f"http://{host}:{server.server_address[1]}"
