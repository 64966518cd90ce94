"""Remote-backbone shim: JSON control frames with raw tensor payloads.

Real diffusion backbones run in their own process and satisfy the
backbone contract over a socket. Each message is a 4-byte little-endian
header length, a JSON header, then the concatenated little-endian
float32 tensor payloads described by the header's ``tensors`` list.

The shim exposes the inference surface (encode / decode / denoise_step /
token registration / checksum). Adapter injection needs direct access to
projection weights, so it stays host-side; calling it on a shim backbone
raises the standard rejection.
"""

from __future__ import annotations

import json
import socket
import struct
import threading
from typing import Sequence

import numpy as np
import torch

from .backbone import DiffusionBackbone, NoiseSchedule
from .errors import ClientError, EraseError, InputValidationError


def _pack(header: dict, tensors: dict[str, np.ndarray] | None = None) -> bytes:
    tensors = tensors or {}
    header = dict(header)
    header["tensors"] = [
        {"name": name, "shape": list(np.asarray(arr).shape)} for name, arr in tensors.items()
    ]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [struct.pack("<I", len(blob)), blob]
    for arr in tensors.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n > 0:
        chunk = sock.recv(min(n, 1 << 16))
        if not chunk:
            raise ClientError("shim connection closed mid-message", retryable=True)
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def _unpack(sock: socket.socket) -> tuple[dict, dict[str, np.ndarray]]:
    (hlen,) = struct.unpack("<I", _recv_exact(sock, 4))
    header = json.loads(_recv_exact(sock, hlen).decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    for spec in header.get("tensors", []):
        shape = tuple(int(s) for s in spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = _recv_exact(sock, count * 4)
        tensors[spec["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return header, tensors


class ShimBackbone(DiffusionBackbone):
    """Client side of the wire protocol; satisfies the backbone contract."""

    def __init__(self, address: str, timeout: float = 120.0):
        host, _, port = address.rpartition(":")
        if not host or not port.isdigit():
            raise InputValidationError(f"shim address must be host:port, got {address!r}")
        self._address = (host, int(port))
        self._timeout = timeout
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()
        meta = self._call("meta")["result"]
        self._latent_shape = tuple(meta["latent_shape"])
        self._image_shape = tuple(meta["image_shape"])
        self.schedule = NoiseSchedule(int(meta["schedule_steps"]))

    def _connect(self) -> socket.socket:
        if self._sock is None:
            try:
                self._sock = socket.create_connection(self._address, timeout=self._timeout)
            except OSError as exc:
                raise ClientError(f"cannot reach shim at {self._address}: {exc}",
                                  retryable=True) from exc
        return self._sock

    def _call(self, op: str, kwargs: dict | None = None,
              tensors: dict[str, np.ndarray] | None = None):
        with self._lock:
            sock = self._connect()
            try:
                sock.sendall(_pack({"op": op, "kwargs": kwargs or {}}, tensors))
                header, payload = _unpack(sock)
            except OSError as exc:
                self._sock = None
                raise ClientError(f"shim transport failure: {exc}", retryable=True) from exc
        if not header.get("ok"):
            kind = header.get("error_kind", "error")
            message = header.get("error", "unknown shim error")
            if kind == "validation":
                raise InputValidationError(message)
            raise EraseError(message)
        return {"result": header.get("result", {}), "tensors": payload}

    def close(self) -> None:
        with self._lock:
            if self._sock is not None:
                self._sock.close()
                self._sock = None

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self._latent_shape

    @property
    def image_shape(self) -> tuple[int, int]:
        return self._image_shape

    def encode(self, image: np.ndarray) -> torch.Tensor:
        out = self._call("encode", tensors={"image": np.asarray(image, dtype=np.float32)})
        return torch.from_numpy(out["tensors"]["latent"])

    def decode(self, latent: torch.Tensor) -> np.ndarray:
        out = self._call("decode", tensors={"latent": latent.detach().numpy()})
        return out["tensors"]["image"]

    def register_tokens(self, tags: Sequence[str]) -> None:
        self._call("register_tokens", kwargs={"tags": list(tags)})

    def denoise_step(self, z_t: torch.Tensor, t: int, cond: Sequence[str]):
        out = self._call(
            "denoise_step",
            kwargs={"t": int(t), "cond": list(cond)},
            tensors={"z_t": z_t.detach().numpy()},
        )
        return (
            torch.from_numpy(out["tensors"]["z0_hat"]),
            torch.from_numpy(out["tensors"]["attn"]),
        )

    def base_checksum(self) -> str:
        return self._call("base_checksum")["result"]["checksum"]


class BackboneServer:
    """Serve any local backbone over the wire protocol (used for testing
    the shim and for wrapping real models in a separate process)."""

    def __init__(self, backbone: DiffusionBackbone, host: str = "127.0.0.1", port: int = 0):
        self.backbone = backbone
        self._server = socket.create_server((host, port))
        self.address = f"{host}:{self._server.getsockname()[1]}"
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> "BackboneServer":
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._server.close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def _loop(self) -> None:
        self._server.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self._server.accept()
            except TimeoutError:
                continue
            except OSError:
                break
            threading.Thread(target=self._serve_conn, args=(conn,), daemon=True).start()

    def _serve_conn(self, conn: socket.socket) -> None:
        with conn:
            while not self._stop.is_set():
                try:
                    header, tensors = _unpack(conn)
                except (ClientError, OSError, json.JSONDecodeError):
                    return
                try:
                    reply, out_tensors = self._dispatch(header, tensors)
                    conn.sendall(_pack({"ok": True, "result": reply}, out_tensors))
                except InputValidationError as exc:
                    conn.sendall(_pack({"ok": False, "error": str(exc),
                                        "error_kind": "validation"}))
                except Exception as exc:  # surface anything else to the client
                    conn.sendall(_pack({"ok": False, "error": str(exc),
                                        "error_kind": "error"}))

    def _dispatch(self, header: dict, tensors: dict[str, np.ndarray]):
        op = header.get("op")
        kwargs = header.get("kwargs", {})
        bb = self.backbone
        if op == "meta":
            return (
                {
                    "latent_shape": list(bb.latent_shape),
                    "image_shape": list(bb.image_shape),
                    "schedule_steps": bb.schedule.steps,
                },
                {},
            )
        if op == "encode":
            latent = bb.encode(tensors["image"])
            return {}, {"latent": latent.detach().numpy()}
        if op == "decode":
            image = bb.decode(torch.from_numpy(tensors["latent"]))
            return {}, {"image": np.asarray(image, dtype=np.float32)}
        if op == "register_tokens":
            bb.register_tokens(kwargs["tags"])
            return {}, {}
        if op == "denoise_step":
            z0_hat, attn = bb.denoise_step(
                torch.from_numpy(tensors["z_t"]), int(kwargs["t"]), kwargs["cond"]
            )
            return {}, {
                "z0_hat": z0_hat.detach().numpy(),
                "attn": attn.detach().numpy(),
            }
        if op == "base_checksum":
            return {"checksum": bb.base_checksum()}, {}
        raise InputValidationError(f"unknown shim op {op!r}")
