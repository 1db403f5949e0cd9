"""Remote denoiser adapter and the length-prefixed binary protocol it speaks.

Every message is framed as a little-endian ``uint32`` byte count followed by
that many payload bytes. A zero-length frame asks the server to stop.

Request payload::

    b"SDQ1"
    uint32 M, uint32 H, uint32 W, uint32 C (= 3), uint32 condition_index
    float64 sigma
    float32[M*H*W*C] frames, row-major (M, H, W, C)

Response payload::

    b"SDR1"
    uint32 status                 # 0 = ok, anything else = error
    ok:    uint32 M, H, W, C, then float32[M*H*W*C] x0 frames
    error: UTF-8 message (rest of the payload)

Addresses: ``host:port`` for TCP, ``unix:/path`` for a Unix socket, or
``exec:<command line>`` to spawn a server and talk over its stdin/stdout.
Run a bundled oracle as a server with ``python -m splat4d.remote``.
"""
from __future__ import annotations

import argparse
import shlex
import socket
import struct
import subprocess
import sys

import numpy as np

from .sds import BlurDenoiser, Denoiser, IdentityDenoiser

REQUEST_MAGIC = b"SDQ1"
RESPONSE_MAGIC = b"SDR1"
_REQ_HEAD = struct.Struct("<4s5Id")
_RESP_STATUS = struct.Struct("<4sI")
_DIMS = struct.Struct("<4I")
_LEN = struct.Struct("<I")


class ProtocolError(RuntimeError):
    pass


def encode_request(frames: np.ndarray, condition_index: int, sigma: float) -> bytes:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 4:
        raise ValueError("frames must be (M, H, W, C)")
    M, H, W, C = frames.shape
    return _REQ_HEAD.pack(REQUEST_MAGIC, M, H, W, C, condition_index, float(sigma)) + frames.tobytes()


def decode_request(payload: bytes) -> tuple[np.ndarray, int, float]:
    if len(payload) < _REQ_HEAD.size:
        raise ProtocolError("truncated request")
    magic, M, H, W, C, cidx, sigma = _REQ_HEAD.unpack_from(payload)
    if magic != REQUEST_MAGIC:
        raise ProtocolError(f"bad request magic {magic!r}")
    body = payload[_REQ_HEAD.size:]
    if len(body) != 4 * M * H * W * C:
        raise ProtocolError("request body size does not match its header")
    return np.frombuffer(body, dtype="<f4").reshape(M, H, W, C).astype(np.float64), cidx, sigma


def encode_response(x0: np.ndarray | None = None, error: str | None = None) -> bytes:
    if error is not None:
        return _RESP_STATUS.pack(RESPONSE_MAGIC, 1) + error.encode("utf-8")
    x0 = np.ascontiguousarray(x0, dtype="<f4")
    return _RESP_STATUS.pack(RESPONSE_MAGIC, 0) + _DIMS.pack(*x0.shape) + x0.tobytes()


def decode_response(payload: bytes) -> np.ndarray:
    if len(payload) < _RESP_STATUS.size:
        raise ProtocolError("truncated response")
    magic, status = _RESP_STATUS.unpack_from(payload)
    if magic != RESPONSE_MAGIC:
        raise ProtocolError(f"bad response magic {magic!r}")
    rest = payload[_RESP_STATUS.size:]
    if status != 0:
        raise ProtocolError(f"remote denoiser failed: {rest.decode('utf-8', 'replace')}")
    shape = _DIMS.unpack_from(rest)
    body = rest[_DIMS.size:]
    if len(body) != 4 * int(np.prod(shape)):
        raise ProtocolError("response body size does not match its header")
    return np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float64)


def _read_exact(rfile, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = rfile.read(n - len(buf))
        if not chunk:
            raise ProtocolError("connection closed mid-message")
        buf.extend(chunk)
    return bytes(buf)


def write_frame(wfile, payload: bytes) -> None:
    wfile.write(_LEN.pack(len(payload)) + payload)
    wfile.flush()


def read_frame(rfile) -> bytes | None:
    head = rfile.read(_LEN.size)
    if not head:
        return None
    if len(head) < _LEN.size:
        head += _read_exact(rfile, _LEN.size - len(head))
    (n,) = _LEN.unpack(head)
    return _read_exact(rfile, n) if n else b""


def serve(denoiser: Denoiser, rfile, wfile) -> int:
    """Answer requests until EOF or a zero-length frame; returns the number served."""
    served = 0
    while True:
        payload = read_frame(rfile)
        if not payload:
            return served
        try:
            frames, cidx, sigma = decode_request(payload)
            reply = encode_response(denoiser.denoise(frames, cidx, sigma))
        except Exception as exc:  # report to the client, keep serving
            reply = encode_response(error=f"{type(exc).__name__}: {exc}")
        write_frame(wfile, reply)
        served += 1


class RemoteDenoiser(Denoiser):
    """Client side: forwards every ``denoise`` call and waits for the reply."""

    def __init__(self, address: str, height: int = 36, width: int = 64, frames: int = 16):
        super().__init__(height, width, frames)
        self.address = address
        self._proc = None
        self._sock = None
        if address.startswith("exec:"):
            self._proc = subprocess.Popen(shlex.split(address[5:]), stdin=subprocess.PIPE, stdout=subprocess.PIPE)
            self._r, self._w = self._proc.stdout, self._proc.stdin
        else:
            if address.startswith("unix:"):
                self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
                self._sock.connect(address[5:])
            else:
                host, _, port = address.rpartition(":")
                self._sock = socket.create_connection((host or "127.0.0.1", int(port)))
            self._r = self._sock.makefile("rb")
            self._w = self._sock.makefile("wb")

    def denoise(self, noisy, condition_index, sigma):
        self.check(noisy)
        write_frame(self._w, encode_request(noisy, condition_index, sigma))
        payload = read_frame(self._r)
        if payload is None:
            raise ProtocolError("remote denoiser closed the connection")
        x0 = decode_response(payload)
        if x0.shape != np.shape(noisy):
            raise ProtocolError(f"remote returned {x0.shape}, expected {np.shape(noisy)}")
        return x0

    def close(self) -> None:
        try:
            write_frame(self._w, b"")
        except (OSError, ValueError):
            pass
        if self._sock is not None:
            self._sock.close()
        if self._proc is not None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _make_oracle(name: str, height: int, width: int, frames: int) -> Denoiser:
    if name == "identity":
        return IdentityDenoiser(height, width, frames)
    if name == "blur":
        return BlurDenoiser(height, width, frames)
    raise SystemExit(f"unknown oracle {name!r}")


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="python -m splat4d.remote", description="Serve an oracle denoiser.")
    ap.add_argument("--oracle", choices=["identity", "blur"], default="identity")
    ap.add_argument("--listen", help="host:port or unix:/path; default is stdin/stdout")
    ap.add_argument("--height", type=int, default=36)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--frames", type=int, default=16)
    args = ap.parse_args(argv)
    den = _make_oracle(args.oracle, args.height, args.width, args.frames)
    if not args.listen:
        serve(den, sys.stdin.buffer, sys.stdout.buffer)
        return 0
    if args.listen.startswith("unix:"):
        srv = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        srv.bind(args.listen[5:])
    else:
        host, _, port = args.listen.rpartition(":")
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((host or "127.0.0.1", int(port)))
    srv.listen(1)
    with srv:
        while True:
            conn, _ = srv.accept()
            with conn, conn.makefile("rb") as r, conn.makefile("wb") as w:
                serve(den, r, w)


if __name__ == "__main__":
    sys.exit(main())
