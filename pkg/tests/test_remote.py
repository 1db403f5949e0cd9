import io
import subprocess
import sys
import time

import numpy as np
import pytest

from splat4d.remote import (ProtocolError, RemoteDenoiser, decode_request, decode_response, encode_request,
                            encode_response, read_frame, serve, write_frame)
from splat4d.sds import BlurDenoiser, IdentityDenoiser


def test_request_roundtrip(rng):
    frames = rng.uniform(size=(3, 4, 5, 3)).astype(np.float32)
    f, c, s = decode_request(encode_request(frames, 1, 0.25))
    np.testing.assert_array_equal(f, frames)
    assert c == 1 and s == 0.25


def test_request_layout():
    payload = encode_request(np.zeros((2, 3, 4, 3)), 1, 0.5)
    assert payload[:4] == b"SDQ1"
    assert np.frombuffer(payload[4:24], "<u4").tolist() == [2, 3, 4, 3, 1]
    assert np.frombuffer(payload[24:32], "<f8")[0] == 0.5
    assert len(payload) == 32 + 4 * 2 * 3 * 4 * 3


def test_response_roundtrip_and_errors(rng):
    x = rng.uniform(size=(2, 3, 4, 3)).astype(np.float32)
    np.testing.assert_array_equal(decode_response(encode_response(x)), x)
    with pytest.raises(ProtocolError, match="boom"):
        decode_response(encode_response(error="boom"))
    with pytest.raises(ProtocolError):
        decode_response(b"XXXX" + bytes(4))
    with pytest.raises(ProtocolError):
        decode_request(b"SDQ1" + bytes(10))


def test_truncated_body_rejected():
    payload = encode_request(np.zeros((1, 2, 2, 3)), 0, 0.1)
    with pytest.raises(ProtocolError):
        decode_request(payload[:-4])


def test_serve_over_buffers(rng):
    frames = rng.uniform(size=(2, 36, 64, 3))
    inp = io.BytesIO()
    write_frame(inp, encode_request(frames, 0, 0.3))
    write_frame(inp, encode_request(np.zeros((2, 10, 10, 3)), 0, 0.3))   # wrong size: error reply
    write_frame(inp, b"")
    inp.seek(0)
    out = io.BytesIO()
    assert serve(IdentityDenoiser(), inp, out) == 2
    out.seek(0)
    np.testing.assert_allclose(decode_response(read_frame(out)), frames, atol=1e-7)
    with pytest.raises(ProtocolError, match="denoiser expects"):
        decode_response(read_frame(out))


def test_read_frame_at_eof():
    assert read_frame(io.BytesIO()) is None
    with pytest.raises(ProtocolError):
        read_frame(io.BytesIO(b"\x10\x00\x00\x00abc"))


def test_exec_transport_matches_in_process(rng):
    noisy = rng.uniform(size=(4, 36, 64, 3))
    cmd = f"exec:{sys.executable} -m splat4d.remote --oracle blur"
    with RemoteDenoiser(cmd) as den:
        remote = den.denoise(noisy, 0, 0.2)
        again = den.denoise(noisy, 0, 0.2)
    local = BlurDenoiser().denoise(noisy.astype(np.float32).astype(np.float64), 0, 0.2)
    np.testing.assert_allclose(remote, local, atol=1e-6)
    np.testing.assert_array_equal(remote, again)


def test_unix_socket_transport(tmp_path, rng):
    path = tmp_path / "den.sock"
    proc = subprocess.Popen([sys.executable, "-m", "splat4d.remote", "--oracle", "identity",
                             "--listen", f"unix:{path}"])
    try:
        for _ in range(200):
            if path.exists():
                break
            time.sleep(0.05)
        noisy = rng.uniform(size=(2, 36, 64, 3))
        with RemoteDenoiser(f"unix:{path}") as den:
            np.testing.assert_allclose(den.denoise(noisy, 0, 0.1), noisy, atol=1e-7)
    finally:
        proc.kill()
        proc.wait()
