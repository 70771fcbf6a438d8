"""Wire format and remote clients, exercised against an in-process HTTP server."""
import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from coordaug import ddim
from coordaug.alignment import decode_latent, encode_image
from coordaug.backends import (
    RemoteClassifier,
    RemoteCodec,
    RemoteDenoiser,
    RemoteImageEmbedder,
    RemoteTextEmbedder,
    build_backend,
    decode_tensor,
    encode_tensor,
)
from coordaug.errors import BackendError, ConfigError
from coordaug.instance_filter import filter_instance


def test_tensor_layout_is_little_endian_row_major():
    a = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    payload = encode_tensor(a)
    assert payload["shape"] == [2, 3] and payload["dtype"] == "float32"
    raw = base64.b64decode(payload["data"])
    assert raw == np.array([1, 2, 3, 4, 5, 6], dtype="<f4").tobytes()
    assert np.array_equal(decode_tensor(payload), a)


def test_decode_tensor_size_mismatch():
    with pytest.raises(BackendError):
        decode_tensor({"shape": [3], "data": base64.b64encode(b"\0" * 8).decode()})


class _Handler(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        self.server.requests.append((self.path, body))
        if self.path == "/fail":
            self.send_response(500)
            self.end_headers()
            return
        if self.path == "/embed":
            out = {"vectors": [[float(len(t)), 1.0] for t in body["texts"]]}
        elif self.path == "/embed_images":
            out = {"vectors": [[float(decode_tensor(t).mean()), 1.0] for t in body["images"]]}
        elif self.path == "/denoise":
            z = decode_tensor(body["latent"])
            scale = 0.0 if body["condition"] in ("", None) else 1.0
            out = {"epsilon": encode_tensor(np.full_like(z, scale))}
        elif self.path == "/codec/encode":
            img = decode_tensor(body["image"])
            out = {"latent": encode_tensor(np.transpose(img, (2, 0, 1)) / 255.0), "factor": 1}
        elif self.path == "/codec/decode":
            z = decode_tensor(body["latent"])
            out = {"image": encode_tensor(np.transpose(z, (1, 2, 0)) * 255.0)}
        elif self.path == "/classify":
            out = {"predictions": [{"label": "cat", "score": 0.7}, {"label": "dog", "score": 0.2}]}
        else:
            self.send_response(404)
            self.end_headers()
            return
        data = json.dumps(out).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


@pytest.fixture(scope="module")
def server():
    srv = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    srv.requests = []
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}", srv
    srv.shutdown()


def test_remote_text_embedder(server):
    url, srv = server
    emb = RemoteTextEmbedder(url + "/embed")
    assert emb.embed(["cat", "zebra"]) == [[3.0, 1.0], [5.0, 1.0]]
    assert srv.requests[-1] == ("/embed", {"texts": ["cat", "zebra"]})


def test_remote_denoiser_wire(server):
    url, srv = server
    den = RemoteDenoiser(url + "/denoise")
    z = np.zeros((2, 2, 2))
    eps = ddim.guided_epsilon(z, 981, "A picture of [dog]", 7.5, den)
    assert np.all(eps == 7.5)
    path, body = srv.requests[-1]
    assert path == "/denoise" and body["timestep"] == 981 and body["condition"] == ""
    assert body["latent"]["shape"] == [2, 2, 2]


def test_remote_codec_roundtrip(server):
    url, _ = server
    codec = RemoteCodec(url + "/codec")
    img = np.random.default_rng(0).integers(0, 256, size=(4, 6, 3), dtype=np.uint8)
    z, f = encode_image(img, codec)
    assert f == 1 and z.shape == (3, 4, 6)
    back = decode_latent(z, codec)
    # float32 transport; the bound is the fixture's recorded tolerance
    assert np.mean(np.abs(back.astype(int) - img.astype(int))) <= 0.5


def test_remote_classifier_in_filter(server):
    url, _ = server
    clf = RemoteClassifier(url + "/classify")
    assert filter_instance(np.zeros((3, 3, 3), np.uint8), "dog", clf, k=2).accepted
    assert not filter_instance(np.zeros((3, 3, 3), np.uint8), "dog", clf, k=1).accepted


def test_remote_image_embedder(server):
    url, _ = server
    vecs = RemoteImageEmbedder(url + "/embed_images").embed_images([np.ones((2, 2, 3)) * 4])
    assert vecs[0].tolist() == [4.0, 1.0]


def test_remote_failure_is_backend_error(server):
    url, _ = server
    with pytest.raises(BackendError):
        RemoteTextEmbedder(url + "/fail").embed(["x"])
    with pytest.raises(BackendError):
        RemoteDenoiser("http://127.0.0.1:9", timeout=0.5).predict(np.zeros(1), 1, "")


def test_build_backend_kinds(tmp_path):
    assert build_backend("denoiser", {"kind": "remote", "url": "http://x"}).url == "http://x"
    with pytest.raises(ConfigError):
        build_backend("denoiser", {"kind": "remote"})
    with pytest.raises(ConfigError):
        build_backend("codec", {"kind": "file", "path": "x"})
    with pytest.raises(ConfigError):
        build_backend("denoiser", {"kind": "stub", "variant": "magic"})
    p = tmp_path / "e.json"
    p.write_text('{"a": [1, 0]}')
    assert build_backend("embedder", {"kind": "file", "path": str(p)}).embed(["a"]) == [[1.0, 0.0]]
