"""Model backends: analytic stubs for tests and JSON-over-HTTP remote clients.

Four roles exist: text embedder, denoiser, image codec and classifier (plus an
image embedder for the diversity report). Every remote client speaks JSON;
tensors travel as ``{"shape": [...], "dtype": "float32", "data": <base64>}``
with little-endian float32 values in row-major order.

Remote endpoints (all ``POST``):

============  ===============================================  ==========================================
role          request                                          response
============  ===============================================  ==========================================
embedder      ``{"texts": [str, ...]}``                        ``{"vectors": [[float, ...], ...]}``
image embed   ``{"images": [tensor, ...]}``                    ``{"vectors": [[float, ...], ...]}``
denoiser      ``{"latent": tensor, "timestep": int,``          ``{"epsilon": tensor}``
              ``"condition": str | null}``
codec         ``<url>/encode {"image": tensor}``               ``{"latent": tensor, "factor": int}``
              ``<url>/decode {"latent": tensor}``              ``{"image": tensor}``
classifier    ``{"image": tensor}``                            ``{"predictions": [{"label", "score"}]}``
============  ===============================================  ==========================================
"""
from __future__ import annotations

import base64
import hashlib
import json
import urllib.error
import urllib.request
from typing import Callable, Sequence

import numpy as np

from .errors import BackendError, ConfigError

# ---------------------------------------------------------------------------
# wire format


def encode_tensor(array) -> dict:
    a = np.ascontiguousarray(array, dtype="<f4")
    return {
        "shape": list(a.shape),
        "dtype": "float32",
        "data": base64.b64encode(a.tobytes(order="C")).decode("ascii"),
    }


def decode_tensor(payload: dict) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in payload["shape"])
        raw = base64.b64decode(payload["data"])
    except (KeyError, TypeError, ValueError) as exc:
        raise BackendError(f"malformed tensor payload: {exc}") from exc
    if payload.get("dtype", "float32") != "float32":
        raise BackendError(f"unsupported tensor dtype {payload.get('dtype')!r}")
    a = np.frombuffer(raw, dtype="<f4")
    if a.size != int(np.prod(shape, dtype=np.int64)):
        raise BackendError(f"tensor data has {a.size} values, shape {shape} needs {np.prod(shape)}")
    return a.reshape(shape).astype(np.float64)


class RemoteClient:
    """Minimal JSON POST client shared by the remote backends."""

    def __init__(self, url: str, timeout: float = 60.0, role: str = "remote"):
        self.url = url.rstrip("/")
        self.timeout = float(timeout)
        self.role = role

    def post(self, payload: dict, path: str = "") -> dict:
        body = json.dumps(payload).encode("utf-8")
        req = urllib.request.Request(
            self.url + path, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise BackendError(
                f"{self.role} request to {self.url + path} failed: {exc}", backend=self.role
            ) from exc


# ---------------------------------------------------------------------------
# text / image embedders


class StubTextEmbedder:
    """Deterministic pseudo-random vectors keyed by the text (or a fixed table)."""

    def __init__(self, dim: int = 16, table: dict | None = None):
        self.dim = int(dim)
        self.table = {k: list(map(float, v)) for k, v in (table or {}).items()}

    def embed(self, texts):
        out = []
        for t in texts:
            if t in self.table:
                out.append(self.table[t])
                continue
            seed = int.from_bytes(hashlib.blake2b(t.encode("utf-8"), digest_size=8).digest(), "little")
            out.append(np.random.default_rng(seed).normal(size=self.dim).tolist())
        return out


class RemoteTextEmbedder(RemoteClient):
    def __init__(self, url, timeout=60.0):
        super().__init__(url, timeout, role="embedder")

    def embed(self, texts):
        resp = self.post({"texts": list(texts)})
        vectors = resp.get("vectors")
        if not isinstance(vectors, list) or len(vectors) != len(texts):
            raise BackendError("embedder response must hold one vector per text", backend=self.role)
        return vectors


class PixelImageEmbedder:
    """Flattened pixel values as the image embedding (test stand-in for CLIP)."""

    def embed_images(self, images):
        return [np.asarray(im, dtype=np.float64).ravel() for im in images]


class RemoteImageEmbedder(RemoteClient):
    def __init__(self, url, timeout=60.0):
        super().__init__(url, timeout, role="image_embedder")

    def embed_images(self, images):
        resp = self.post({"images": [encode_tensor(im) for im in images]})
        vectors = resp.get("vectors")
        if not isinstance(vectors, list) or len(vectors) != len(images):
            raise BackendError("image embedder must return one vector per image", backend=self.role)
        return [np.asarray(v, dtype=np.float64) for v in vectors]


# ---------------------------------------------------------------------------
# denoisers


class ConstantDenoiser:
    """Returns the same noise tensor for every latent, timestep and prompt."""

    def __init__(self, value=0.0):
        self.value = value

    def predict(self, latent, timestep, condition):
        return np.broadcast_to(np.asarray(self.value, dtype=np.float64), np.shape(latent)).copy()


class AffineDenoiser:
    """``eps = a(s) * z + b(s)`` with ``s = timestep / scale`` and smooth ``a``, ``b``."""

    def __init__(self, a: Callable[[float], float] | float = 0.1, b: Callable[[float], float] | float = 0.0, scale: float = 1000.0):
        self.a = a if callable(a) else (lambda s, _a=a: _a)
        self.b = b if callable(b) else (lambda s, _b=b: _b)
        self.scale = float(scale)

    def predict(self, latent, timestep, condition):
        s = timestep / self.scale
        return self.a(s) * np.asarray(latent, dtype=np.float64) + self.b(s)


class PromptStubDenoiser:
    """Condition-dependent stub: ``eps = gain * z + coupling * mean_hw(z) + offset(prompt)``.

    The offset is a deterministic function of the prompt (zero for the empty
    prompt), so guided edits move the latent toward a prompt-specific value.
    The per-channel spatial mean couples every cell to every other, the way a
    real denoiser's receptive field does.
    """

    def __init__(self, gain: float = 0.05, strength: float = 0.001, coupling: float = 0.05):
        self.gain = float(gain)
        self.strength = float(strength)
        self.coupling = float(coupling)

    def offset(self, condition: str) -> float:
        if not condition:
            return 0.0
        h = int.from_bytes(hashlib.blake2b(condition.encode("utf-8"), digest_size=4).digest(), "little")
        return self.strength * ((h / 0xFFFFFFFF) * 2.0 - 1.0)

    def predict(self, latent, timestep, condition):
        z = np.asarray(latent, dtype=np.float64)
        mixed = z.mean(axis=(-2, -1), keepdims=True) if z.ndim >= 2 else z.mean()
        return self.gain * z + self.coupling * mixed + self.offset(condition)


class RemoteDenoiser(RemoteClient):
    def __init__(self, url, timeout=60.0):
        super().__init__(url, timeout, role="denoiser")

    def predict(self, latent, timestep, condition):
        resp = self.post(
            {"latent": encode_tensor(latent), "timestep": int(timestep), "condition": condition}
        )
        if "epsilon" not in resp:
            raise BackendError("denoiser response lacks 'epsilon'", backend=self.role)
        return decode_tensor(resp["epsilon"])


# ---------------------------------------------------------------------------
# codecs


class IdentityCodec:
    """Pixels rescaled to [-1, 1] as a channels-first latent; downscale factor 1.

    ``decode(encode(x)) == x`` exactly for uint8 images.
    """

    factor = 1

    def encode(self, image):
        x = np.asarray(image, dtype=np.float64)
        return np.transpose(x / 127.5 - 1.0, (2, 0, 1)), 1

    def decode(self, latent):
        x = (np.transpose(np.asarray(latent, dtype=np.float64), (1, 2, 0)) + 1.0) * 127.5
        return np.clip(np.rint(x), 0, 255).astype(np.uint8)


class RemoteCodec(RemoteClient):
    def __init__(self, url, timeout=60.0):
        super().__init__(url, timeout, role="codec")

    def encode(self, image):
        resp = self.post({"image": encode_tensor(image)}, "/encode")
        if "latent" not in resp:
            raise BackendError("codec encode response lacks 'latent'", backend=self.role)
        return decode_tensor(resp["latent"]), int(resp.get("factor", 8))

    def decode(self, latent):
        resp = self.post({"latent": encode_tensor(latent)}, "/decode")
        if "image" not in resp:
            raise BackendError("codec decode response lacks 'image'", backend=self.role)
        return np.clip(np.rint(decode_tensor(resp["image"])), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# classifiers


class TableClassifier:
    """Returns a fixed ranked prediction list regardless of the patch."""

    def __init__(self, predictions: Sequence[tuple[str, float]]):
        self.predictions = [(str(l), float(s)) for l, s in predictions]

    def classify(self, patch):
        return list(self.predictions)


class HashClassifier:
    """Deterministic pseudo-ranking of ``labels`` keyed by the patch bytes."""

    def __init__(self, labels: Sequence[str]):
        self.labels = list(labels)

    def classify(self, patch):
        data = np.ascontiguousarray(patch).tobytes()
        digest = hashlib.blake2b(data, digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        scores = rng.dirichlet(np.ones(len(self.labels)))
        order = np.argsort(-scores, kind="stable")
        return [(self.labels[i], float(scores[i])) for i in order]


class RemoteClassifier(RemoteClient):
    def __init__(self, url, timeout=60.0):
        super().__init__(url, timeout, role="classifier")

    def classify(self, patch):
        resp = self.post({"image": encode_tensor(patch)})
        preds = resp.get("predictions")
        if not isinstance(preds, list):
            raise BackendError("classifier response lacks 'predictions'", backend=self.role)
        return [(str(p["label"]), float(p["score"])) for p in preds]


# ---------------------------------------------------------------------------
# construction from config


def build_backend(role: str, spec: dict, *, categories: Sequence[str] = ()):
    """Instantiate a backend from a ``{kind: stub | file | remote, ...}`` mapping."""
    from .affinity import FileEmbeddingProvider

    spec = dict(spec or {})
    kind = spec.pop("kind", "stub")
    if kind == "remote":
        url = spec.get("url")
        if not url:
            raise ConfigError(f"backend {role!r}: remote kind needs 'url'")
        timeout = float(spec.get("timeout", 60.0))
        cls = {
            "embedder": RemoteTextEmbedder,
            "image_embedder": RemoteImageEmbedder,
            "denoiser": RemoteDenoiser,
            "codec": RemoteCodec,
            "classifier": RemoteClassifier,
        }[role]
        return cls(url, timeout)
    if kind == "file":
        if role != "embedder":
            raise ConfigError(f"backend {role!r} has no 'file' kind")
        if "path" not in spec:
            raise ConfigError("file embedder needs 'path'")
        return FileEmbeddingProvider(spec["path"])
    if kind != "stub":
        raise ConfigError(f"backend {role!r}: unknown kind {kind!r}")

    variant = spec.get("variant")
    if role == "embedder":
        return StubTextEmbedder(dim=spec.get("dim", 16), table=spec.get("table"))
    if role == "image_embedder":
        return PixelImageEmbedder()
    if role == "denoiser":
        if variant in (None, "prompt"):
            return PromptStubDenoiser(
                spec.get("gain", 0.05), spec.get("strength", 0.001), spec.get("coupling", 0.05)
            )
        if variant == "constant":
            return ConstantDenoiser(spec.get("value", 0.0))
        if variant == "affine":
            return AffineDenoiser(spec.get("a", 0.1), spec.get("b", 0.0))
        raise ConfigError(f"unknown stub denoiser variant {variant!r}")
    if role == "codec":
        return IdentityCodec()
    if role == "classifier":
        if "predictions" in spec:
            return TableClassifier([tuple(p) for p in spec["predictions"]])
        return HashClassifier(spec.get("labels") or list(categories))
    raise ConfigError(f"unknown backend role {role!r}")
