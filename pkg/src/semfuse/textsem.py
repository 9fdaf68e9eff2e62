"""Text embeddings for the two modality descriptions.

Backends map a description string to a 128-dim unit vector. ``StubBackend``
is a deterministic hash-seeded stand-in for a frozen text encoder;
``ExternalBackend`` talks to a local JSON endpoint and projects whatever
width it returns down to 128 dimensions.
"""

from __future__ import annotations

import hashlib
import json
import urllib.error
import urllib.request
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import BackendUnavailable, EmptyText, ZeroVector

EMBED_DIM = 128


def _check_text(text):
    if not isinstance(text, str) or not text:
        raise EmptyText("text must be a non-empty string")


def _stable_seed(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


@lru_cache(maxsize=4096)
def _stub_cached(text: str) -> bytes:
    v = np.random.default_rng(_stable_seed(text)).standard_normal(EMBED_DIM)
    return (v / np.linalg.norm(v)).tobytes()


def stub_encode(text: str) -> np.ndarray:
    _check_text(text)
    return np.frombuffer(_stub_cached(text), dtype=np.float64).copy()


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroVector("cosine undefined for a zero vector")
    # normalize first so the product is symmetric in its arguments
    return float(np.clip(np.dot(u / nu, v / nv), -1.0, 1.0))


class StubBackend:
    kind = "stub"

    def encode(self, text: str) -> np.ndarray:
        return stub_encode(text)


def orthogonal_projection(in_dim: int, seed: int, out_dim: int = EMBED_DIM) -> np.ndarray:
    """Fixed seeded ``in_dim x out_dim`` matrix with orthonormal columns (or rows)."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((max(in_dim, out_dim), min(in_dim, out_dim)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))[None, :]
    return q if in_dim >= out_dim else q.T


class ExternalBackend:
    """Frozen text encoder reached over HTTP.

    Protocol: ``POST <endpoint>`` with body ``{"text": "..."}`` and
    ``Content-Type: application/json``; the reply is ``{"embedding": [...]}``.
    Embeddings of width other than 128 go through a seeded orthogonal
    projection; the result is L2-normalized.
    """

    kind = "external"

    def __init__(self, endpoint: str, projection_seed: int = 0, timeout: float = 10.0):
        self.endpoint = endpoint
        self.projection_seed = int(projection_seed)
        self.timeout = timeout
        self._cache = {}

    def _request(self, text):
        body = json.dumps({"text": text}).encode("utf-8")
        req = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise BackendUnavailable(f"text encoder at {self.endpoint} unavailable: {exc}") from exc
        try:
            emb = np.asarray(payload["embedding"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendUnavailable(f"malformed reply from {self.endpoint}: {exc}") from exc
        if emb.ndim != 1 or emb.size == 0 or not np.all(np.isfinite(emb)):
            raise BackendUnavailable(f"malformed embedding from {self.endpoint}")
        return emb

    def encode(self, text: str) -> np.ndarray:
        _check_text(text)
        if text not in self._cache:
            emb = self._request(text)
            if emb.size != EMBED_DIM:
                emb = emb @ orthogonal_projection(emb.size, self.projection_seed)
            n = np.linalg.norm(emb)
            if n == 0.0:
                raise ZeroVector("external encoder returned a zero embedding")
            self._cache[text] = emb / n
        return self._cache[text].copy()


def make_backend(config=None):
    """Build a backend from ``{"kind": "stub"}`` or ``{"kind": "external", ...}``."""
    config = dict(config or {"kind": "stub"})
    kind = config.pop("kind", "stub")
    if kind == "stub":
        if config:
            raise ValueError(f"unknown stub backend key(s): {sorted(config)}")
        return StubBackend()
    if kind == "external":
        unknown = set(config) - {"endpoint", "projection_seed", "timeout"}
        if unknown:
            raise ValueError(f"unknown external backend key(s): {sorted(unknown)}")
        if "endpoint" not in config:
            raise ValueError("external backend needs an 'endpoint'")
        return ExternalBackend(**config)
    raise ValueError(f"unknown backend kind {kind!r}")


def encode_text(text: str, backend=None) -> np.ndarray:
    _check_text(text)
    return (backend or StubBackend()).encode(text)


@dataclass(frozen=True)
class TextEmbeddingPair:
    phi1: np.ndarray
    phi2: np.ndarray

    def __post_init__(self):
        for name in ("phi1", "phi2"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (EMBED_DIM,):
                raise ValueError(f"{name} must have shape ({EMBED_DIM},), got {v.shape}")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} has non-finite entries")
            if abs(np.linalg.norm(v) - 1.0) > 1e-6:
                raise ValueError(f"{name} must be unit norm")
            object.__setattr__(self, name, v)

    def stacked(self) -> np.ndarray:
        return np.stack([self.phi1, self.phi2])


def encode_pair(text1: str, text2: str, backend=None) -> TextEmbeddingPair:
    return TextEmbeddingPair(encode_text(text1, backend), encode_text(text2, backend))
