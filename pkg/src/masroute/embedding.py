"""Text encoders behind a single contract: deterministic offline feature
hashing, plus a client for a remote embedding service.

Both produce L2-normalized vectors (zero vector for empty text) and share an
LRU cache, since the same profile descriptions are encoded on every routing
call.
"""
from __future__ import annotations

import enum
import hashlib
import json
import os
import re
import threading
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import requests

EMBED_URL_ENV = "MASROUTE_EMBED_URL"

_WORD_RE = re.compile(r"\w+", re.UNICODE)


class RemoteUnavailable(RuntimeError):
    def __init__(self, message: str, status: int | None = None, index: int | None = None):
        super().__init__(message)
        self.status = status
        self.index = index


class EncoderKind(str, enum.Enum):
    FEATURE_HASH = "FeatureHash"
    REMOTE = "Remote"


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    source_dim: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite embedding entries")


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 256
    kind: EncoderKind = EncoderKind.FEATURE_HASH
    remote_url: str | None = None
    cache_capacity: int = 4096
    timeout_s: float = 10.0

    def __post_init__(self):
        if self.dim < 8:
            raise ValueError("dim must be >= 8")
        if self.kind is EncoderKind.REMOTE:
            if self.remote_url is None and not os.environ.get(EMBED_URL_ENV):
                raise ValueError("Remote encoder needs remote_url or MASROUTE_EMBED_URL")
        elif self.remote_url is not None:
            raise ValueError("remote_url only applies to the Remote kind")

    def fingerprint(self) -> str:
        payload = json.dumps(
            [self.dim, self.kind.value, self.remote_url or ""], sort_keys=True
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


class _LruCache:
    """Small thread-safe LRU; capacity 0 disables caching."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._lock = threading.Lock()
        self._data: OrderedDict[str, np.ndarray] = OrderedDict()

    def get(self, key: str) -> np.ndarray | None:
        if self.capacity <= 0:
            return None
        with self._lock:
            vec = self._data.get(key)
            if vec is not None:
                self._data.move_to_end(key)
            return vec

    def put(self, key: str, vec: np.ndarray) -> None:
        if self.capacity <= 0:
            return
        with self._lock:
            self._data[key] = vec
            self._data.move_to_end(key)
            while len(self._data) > self.capacity:
                self._data.popitem(last=False)


def _h64(data: str, person: bytes) -> int:
    digest = hashlib.blake2b(data.encode("utf-8"), digest_size=8, person=person).digest()
    return int.from_bytes(digest, "big")


class Encoder:
    """Shared caching front-end; subclasses supply the raw vector."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        self._cache = _LruCache(config.cache_capacity)
        self._fp = config.fingerprint()

    def encode(self, text: str) -> EmbeddingVector:
        return self.encode_batch([text])[0]

    def encode_batch(self, texts: list[str]) -> list[EmbeddingVector]:
        results: list[np.ndarray | None] = []
        missing: list[tuple[int, str]] = []
        for i, text in enumerate(texts):
            cached = self._cache.get(self._key(text))
            results.append(cached)
            if cached is None:
                missing.append((i, text))
        if missing:
            fresh = self._compute_batch([t for _, t in missing])
            for (i, text), vec in zip(missing, fresh):
                self._cache.put(self._key(text), vec)
                results[i] = vec
        return [EmbeddingVector(values=v.copy(), source_dim=self.config.dim) for v in results]

    def _key(self, text: str) -> str:
        return self._fp + "\x00" + text

    def _compute_batch(self, texts: list[str]) -> list[np.ndarray]:
        raise NotImplementedError


class FeatureHashEncoder(Encoder):
    """Signed feature hashing over lowercase word unigrams and bigrams.

    Bucket index and sign come from two independent 64-bit hashes, so the
    output is deterministic across processes. Not semantically deep, but
    distinct token sets land on near-orthogonal directions.
    """

    def _compute_batch(self, texts: list[str]) -> list[np.ndarray]:
        return [self._encode_one(t) for t in texts]

    def _encode_one(self, text: str) -> np.ndarray:
        dim = self.config.dim
        vec = np.zeros(dim, dtype=np.float64)
        tokens = [t.lower() for t in _WORD_RE.findall(text)]
        if not tokens:
            return vec
        features = list(tokens)
        features.extend(a + "\x1f" + b for a, b in zip(tokens, tokens[1:]))
        for feat in features:
            idx = _h64(feat, b"mr-bucket") % dim
            sign = 1.0 if _h64(feat, b"mr-sign") & 1 else -1.0
            vec[idx] += sign
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        return vec


class RemoteEncoder(Encoder):
    """Client for a POST {url}/embed service; MASROUTE_EMBED_URL overrides
    the configured URL. Returned vectors are L2-normalized locally."""

    def __init__(self, config: EncoderConfig):
        super().__init__(config)
        self.base_url = (os.environ.get(EMBED_URL_ENV) or config.remote_url or "").rstrip("/")
        if not self.base_url:
            raise ValueError("remote encoder requires a URL")

    def _compute_batch(self, texts: list[str]) -> list[np.ndarray]:
        try:
            resp = requests.post(
                self.base_url + "/embed",
                json={"texts": texts},
                timeout=self.config.timeout_s,
            )
        except requests.RequestException as exc:
            raise RemoteUnavailable(f"embedding service unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise RemoteUnavailable(
                f"embedding service returned {resp.status_code}", status=resp.status_code
            )
        try:
            vectors = resp.json()["vectors"]
        except (ValueError, KeyError) as exc:
            raise RemoteUnavailable(f"malformed embedding response: {exc}") from exc
        if len(vectors) != len(texts):
            raise RemoteUnavailable(
                f"expected {len(texts)} vectors, got {len(vectors)}", index=len(vectors)
            )
        out = []
        for i, raw in enumerate(vectors):
            vec = np.asarray(raw, dtype=np.float64)
            if vec.shape != (self.config.dim,):
                raise RemoteUnavailable(
                    f"vector {i} has dim {vec.shape}, expected ({self.config.dim},)", index=i
                )
            norm = np.linalg.norm(vec)
            if norm > 0:
                vec = vec / norm
            out.append(vec)
        return out


def make_encoder(config: EncoderConfig) -> Encoder:
    if config.kind is EncoderKind.FEATURE_HASH:
        return FeatureHashEncoder(config)
    return RemoteEncoder(config)
