"""Feature compression: 8-bit min-max quantization and product quantization.

Both schemes act on feature maps shaped (C, h, w).  For product
quantization every spatial position contributes one C-dimensional vector,
split into ``m`` contiguous chunks of C/m channels.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import check_is_fitted

KMEANS_MAX_ITER = 25
KMEANS_TOL = 1e-4


# --------------------------------------------------------------------------
# 8-bit min-max feature quantization


@dataclass
class QuantizedFeature:
    codes: np.ndarray  # uint8, original_shape
    min_value: np.float32
    scale: np.float32
    original_shape: tuple[int, ...]

    @property
    def nbytes(self) -> int:
        return self.codes.size + 8


def _f32_floor(v: float) -> np.float32:
    """Largest float32 not above ``v``."""
    r = np.float32(v)
    if float(r) > v:
        r = np.nextafter(r, np.float32(-np.inf))
    return r


def fq_quantize(f) -> QuantizedFeature:
    """Affine 8-bit coding with a per-map minimum and scale.

    The stored float32 scale is rounded toward zero so that ``x - min`` never
    exceeds ``255 * scale`` by more than rounding; codes round half away
    from zero.
    """
    x = np.asarray(f)
    if not np.isfinite(x).all():
        raise ValueError("feature map contains non-finite values")
    xd = x.astype(np.float64)
    lo = _f32_floor(float(xd.min()))
    hi = float(xd.max())
    rng = hi - float(lo)
    if rng == 0.0:
        return QuantizedFeature(np.zeros(x.shape, np.uint8), lo, np.float32(0.0), tuple(x.shape))
    scale = _f32_floor(rng / 255.0)
    if scale <= 0:
        scale = np.nextafter(np.float32(0), np.float32(1))
    codes = np.floor((xd - float(lo)) / float(scale) + 0.5)
    codes = np.clip(codes, 0, 255).astype(np.uint8)
    return QuantizedFeature(codes, lo, scale, tuple(x.shape))


def fq_dequantize(q: QuantizedFeature) -> np.ndarray:
    """``code * scale + min`` in float64, reshaped to the recorded shape."""
    if int(np.prod(q.original_shape)) != q.codes.size:
        raise ValueError(f"shape record {q.original_shape} inconsistent with {q.codes.size} codes")
    out = q.codes.astype(np.float64) * float(q.scale) + float(q.min_value)
    return out.reshape(q.original_shape)


class FeatureQuantizer(TransformerMixin, BaseEstimator):
    """Stateless transformer wrapping :func:`fq_quantize` over a batch of maps."""

    def fit(self, X, y=None):
        return self

    def transform(self, X) -> list[QuantizedFeature]:
        return [fq_quantize(x) for x in np.asarray(X)]

    def inverse_transform(self, Q) -> np.ndarray:
        return np.stack([fq_dequantize(q) for q in Q])


# --------------------------------------------------------------------------
# product quantization


@dataclass
class Codebook:
    num_subvectors: int
    n_bit_subvector: int
    centroids: np.ndarray  # (m, 2**b, d/m) float32

    def __post_init__(self):
        m, k, _ = self.centroids.shape
        if m != self.num_subvectors or k != 2**self.n_bit_subvector:
            raise ValueError(f"centroid tables {self.centroids.shape} inconsistent with m={self.num_subvectors}, b={self.n_bit_subvector}")
        if not np.isfinite(self.centroids).all():
            raise ValueError("non-finite centroids")

    @property
    def subvector_dim(self) -> int:
        return self.centroids.shape[2]

    @property
    def dim(self) -> int:
        return self.num_subvectors * self.subvector_dim

    @property
    def n_centroids(self) -> int:
        return 2**self.n_bit_subvector

    @property
    def nbytes(self) -> int:
        return self.num_subvectors * self.n_centroids * self.subvector_dim * 4


@dataclass
class PQCode:
    codes: np.ndarray  # (num_vectors, m)
    original_shape: tuple[int, ...]


def code_dtype(n_bits: int) -> np.dtype:
    return np.dtype(np.uint8) if n_bits <= 8 else np.dtype("<u2")


def maps_to_vectors(f: np.ndarray) -> np.ndarray:
    """(C, h, w) or (N, C, h, w) -> (positions, C)."""
    f = np.asarray(f)
    if f.ndim == 3:
        f = f[None]
    if f.ndim != 4:
        raise ValueError(f"expected (C,h,w) or (N,C,h,w), got {f.shape}")
    return f.transpose(0, 2, 3, 1).reshape(-1, f.shape[1])


def vectors_to_maps(v: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if len(shape) == 3:
        c, h, w = shape
        return v.reshape(h, w, c).transpose(2, 0, 1)
    n, c, h, w = shape
    return v.reshape(n, h, w, c).transpose(0, 3, 1, 2)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # exact squared distances; (a-b)^2 summed avoids cancellation of the expanded form
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def _assign(x: np.ndarray, c: np.ndarray, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid index (lowest index on ties) and its squared distance."""
    labels = np.empty(len(x), dtype=np.int64)
    dist = np.empty(len(x), dtype=np.float64)
    for s in range(0, len(x), chunk):
        d = _sq_dists(x[s : s + chunk], c)
        labels[s : s + chunk] = d.argmin(1)
        dist[s : s + chunk] = d[np.arange(len(d)), labels[s : s + chunk]]
    return labels, dist


def _assign_expanded(x: np.ndarray, c: np.ndarray, x_sq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fast assignment for training via |x|^2 - 2x.c + |c|^2 (may differ from exact on near-ties)."""
    c32 = c.astype(np.float32)
    d = x @ c32.T
    d *= -2.0
    d += (c32 * c32).sum(1)[None, :]
    labels = d.argmin(1)
    return labels, np.maximum(d[np.arange(len(x)), labels].astype(np.float64) + x_sq, 0.0)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(x), p=d2 / total) if total > 0 else rng.integers(len(x))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return np.array(centers)


def kmeans(
    x: np.ndarray, k: int, seed=0, max_iter: int = KMEANS_MAX_ITER, tol: float = KMEANS_TOL
) -> np.ndarray:
    """Lloyd's k-means returning a (k, dim) table.

    With at most ``k`` distinct rows the table holds exactly those rows
    (padded by repeating the first), so every input is reproduced exactly.
    Empty clusters are reseeded at the point farthest from its centroid.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("k-means on empty input")
    uniq = np.unique(x, axis=0)
    if len(uniq) <= k:
        pad = np.repeat(uniq[:1], k - len(uniq), axis=0)
        return np.concatenate([uniq, pad])
    rng = np.random.default_rng(seed)
    c = _kmeanspp(x, k, rng)
    x32 = x.astype(np.float32)
    x_sq = (x * x).sum(1)
    prev = np.inf
    for _ in range(max_iter):
        labels, dist = _assign_expanded(x32, c, x_sq)
        inertia = dist.sum()
        counts = np.bincount(labels, minlength=k)
        sums = np.stack([np.bincount(labels, weights=x[:, j], minlength=k) for j in range(x.shape[1])], axis=1)
        nonempty = counts > 0
        c[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if len(empty):
            far = np.argsort(-dist, kind="stable")[: len(empty)]
            c[empty] = x[far]
        if prev < np.inf and (prev - inertia) <= tol * prev and not len(empty):
            break
        prev = inertia
    return c


def pq_train(vectors, m: int, b: int, seed=0) -> Codebook:
    """One k-means table of 2**b centroids per contiguous chunk of d/m dims."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2 or len(v) == 0:
        raise ValueError("pq_train needs a nonempty (n, d) array")
    if m < 1 or b < 1:
        raise ValueError("m and b must be positive")
    n, d = v.shape
    if d % m:
        raise ValueError(f"m={m} does not divide vector dimension {d}")
    sub = d // m
    tables = [kmeans(v[:, j * sub : (j + 1) * sub], 2**b, seed=[*np.atleast_1d(seed).astype(int).tolist(), j]) for j in range(m)]
    return Codebook(m, b, np.stack(tables).astype(np.float32))


def pq_encode(f, codebook: Codebook) -> PQCode:
    """Index of the nearest centroid for every sub-vector of every position.

    ``f`` is a feature map (C, h, w), a batch (N, C, h, w), or raw vectors (n, d).
    """
    f = np.asarray(f)
    vectors = f if f.ndim == 2 else maps_to_vectors(f)
    if vectors.shape[1] != codebook.dim:
        raise ValueError(f"vector dimension {vectors.shape[1]} != codebook dimension {codebook.dim}")
    x = vectors.astype(np.float64)
    sub = codebook.subvector_dim
    codes = np.empty((len(x), codebook.num_subvectors), dtype=code_dtype(codebook.n_bit_subvector))
    for j in range(codebook.num_subvectors):
        codes[:, j], _ = _assign(x[:, j * sub : (j + 1) * sub], codebook.centroids[j].astype(np.float64))
    return PQCode(codes, tuple(f.shape))


def pq_decode(code: PQCode, codebook: Codebook) -> np.ndarray:
    c = np.asarray(code.codes)
    if c.ndim != 2 or c.shape[1] != codebook.num_subvectors:
        raise ValueError(f"code grid {c.shape} does not fit m={codebook.num_subvectors}")
    if c.size and (c.min() < 0 or c.max() >= codebook.n_centroids):
        raise IndexError("code index out of range")
    parts = [codebook.centroids[j][c[:, j].astype(np.int64)] for j in range(codebook.num_subvectors)]
    vectors = np.concatenate(parts, axis=1)
    if len(code.original_shape) == 2:
        return vectors.reshape(code.original_shape)
    return vectors_to_maps(vectors, code.original_shape)


def pq_payload_bytes(num_vectors: int, m: int, b: int, packed: bool = False) -> int:
    if packed:
        return math.ceil(num_vectors * m * b / 8)
    return num_vectors * m * math.ceil(b / 8)


def pq_codebook_bytes(d: int, m: int, b: int) -> int:
    return m * 2**b * (d // m) * 4


def pack_codes(codes: np.ndarray, n_bits: int) -> bytes:
    """Bit-pack codes at ``n_bits`` each, most significant bit first."""
    flat = np.asarray(codes, dtype=np.uint32).ravel()
    bits = ((flat[:, None] >> np.arange(n_bits - 1, -1, -1, dtype=np.uint32)) & 1).astype(np.uint8)
    return np.packbits(bits.ravel()).tobytes()


def unpack_codes(data: bytes, n_bits: int, count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[: count * n_bits].reshape(count, n_bits)
    weights = (1 << np.arange(n_bits - 1, -1, -1)).astype(np.uint32)
    return (bits.astype(np.uint32) * weights).sum(1)


class ProductQuantizer(TransformerMixin, BaseEstimator):
    """Product quantizer over per-position channel vectors.

    ``fit`` accepts vectors (n, d) or feature maps (N, C, h, w).  ``transform``
    returns code arrays of shape (n, m) or (N, h*w, m) accordingly and
    ``inverse_transform`` reverses it.
    """

    def __init__(self, n_subvectors=6, n_bits=7, random_state=0):
        self.n_subvectors = n_subvectors
        self.n_bits = n_bits
        self.random_state = random_state

    def fit(self, X, y=None):
        X = np.asarray(X)
        vectors = X if X.ndim == 2 else maps_to_vectors(X)
        self.map_shape_ = None if X.ndim == 2 else tuple(X.shape[-3:])
        self.codebook_ = pq_train(vectors, self.n_subvectors, self.n_bits, self.random_state)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "codebook_")
        X = np.asarray(X)
        if X.ndim == 2:
            return pq_encode(X, self.codebook_).codes
        if X.ndim == 3:
            X = X[None]
        codes = pq_encode(X, self.codebook_).codes
        return codes.reshape(X.shape[0], -1, self.n_subvectors)

    def inverse_transform(self, codes) -> np.ndarray:
        check_is_fitted(self, "codebook_")
        codes = np.asarray(codes)
        if codes.ndim == 2:
            return pq_decode(PQCode(codes, (len(codes), self.codebook_.dim)), self.codebook_)
        if self.map_shape_ is None:
            raise ValueError("quantizer was fitted on vectors; cannot rebuild feature maps")
        c, h, w = self.map_shape_
        flat = codes.reshape(-1, self.n_subvectors)
        return pq_decode(PQCode(flat, (codes.shape[0], c, h, w)), self.codebook_)


# --------------------------------------------------------------------------
# binary container
#
# header: magic "EQC1", kind (u8), ndim (u8), shape (ndim x u32 LE), then
# kind-specific fields; payload follows immediately, little-endian.
#   kind 1 raw float32       payload: float32 values
#   kind 2 raw uint8         payload: uint8 values
#   kind 3 fq feature        fields: min f32, scale f32        payload: uint8 codes
#   kind 4 pq code           fields: m u16, b u8, packed u8     payload: codes (1 or 2 bytes each, or bit-packed)
#   kind 5 codebook          fields: m u16, b u8, subdim u32    payload: float32 centroids (m, 2**b, subdim)

MAGIC = b"EQC1"
KIND_F32, KIND_U8, KIND_FQ, KIND_PQ, KIND_CODEBOOK = 1, 2, 3, 4, 5


def _shape_header(kind: int, shape) -> bytes:
    return MAGIC + struct.pack("<BB", kind, len(shape)) + struct.pack(f"<{len(shape)}I", *shape)


def dumps(obj) -> bytes:
    """Serialize an array, QuantizedFeature, PQCode or Codebook."""
    if isinstance(obj, QuantizedFeature):
        head = _shape_header(KIND_FQ, obj.original_shape) + struct.pack("<ff", obj.min_value, obj.scale)
        return head + obj.codes.astype(np.uint8).tobytes()
    if isinstance(obj, PQCode):
        raise TypeError("PQ codes need their bit width; use dumps_pq")
    if isinstance(obj, Codebook):
        head = _shape_header(KIND_CODEBOOK, obj.centroids.shape) + struct.pack(
            "<HBI", obj.num_subvectors, obj.n_bit_subvector, obj.subvector_dim
        )
        return head + obj.centroids.astype("<f4").tobytes()
    arr = np.asarray(obj)
    if arr.dtype == np.uint8:
        return _shape_header(KIND_U8, arr.shape) + arr.tobytes()
    return _shape_header(KIND_F32, arr.shape) + arr.astype("<f4").tobytes()


def dumps_pq(code: PQCode, n_bits: int, packed: bool = False) -> bytes:
    m = code.codes.shape[1]
    shape = code.original_shape
    head = _shape_header(KIND_PQ, shape) + struct.pack("<HBB", m, n_bits, int(packed))
    if packed:
        return head + pack_codes(code.codes, n_bits)
    return head + code.codes.astype(code_dtype(n_bits)).tobytes()


def header_size(data: bytes) -> int:
    kind, ndim = struct.unpack_from("<BB", data, 4)
    extra = {KIND_F32: 0, KIND_U8: 0, KIND_FQ: 8, KIND_PQ: 4, KIND_CODEBOOK: 7}[kind]
    return 6 + 4 * ndim + extra


def loads(data: bytes):
    if data[:4] != MAGIC:
        raise ValueError("not an EQC1 container")
    kind, ndim = struct.unpack_from("<BB", data, 4)
    shape = struct.unpack_from(f"<{ndim}I", data, 6)
    off = 6 + 4 * ndim
    n = int(np.prod(shape)) if shape else 1
    if kind == KIND_F32:
        return np.frombuffer(data, "<f4", n, off).reshape(shape).astype(np.float32)
    if kind == KIND_U8:
        return np.frombuffer(data, np.uint8, n, off).reshape(shape).copy()
    if kind == KIND_FQ:
        lo, sc = struct.unpack_from("<ff", data, off)
        codes = np.frombuffer(data, np.uint8, n, off + 8).reshape(shape).copy()
        return QuantizedFeature(codes, np.float32(lo), np.float32(sc), tuple(shape))
    if kind == KIND_PQ:
        m, b, packed = struct.unpack_from("<HBB", data, off)
        off += 4
        num_vectors = n // shape[-3] if len(shape) >= 3 else shape[0]
        count = num_vectors * m
        if packed:
            codes = unpack_codes(data[off:], b, count).astype(code_dtype(b))
        else:
            codes = np.frombuffer(data, code_dtype(b), count, off).copy()
        return PQCode(codes.reshape(num_vectors, m), tuple(shape))
    if kind == KIND_CODEBOOK:
        m, b, sub = struct.unpack_from("<HBI", data, off)
        cents = np.frombuffer(data, "<f4", n, off + 7).reshape(shape).astype(np.float32)
        return Codebook(m, b, cents)
    raise ValueError(f"unknown container kind {kind}")


def save(path, obj, **kw) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_pq(obj, **kw) if isinstance(obj, PQCode) else dumps(obj))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
