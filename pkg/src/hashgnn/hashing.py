"""Hash layer, sign binarisation, bit packing and the guided straight-through mix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class HashLayerParams:
    weight: np.ndarray  # (d, K)
    bias: np.ndarray    # (K,)

    @classmethod
    def init(cls, in_dim: int, bits: int, rng: np.random.Generator | None = None,
             std: float = 0.02, dtype=np.float32) -> "HashLayerParams":
        rng = rng or np.random.default_rng(0)
        return cls((rng.standard_normal((in_dim, bits)) * std).astype(dtype), np.zeros(bits, dtype=dtype))

    @property
    def bits(self) -> int:
        return self.weight.shape[1]


def hash_forward(params: HashLayerParams, u: np.ndarray) -> np.ndarray:
    """``tanh(u @ W + b)``."""
    if u.shape[-1] != params.weight.shape[0]:
        raise ValueError(f"expected {params.weight.shape[0]} input columns, got {u.shape[-1]}")
    if not np.all(np.isfinite(u)):
        raise FloatingPointError("non-finite input to hash layer")
    return np.tanh(u @ params.weight + params.bias)


def hash_backward(params: HashLayerParams, u: np.ndarray, z: np.ndarray, grad_z: np.ndarray):
    """Returns (grad_W, grad_b, grad_u) for ``z = tanh(u @ W + b)``."""
    g = grad_z * (1 - z * z)
    return u.T @ g, g.sum(axis=0), g @ params.weight.T


def binarize(z: np.ndarray) -> np.ndarray:
    """Sign with ``sign(0) = +1``; keeps the input dtype."""
    return np.where(z >= 0, 1, -1).astype(z.dtype if np.issubdtype(z.dtype, np.floating) else np.int8)


def words_for(bits: int) -> int:
    return (bits + 63) // 64


def pack_codes(z: np.ndarray) -> np.ndarray:
    """Pack ``z >= 0`` into little-endian uint64 words, bit ``k`` in word ``k // 64``.

    Padding bits above ``K`` are zero.
    """
    z = np.atleast_2d(z)
    n, k = z.shape
    w = words_for(k)
    bits = np.zeros((n, w * 64), dtype=bool)
    bits[:, :k] = z >= 0
    as_bytes = np.packbits(bits, axis=1, bitorder="little")
    return as_bytes.view("<u8").reshape(n, w).astype(np.uint64)


def unpack_codes(packed: np.ndarray, bits: int, dtype=np.float32) -> np.ndarray:
    """Inverse of :func:`pack_codes`, giving a +-1 matrix."""
    packed = np.atleast_2d(np.ascontiguousarray(packed, dtype="<u8"))
    raw = np.unpackbits(packed.view(np.uint8), axis=1, bitorder="little")[:, :bits]
    return (raw.astype(dtype) * 2 - 1).astype(dtype)


def sample_guidance_mask(p: float, shape, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(p) mask of 0/1 entries.

    Always draws ``prod(shape)`` uniforms so that the generator advances the
    same way whatever ``p`` is.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"guidance probability must be in [0, 1], got {p}")
    return rng.random(shape) < p


def guided_mix(z: np.ndarray, h: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Entry-wise select: ``z`` where ``q`` is set, ``h`` elsewhere."""
    if not (z.shape == h.shape == q.shape):
        raise ValueError(f"shape mismatch: {z.shape}, {h.shape}, {q.shape}")
    return np.where(q, z, h)


def ste_backward(grad_h_mixed: np.ndarray) -> np.ndarray:
    # both branches of the mix have identity Jacobian w.r.t. z under STE
    return grad_h_mixed
