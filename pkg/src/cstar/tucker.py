"""Tucker-2 factorization of conv weights and the factorized convolution.

A weight ``W`` of shape (O, I, K, K) is written as ``u1`` (O x R1) and
``u2`` (I x R2) applied to a core ``g`` (R1, R2, K, K) along the two channel
modes. The spatial modes are never truncated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import conv
from .errors import ShapeError
from .linalg import SvdResult, leading_basis, svd
from .tensor_core import contract, flatten_from, permute, reshape


def param_count(o: int, i: int, k: int, r1: int, r2: int) -> int:
    """Parameters of a Tucker-2 factorized (o, i, k, k) layer at ranks (r1, r2)."""
    return o * r1 + i * r2 + r1 * r2 * k * k


def dense_param_count(o: int, i: int, k: int) -> int:
    return o * i * k * k


@dataclass
class Tucker2Factors:
    u1: np.ndarray  # O x R1
    u2: np.ndarray  # I x R2
    g: np.ndarray  # R1 x R2 x K x K

    def __post_init__(self):
        if self.u1.ndim != 2 or self.u2.ndim != 2 or self.g.ndim != 4:
            raise ShapeError(
                f"expected u1, u2 2-D and g 4-D, got {self.u1.shape}, {self.u2.shape}, {self.g.shape}"
            )
        r1, r2, k, k2 = self.g.shape
        if k != k2:
            raise ShapeError(f"core must have a square kernel, got {self.g.shape}")
        if self.u1.shape[1] != r1 or self.u2.shape[1] != r2:
            raise ShapeError(
                f"factor shapes u1 {self.u1.shape}, u2 {self.u2.shape} inconsistent with core {self.g.shape}"
            )
        if not (1 <= r1 <= self.u1.shape[0] and 1 <= r2 <= self.u2.shape[0]):
            raise ShapeError(f"ranks {(r1, r2)} out of bounds for factors {self.u1.shape}, {self.u2.shape}")

    @property
    def ranks(self) -> tuple[int, int]:
        return self.g.shape[0], self.g.shape[1]

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.g.shape[2]
        return self.u1.shape[0], self.u2.shape[0], k, k

    @property
    def param_count(self) -> int:
        o, i, k, _ = self.weight_shape
        return param_count(o, i, k, *self.ranks)


def check_conv_weight(w: np.ndarray) -> tuple[int, int, int]:
    if w.ndim != 4:
        raise ShapeError(f"conv weight must be 4-D (O, I, K, K), got {w.shape}")
    o, i, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"non-square kernels are not supported, got {w.shape}")
    return o, i, k


def unfold(w: np.ndarray, mode: int) -> np.ndarray:
    """Mode-1 unfolding is O x (I K^2); mode-2 is I x (O K^2)."""
    w3 = flatten_from(w, 2)
    if mode == 1:
        return flatten_from(w3, 1)
    if mode == 2:
        return flatten_from(permute(w3, (1, 0, 2)), 1)
    raise ValueError(f"mode must be 1 or 2, got {mode}")


def unfolding_svds(w: np.ndarray) -> tuple[SvdResult, SvdResult]:
    """SVDs of both channel-mode unfoldings. Reusable by decompose and rank selection."""
    check_conv_weight(w)
    return svd(unfold(w, 1)), svd(unfold(w, 2))


def decompose(w: np.ndarray, r1: int, r2: int,
              svds: tuple[SvdResult, SvdResult] | None = None) -> Tucker2Factors:
    """Truncated Tucker-2 factors of ``w`` at ranks (r1, r2).

    ``svds`` may carry precomputed :func:`unfolding_svds` of ``w``.
    """
    o, i, k = check_conv_weight(w)
    if not (1 <= r1 <= o and 1 <= r2 <= i):
        raise ShapeError(f"ranks ({r1}, {r2}) out of bounds for weight {w.shape}")
    s1, s2 = svds if svds is not None else unfolding_svds(w)
    # A rank beyond the unfolding's (e.g. I > O K^2) pads the basis with
    # orthonormal complement columns; their core slices come out zero.
    u1 = leading_basis(s1, r1)
    u2 = leading_basis(s2, r2)
    # Leading rows of the full core depend only on the leading columns, so
    # truncating before contracting gives the same core at lower cost.
    w3 = flatten_from(w, 2)
    g = contract(u2, 0, w3, 1)  # R2 x O x K^2
    g = contract(u1, 0, g, 1)  # R1 x R2 x K^2
    return Tucker2Factors(u1=u1, u2=u2, g=reshape(g, (r1, r2, k, k)))


def recover(f: Tucker2Factors) -> np.ndarray:
    o, i, k, _ = f.weight_shape
    g3 = flatten_from(f.g, 2)
    w = contract(f.u2, 1, g3, 1)  # I x R1 x K^2
    w = contract(f.u1, 1, w, 1)  # O x I x K^2
    return reshape(w, (o, i, k, k))


def project(w: np.ndarray, target: tuple[int, int],
            svds: tuple[SvdResult, SvdResult] | None = None) -> np.ndarray:
    """Truncate the Tucker-2 ranks of ``w`` to ``target`` (decompose, then recover)."""
    return recover(decompose(w, target[0], target[1], svds=svds))


def factorized_forward(f: Tucker2Factors, x: np.ndarray, stride: int = 1,
                       padding: int = 0) -> np.ndarray:
    """Convolution with the factorized weight, without forming it.

    Three stages: channel reduction by ``u2^T``, a K x K convolution with the
    core, and channel expansion by ``u1``. ``x`` is (I, H, W) or (B, I, H, W).
    """
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != f.u2.shape[0]:
        raise ShapeError(f"input {x.shape} does not match factorized weight {f.weight_shape}")
    t1 = conv.channel_mix_cm(conv.to_cm(x), f.u2.T)
    t2, _ = conv.conv2d_cm(t1, f.g, stride, padding)
    y = conv.to_nchw(conv.channel_mix_cm(t2, f.u1))
    return y[0] if single else y
