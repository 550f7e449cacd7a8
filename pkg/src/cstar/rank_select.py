"""Tucker-2 rank selection under a parameter budget.

The global scheme pools the singular values of both channel-mode unfoldings of
every compressible layer, sorts them, and admits the largest ones one at a
time. Admitting a value raises that layer's rank in that mode by one. Every
layer starts at the rank floor. Admission stops at the first value whose
marginal parameter cost would exceed the budget. The marginal cost of a rank
increment depends on the layer's other rank because the core is R1 x R2 x K^2,
so the true per-layer count is recomputed after every admission.

Ties in the pooled order are broken by layer index, then mode 1 before mode 2,
then position within the spectrum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import BudgetError
from .linalg import SvdResult
from .tucker import dense_param_count, param_count, unfolding_svds

SCHEMES = ("global", "uniform", "global-mm", "global-std")
DEFAULT_MIN_RANK = 8


@dataclass(frozen=True)
class SingularSpectrum:
    name: str
    dims: tuple[int, int, int]  # (O, I, K)
    sigma1: np.ndarray  # mode-1 unfolding, length min(O, I K^2)
    sigma2: np.ndarray  # mode-2 unfolding, length min(I, O K^2)

    @classmethod
    def from_svds(cls, name: str, shape: Sequence[int],
                  svds: tuple[SvdResult, SvdResult]) -> "SingularSpectrum":
        o, i, k = shape[0], shape[1], shape[2]
        return cls(name, (o, i, k), svds[0].sigma.copy(), svds[1].sigma.copy())


@dataclass(frozen=True)
class LayerRanks:
    name: str
    dims: tuple[int, int, int]
    r1: int
    r2: int

    @property
    def dense_params(self) -> int:
        return dense_param_count(*self.dims)

    @property
    def compressed_params(self) -> int:
        return param_count(*self.dims, self.r1, self.r2)

    @property
    def ratio(self) -> float:
        return self.dense_params / self.compressed_params


@dataclass(frozen=True)
class RankPlan:
    layers: tuple[LayerRanks, ...]
    target_ratio: float
    scheme: str = "global"

    @property
    def dense_params(self) -> int:
        return sum(lr.dense_params for lr in self.layers)

    @property
    def compressed_params(self) -> int:
        return sum(lr.compressed_params for lr in self.layers)

    @property
    def achieved_ratio(self) -> float:
        return self.dense_params / self.compressed_params

    @property
    def budget(self) -> int:
        return budget_for(self.dense_params, self.target_ratio)

    def ranks(self) -> dict[str, tuple[int, int]]:
        return {lr.name: (lr.r1, lr.r2) for lr in self.layers}

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "target_ratio": self.target_ratio,
            "dense_params": self.dense_params,
            "compressed_params": self.compressed_params,
            "achieved_ratio": self.achieved_ratio,
            "layers": [
                {"name": lr.name, "dims": list(lr.dims), "ranks": [lr.r1, lr.r2]}
                for lr in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RankPlan":
        layers = tuple(
            LayerRanks(e["name"], tuple(e["dims"]), int(e["ranks"][0]), int(e["ranks"][1]))
            for e in d["layers"]
        )
        return cls(layers, float(d["target_ratio"]), d.get("scheme", "global"))


def budget_for(dense: int, target_ratio: float) -> int:
    if target_ratio < 1:
        raise ValueError(f"target ratio must be >= 1, got {target_ratio}")
    return math.floor(dense / target_ratio)


def _bounds(s: SingularSpectrum, min_rank: int) -> tuple[int, int, int, int]:
    o, i, _ = s.dims
    hi1, hi2 = min(o, len(s.sigma1)), min(i, len(s.sigma2))
    return min(min_rank, hi1), min(min_rank, hi2), hi1, hi2


def _floor_plan(spectra, min_rank, target_ratio):
    if not spectra:
        raise ValueError("rank selection needs at least one layer")
    if min_rank < 1:
        raise ValueError(f"min_rank must be >= 1, got {min_rank}")
    dense = sum(dense_param_count(*s.dims) for s in spectra)
    budget = budget_for(dense, target_ratio)
    ranks = [list(_bounds(s, min_rank)[:2]) for s in spectra]
    cost = sum(param_count(*s.dims, *r) for s, r in zip(spectra, ranks))
    if cost > budget:
        raise BudgetError(
            f"rank floor {min_rank} needs {cost} params but the budget at {target_ratio}x is "
            f"{budget}; the largest achievable ratio is {dense / cost:.3f}x"
        )
    return ranks, cost, budget


def _greedy(spectra: Sequence[SingularSpectrum], values: Sequence[tuple[np.ndarray, np.ndarray]],
            target_ratio: float, min_rank: int, scheme: str) -> RankPlan:
    ranks, cost, budget = _floor_plan(spectra, min_rank, target_ratio)
    pool = []
    for li, (s, (v1, v2)) in enumerate(zip(spectra, values)):
        f1, f2, hi1, hi2 = _bounds(s, min_rank)
        pool.extend((-float(v1[j]), li, 0, j) for j in range(f1, hi1))
        pool.extend((-float(v2[j]), li, 1, j) for j in range(f2, hi2))
    pool.sort()
    for _, li, mode, _ in pool:
        s = spectra[li]
        old = param_count(*s.dims, *ranks[li])
        ranks[li][mode] += 1
        new = param_count(*s.dims, *ranks[li])
        if cost - old + new > budget:
            ranks[li][mode] -= 1
            break
        cost += new - old
    layers = tuple(LayerRanks(s.name, tuple(s.dims), r[0], r[1]) for s, r in zip(spectra, ranks))
    return RankPlan(layers, float(target_ratio), scheme)


def select_global(spectra: Sequence[SingularSpectrum], target_ratio: float,
                  min_rank: int = DEFAULT_MIN_RANK) -> RankPlan:
    """Global greedy selection on raw singular values."""
    return _greedy(spectra, [(s.sigma1, s.sigma2) for s in spectra], target_ratio, min_rank, "global")


def _minmax(v: np.ndarray) -> np.ndarray:
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def _standard(v: np.ndarray) -> np.ndarray:
    sd = v.std()
    if sd == 0:
        return np.zeros_like(v)
    return (v - v.mean()) / sd


def select_global_normalized(spectra: Sequence[SingularSpectrum], target_ratio: float,
                             min_rank: int = DEFAULT_MIN_RANK, mode: str = "minmax") -> RankPlan:
    """Global selection after per-layer, per-mode normalization of the spectra.

    ``mode`` is ``"minmax"`` or ``"standard"``. A spectrum with zero range
    (minmax) or zero variance (standard) maps to all zeros.
    """
    norm = {"minmax": _minmax, "standard": _standard}.get(mode)
    if norm is None:
        raise ValueError(f"unknown normalization {mode!r}")
    values = [(norm(s.sigma1), norm(s.sigma2)) for s in spectra]
    scheme = "global-mm" if mode == "minmax" else "global-std"
    return _greedy(spectra, values, target_ratio, min_rank, scheme)


def select_uniform(layers: Sequence, target_ratio: float,
                   min_rank: int = DEFAULT_MIN_RANK) -> RankPlan:
    """Compress every layer by ``target_ratio`` on its own.

    Each layer gets the largest pair with r1/O ~= r2/I whose count fits in
    ``floor(dense / target_ratio)``. ``layers`` needs ``name`` and ``dims``
    attributes (a :class:`SingularSpectrum` works; its values are ignored).
    """
    out = []
    for layer in layers:
        o, i, k = layer.dims
        f1, f2 = min(min_rank, o), min(min_rank, i)
        budget = budget_for(dense_param_count(o, i, k), target_ratio)
        chosen = None
        for r1 in range(o, 0, -1):
            r2 = min(i, max(1, math.floor(r1 * i / o + 0.5)))
            r1c, r2c = max(r1, f1), max(r2, f2)
            if param_count(o, i, k, r1c, r2c) <= budget:
                chosen = (r1c, r2c)
                break
        if chosen is None:
            floor_cost = param_count(o, i, k, f1, f2)
            raise BudgetError(
                f"layer {layer.name}: rank floor {min_rank} needs {floor_cost} params, budget at "
                f"{target_ratio}x is {budget}; largest achievable ratio "
                f"{dense_param_count(o, i, k) / floor_cost:.3f}x"
            )
        out.append(LayerRanks(layer.name, (o, i, k), *chosen))
    return RankPlan(tuple(out), float(target_ratio), "uniform")


def select(scheme: str, spectra: Sequence[SingularSpectrum], target_ratio: float,
           min_rank: int = DEFAULT_MIN_RANK) -> RankPlan:
    if scheme == "global":
        return select_global(spectra, target_ratio, min_rank)
    if scheme == "uniform":
        return select_uniform(spectra, target_ratio, min_rank)
    if scheme == "global-mm":
        return select_global_normalized(spectra, target_ratio, min_rank, "minmax")
    if scheme == "global-std":
        return select_global_normalized(spectra, target_ratio, min_rank, "standard")
    raise ValueError(f"unknown rank scheme {scheme!r}; expected one of {SCHEMES}")


def spectra_from_weights(weights: Iterable) -> list[SingularSpectrum]:
    """Singular values of both unfoldings of each weight.

    ``weights`` is a mapping name -> weight, or a sequence of weights (named
    ``layer0``, ``layer1``, ...).
    """
    items = weights.items() if hasattr(weights, "items") else (
        (f"layer{n}", w) for n, w in enumerate(weights))
    return [SingularSpectrum.from_svds(name, w.shape, unfolding_svds(w)) for name, w in items]
