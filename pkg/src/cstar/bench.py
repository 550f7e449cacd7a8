"""Latency of a dense convolution against its Tucker-2 factorized form."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .conv import conv2d
from .rank_select import SingularSpectrum, select_uniform
from .tucker import Tucker2Factors, dense_param_count, factorized_forward, param_count


@dataclass(frozen=True)
class BenchResult:
    in_channels: int
    out_channels: int
    kernel: int
    size: int
    batch: int
    ranks: tuple[int, int]
    runs: int
    dense_ms: float  # median per-image latency
    factorized_ms: float
    dense_params: int
    factorized_params: int

    @property
    def speedup(self) -> float:
        return self.dense_ms / self.factorized_ms

    @property
    def ratio(self) -> float:
        return self.dense_params / self.factorized_params

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(speedup=self.speedup, ratio=self.ratio)
        return d

    def line(self) -> str:
        return (f"{self.out_channels}x{self.in_channels}x{self.kernel}x{self.kernel} @ "
                f"{self.size}x{self.size}, ranks [{self.ranks[0]}, {self.ranks[1]}], "
                f"C.R. {self.ratio:.2f}x: dense {self.dense_ms:.3f} ms, factorized "
                f"{self.factorized_ms:.3f} ms/↓{self.speedup:.2f}x")


def median_ms(fn, runs: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


def bench_conv(in_channels: int = 256, out_channels: int = 256, kernel: int = 3, size: int = 32,
               ratio: float = 4.0, ranks: tuple[int, int] | None = None, batch: int = 1,
               runs: int = 30, warmup: int = 5, seed: int = 0) -> BenchResult:
    """Median latency per image of both forms, stride 1 and same padding.

    Ranks default to the uniform choice for ``ratio``. Weights and factors
    are random since latency does not depend on their values.
    """
    if runs < 1 or warmup < 0:
        raise ValueError("need runs >= 1 and warmup >= 0")
    if ranks is None:
        shape = SingularSpectrum("bench", (out_channels, in_channels, kernel), np.empty(0), np.empty(0))
        lr = select_uniform([shape], ratio).layers[0]
        ranks = (lr.r1, lr.r2)
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((out_channels, in_channels, kernel, kernel))
    x = rng.standard_normal((batch, in_channels, size, size))
    f = Tucker2Factors(rng.standard_normal((out_channels, ranks[0])),
                       rng.standard_normal((in_channels, ranks[1])),
                       rng.standard_normal((ranks[0], ranks[1], kernel, kernel)))
    pad = kernel // 2
    dense = median_ms(lambda: conv2d(x, w, 1, pad), runs, warmup) / batch
    fact = median_ms(lambda: factorized_forward(f, x, 1, pad), runs, warmup) / batch
    return BenchResult(in_channels, out_channels, kernel, size, batch, tuple(ranks), runs, dense,
                       fact, dense_param_count(out_channels, in_channels, kernel),
                       param_count(out_channels, in_channels, kernel, *ranks))
