"""Quick built-in oracle checks, run by ``cstar selftest``.

Each check compares a package routine against an independent reference on
small random inputs and reports one line. The full property suites live in
the test directory; these exist so an installed copy can vouch for itself.
"""

from __future__ import annotations

import itertools
import time
from typing import Callable

import numpy as np

from .attack import AdvConfig, pgd
from .conv import conv2d
from .errors import BudgetError
from .linalg import svd
from .nn import Architecture, factorize, loss_and_grad, mini_conv_net
from .rank_select import SingularSpectrum, select_global
from .report import format_count
from .tucker import decompose, factorized_forward, param_count, recover


def check_svd(rng) -> str:
    worst = 0.0
    for _ in range(20):
        m, n = rng.integers(1, 40, size=2)
        a = rng.standard_normal((m, n))
        s = svd(a)
        ref = np.linalg.svd(a, compute_uv=False)
        worst = max(worst, np.abs(s.sigma - ref).max() / max(ref[0], 1e-300),
                    np.abs(s.reconstruct() - a).max())
    assert worst < 1e-10, worst
    return f"max deviation {worst:.1e}"


def check_eckart_young(rng) -> str:
    a = rng.standard_normal((30, 45))
    s = svd(a)
    for k in range(1, s.rank + 1):
        approx = (s.u[:, :k] * s.sigma[:k]) @ s.v[:, :k].T
        err = np.sum((a - approx) ** 2)
        tail = np.sum(s.sigma[k:] ** 2)
        assert abs(err - tail) <= 1e-8 * max(tail, 1.0), (k, err, tail)
    return f"{s.rank} truncations"


def _direct_conv(x, w, stride, pad):
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((b, o, ho, wo))
    for i, j in itertools.product(range(ho), range(wo)):
        patch = xp[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
        out[:, :, i, j] = np.einsum("bcij,ocij->bo", patch, w)
    return out


def check_tucker(rng) -> str:
    w = rng.standard_normal((6, 5, 3, 3))
    f = decompose(w, 6, 5)
    rt = np.linalg.norm(recover(f) - w) / np.linalg.norm(w)
    assert rt < 1e-10, rt
    g = decompose(w, 3, 2)
    x = rng.standard_normal((2, 5, 7, 7))
    worst = 0.0
    for stride, pad in itertools.product((1, 2), (0, 1)):
        ref = _direct_conv(x, recover(g), stride, pad)
        worst = max(worst, np.abs(factorized_forward(g, x, stride, pad) - ref).max(),
                    np.abs(conv2d(x, recover(g), stride, pad) - ref).max())
    assert worst < 1e-10, worst
    return f"round-trip {rt:.1e}, conv deviation {worst:.1e}"


def check_gradients(rng) -> str:
    arch = Architecture(in_channels=2, image_size=6, num_classes=3, stem_width=3, widths=(4, 5))
    model = mini_conv_net(arch, rng)
    model = factorize(model, {"block2.conv": (2, 2)})
    x = rng.uniform(0, 1, (3, 2, 6, 6))
    y = np.array([0, 1, 2])
    _, grads, _ = loss_and_grad(model, x, y, mode="eval")
    worst = 0.0
    h = 1e-5
    for lname, pname, p in model.parameters():
        g = grads[lname][pname]
        for idx in list(np.ndindex(p.shape))[:4]:
            old = p[idx]
            p[idx] = old + h
            lp = loss_and_grad(model, x, y, mode="eval")[0]
            p[idx] = old - h
            lm = loss_and_grad(model, x, y, mode="eval")[0]
            p[idx] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-6))
    assert worst < 1e-4, worst
    return f"worst relative error {worst:.1e}"


def check_pgd(rng) -> str:
    arch = Architecture(in_channels=1, image_size=4, num_classes=2, stem_width=2, widths=(3,))
    model = mini_conv_net(arch, rng)
    for _ in range(20):
        x = rng.uniform(0, 1, (4, 1, 4, 4))
        y = rng.integers(0, 2, 4)
        delta = float(rng.uniform(0, 0.1))
        xa = pgd(model, x, y, AdvConfig(delta, 0.02, 3, True), rng)
        assert np.abs(xa - x).max() <= delta + 1e-12 and xa.min() >= 0 and xa.max() <= 1
    assert np.array_equal(pgd(model, x, y, AdvConfig(0.0, 0.02, 3)), x)
    return "20 budgets respected"


def _brute_force(spectra, ratio, floor):
    """Exhaustive search over rank vectors (tiny cases only).

    A vector is admissible when the values it keeps beyond the floor form an
    upper set of the pooled order (value descending, then layer, mode,
    position). Among admissible vectors within budget the one keeping the
    most values wins.
    """
    dense = sum(s.dims[0] * s.dims[1] * s.dims[2] ** 2 for s in spectra)
    budget = int(np.floor(dense / ratio))
    keys, ranges = [], []
    for n, s in enumerate(spectra):
        for mode, sig in ((0, s.sigma1), (1, s.sigma2)):
            keys.append([(-float(v), n, mode, j) for j, v in enumerate(sig)])
            ranges.append(range(floor, len(sig) + 1))
    best = None
    for combo in itertools.product(*ranges):
        kept = [k for ks, r in zip(keys, combo) for k in ks[floor:r]]
        dropped = [k for ks, r in zip(keys, combo) for k in ks[r:]]
        if kept and dropped and max(kept) > min(dropped):
            continue
        cost = sum(param_count(*s.dims, combo[2 * n], combo[2 * n + 1]) for n, s in enumerate(spectra))
        if cost <= budget and (best is None or len(kept) > best[0]):
            best = (len(kept), combo)
    return None if best is None else best[1]


def check_rank_select(rng) -> str:
    for _ in range(10):
        spectra = []
        for n in range(2):
            o, i = (int(v) for v in rng.integers(2, 5, size=2))
            spectra.append(SingularSpectrum(f"l{n}", (o, i, 2), np.sort(rng.uniform(0, 1, o))[::-1],
                                            np.sort(rng.uniform(0, 1, i))[::-1]))
        ratio = float(rng.uniform(1.0, 2.5))
        want = _brute_force(spectra, ratio, 1)
        try:
            plan = select_global(spectra, ratio, min_rank=1)
        except BudgetError:
            assert want is None, want
            continue
        got = tuple(r for lr in plan.layers for r in (lr.r1, lr.r2))
        assert got == want, (got, want)
        assert plan.compressed_params <= plan.budget
    return "10 instances match exhaustive search"


def check_format(rng) -> str:
    cases = {8175: "8.18K", 3004: "3K", 1600: "1.6K", 589824: "590K", 2359296: "2.36M"}
    for n, text in cases.items():
        assert format_count(n) == text, (n, format_count(n))
    assert param_count(64, 64, 3, 27, 21) == 8175
    return f"{len(cases)} fixtures"


CHECKS: dict[str, Callable[[np.random.Generator], str]] = {
    "svd": check_svd,
    "eckart-young": check_eckart_young,
    "tucker": check_tucker,
    "gradients": check_gradients,
    "pgd": check_pgd,
    "rank-select": check_rank_select,
    "format": check_format,
}


def run(seed: int = 0, out=print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            detail = fn(np.random.default_rng(seed))
            out(f"PASS {name}: {detail} ({time.perf_counter() - t0:.2f}s)")
        except AssertionError as exc:
            ok = False
            out(f"FAIL {name}: {exc}")
    return ok
