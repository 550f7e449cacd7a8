"""Low-rank regularized adversarial training followed by factorized fine-tuning.

Phase 1 minimizes the adversarial loss plus ``rho/2 * sum ||W - Z + M||^2``
over the dense weights ``W`` by SGD. At the end of each epoch (or each batch in
``dual_update="batch"`` mode) every ``Z`` becomes the Tucker-2 projection of
``W + M`` at the current plan ranks and the multiplier accumulates
``M += W - Z``. The rank plan is re-selected from the spectra of ``W + M``
every ``rank_refresh_period`` epochs. Phase 2 decomposes the weights at the
final plan and adversarially fine-tunes the factors with a fresh schedule.

Seeding: epoch ``e`` of phase ``p`` (0 = plain, 1 = regularize, 2 = fine-tune)
draws from ``np.random.default_rng([seed, p, e])``. That generator first
shuffles the batch order, then supplies the PGD random starts batch by batch.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .attack import AdvConfig, pgd
from .data import Dataset
from .errors import BudgetError, NumericError
from .nn import SGD, ConvDense, Model, cross_entropy, factorize, step_decay
from .rank_select import DEFAULT_MIN_RANK, SCHEMES, RankPlan, SingularSpectrum, select
from .tucker import project, unfolding_svds

log = logging.getLogger(__name__)

PLAIN, REGULARIZE, FINETUNE = 0, 1, 2
PHASE_NAMES = {PLAIN: "train", REGULARIZE: "regularize", FINETUNE: "finetune"}


@dataclass(frozen=True)
class CstarConfig:
    """Hyperparameters of a compression run.

    ``rho`` may be 0, which turns phase 1 into plain adversarial training.
    ``rho_warmup`` is the fraction of phase 1 over which rho ramps up linearly.
    """

    rho: float = 1e-2
    lr: float = 0.1
    finetune_lr: float | None = None  # defaults to lr
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 50
    t1: int = 15
    t2: int = 15
    target_ratio: float = 4.0
    rank_refresh_period: int = 1
    scheme: str = "global"
    min_rank: int = DEFAULT_MIN_RANK
    adv: AdvConfig = AdvConfig(iters=10, random_init=True)
    eval_adv: AdvConfig = AdvConfig(iters=20)
    eval_every: int = 0  # test-set evaluation period in epochs, 0 = final only
    rho_warmup: float = 0.0
    dual_update: str = "epoch"
    seed: int = 0

    def __post_init__(self):
        if not self.rho >= 0 or not math.isfinite(self.rho):
            raise ValueError(f"rho must be finite and >= 0, got {self.rho}")
        if self.lr < 0 or (self.finetune_lr is not None and self.finetune_lr < 0):
            raise ValueError("learning rates must be >= 0")
        if self.t1 < 0 or self.t2 < 0 or self.t1 + self.t2 < 1:
            raise ValueError(f"need t1, t2 >= 0 and at least one epoch, got {self.t1}, {self.t2}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.target_ratio < 1:
            raise ValueError(f"target_ratio must be >= 1, got {self.target_ratio}")
        if self.rank_refresh_period < 0:
            raise ValueError("rank_refresh_period must be >= 0 (0 keeps the initial plan)")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown rank scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.dual_update not in ("epoch", "batch"):
            raise ValueError(f"dual_update must be 'epoch' or 'batch', got {self.dual_update!r}")
        if not 0 <= self.rho_warmup <= 1:
            raise ValueError(f"rho_warmup must be a fraction in [0, 1], got {self.rho_warmup}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")

    def rho_at(self, epoch: int) -> float:
        warm = math.ceil(self.rho_warmup * self.t1)
        if warm <= 0:
            return self.rho
        return self.rho * min(1.0, (epoch + 1) / warm)


@dataclass
class DualState:
    """Auxiliary low-rank copies ``z`` and multipliers ``m`` per compressible layer."""

    z: dict[str, np.ndarray]
    m: dict[str, np.ndarray]

    @classmethod
    def init(cls, model: Model) -> "DualState":
        w = model.conv_weights()
        return cls({n: a.copy() for n, a in w.items()}, {n: np.zeros_like(a) for n, a in w.items()})

    def check(self, model: Model) -> None:
        w = model.conv_weights()
        if set(w) != set(self.z) or set(w) != set(self.m):
            raise ValueError(f"dual state layers {sorted(self.z)} do not match model {sorted(w)}")
        for n, a in w.items():
            if self.z[n].shape != a.shape or self.m[n].shape != a.shape:
                raise ValueError(f"dual state shape mismatch for {n}: weight {a.shape}")


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    lr: float
    rho: float
    loss: float
    train_benign: float  # accuracy on the clean training batches, %
    train_robust: float  # accuracy on the adversarial training batches, %
    test_benign: float = float("nan")
    test_robust: float = float("nan")
    rel_gap: dict[str, float] = field(default_factory=dict)  # ||W-Z|| / ||W||
    dual_gap: dict[str, float] = field(default_factory=dict)  # ||W-Z+M||
    ranks: dict[str, tuple[int, int]] = field(default_factory=dict)
    compressed_params: int = 0
    wall_time: float = 0.0

    @property
    def median_rel_gap(self) -> float:
        return float(np.median(list(self.rel_gap.values()))) if self.rel_gap else float("nan")


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    plan: RankPlan | None = None
    final_benign: float = float("nan")
    final_robust: float = float("nan")
    phase1_rel_gap: dict[str, float] = field(default_factory=dict)

    def summary(self) -> dict:
        out = {
            "epochs": len(self.records),
            "final_benign": self.final_benign,
            "final_robust": self.final_robust,
            "phase1_rel_gap": self.phase1_rel_gap,
        }
        if self.plan is not None:
            out["achieved_ratio"] = self.plan.achieved_ratio
            out["dense_params"] = self.plan.dense_params
            out["compressed_params"] = self.plan.compressed_params
            out["rank_plan"] = self.plan.to_dict()
        return out


def epoch_rng(seed: int, phase: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, phase, epoch])


def _accuracy(logits: np.ndarray, y: np.ndarray) -> int:
    return int((logits.argmax(axis=1) == y).sum())


def evaluate(model: Model, data: Dataset, adv: AdvConfig, seed: int = 0,
             batch_size: int = 100) -> tuple[float, float]:
    """Benign and PGD top-1 accuracy in percent, both in eval mode."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    rng = np.random.default_rng(seed)
    clean = robust = 0
    for x, y in data.batches(batch_size):
        clean += _accuracy(model.forward(x, "eval"), y)
        xa = pgd(model, x, y, adv, rng)
        robust += _accuracy(model.forward(xa, "eval"), y)
    return 100.0 * clean / len(data), 100.0 * robust / len(data)


def train_epoch(model: Model, opt: SGD, data: Dataset, lr: float, adv: AdvConfig,
                rng: np.random.Generator, batch_size: int,
                extra_fn: Callable[[], dict] | None = None,
                after_batch: Callable[[], None] | None = None) -> tuple[float, float, float]:
    """One epoch of adversarial SGD. Returns (mean loss, clean acc %, adversarial acc %).

    ``extra_fn`` supplies an additive gradient term per step; ``after_batch``
    runs after each update. The accuracies are measured on the training
    batches just before each update.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    total = clean = robust = 0.0
    for x, y in data.batches(batch_size, rng):
        xa = pgd(model, x, y, adv, rng)
        clean += _accuracy(model.forward(x, "eval"), y)
        logits = model.forward(xa, "train")
        robust += _accuracy(logits, y)
        loss, dlogits = cross_entropy(logits, y)
        model.backward(dlogits)
        total += loss * len(y)
        opt.step(model, model.grads(), lr, extra_fn() if extra_fn else None)
        if after_batch:
            after_batch()
    n = len(data)
    return total / n, 100.0 * clean / n, 100.0 * robust / n


def _optimizer(cfg: CstarConfig) -> SGD:
    return SGD(cfg.momentum, cfg.weight_decay)


def _maybe_eval(model, test, cfg, epoch, total, rec):
    if test is not None and cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == total):
        rec.test_benign, rec.test_robust = evaluate(model, test, cfg.eval_adv, cfg.seed)


def adversarial_train(model: Model, train: Dataset, epochs: int, cfg: CstarConfig,
                      test: Dataset | None = None, phase: int = PLAIN, lr: float | None = None,
                      on_epoch: Callable[[EpochRecord], None] | None = None) -> list[EpochRecord]:
    """Plain adversarial training with step decay over ``epochs`` (in place)."""
    base = cfg.lr if lr is None else lr
    opt = _optimizer(cfg)
    records = []
    for e in range(epochs):
        t0 = time.perf_counter()
        rate = step_decay(base, e, epochs)
        loss, clean, robust = train_epoch(model, opt, train, rate, cfg.adv,
                                          epoch_rng(cfg.seed, phase, e), cfg.batch_size)
        rec = EpochRecord(PHASE_NAMES[phase], e, rate, 0.0, loss, clean, robust)
        if model.factorized:
            rec.ranks = {n: model.layer(n).ranks for n in model.compressible}
            rec.compressed_params = sum(model.layer(n).factors.param_count for n in model.compressible)
        _maybe_eval(model, test, cfg, e, epochs, rec)
        rec.wall_time = time.perf_counter() - t0
        records.append(rec)
        log.info("%s epoch %d loss %.4f clean %.1f adv %.1f", rec.phase, e, loss, clean, robust)
        if on_epoch:
            on_epoch(rec)
    return records


def dense_weights(model: Model) -> dict[str, np.ndarray]:
    """Live views of the dense compressible weights; rejects factorized models."""
    out = {}
    for n in model.compressible:
        layer = model.layer(n)
        if not isinstance(layer, ConvDense):
            raise ValueError(f"layer {n} is already factorized; compression needs a dense model")
        out[n] = layer.params["weight"]
    return out


def plan_from(weights: dict[str, np.ndarray], cfg: CstarConfig
              ) -> tuple[RankPlan, dict[str, tuple]]:
    """Rank plan from the spectra of ``weights``, plus the SVDs for reuse."""
    svds = {n: unfolding_svds(w) for n, w in weights.items()}
    spectra = [SingularSpectrum.from_svds(n, w.shape, svds[n]) for n, w in weights.items()]
    return select(cfg.scheme, spectra, cfg.target_ratio, cfg.min_rank), svds


def update_dual(weights: dict[str, np.ndarray], dual: DualState, plan: RankPlan,
                svds: dict | None = None) -> None:
    """``Z = project(W + M)`` at plan ranks, then ``M += W - Z``."""
    ranks = plan.ranks()
    for n, w in weights.items():
        z = project(w + dual.m[n], ranks[n], None if svds is None else svds[n])
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite projection for layer {n}")
        dual.z[n] = z
        dual.m[n] = dual.m[n] + (w - z)


def gap_metrics(weights: dict[str, np.ndarray], dual: DualState
                ) -> tuple[dict[str, float], dict[str, float]]:
    rel, gap = {}, {}
    for n, w in weights.items():
        wn = np.linalg.norm(w)
        r = np.linalg.norm(w - dual.z[n])
        rel[n] = float(r / wn) if wn > 0 else float(r)
        gap[n] = float(np.linalg.norm(w - dual.z[n] + dual.m[n]))
        if not (math.isfinite(rel[n]) and math.isfinite(gap[n])):
            raise NumericError(f"non-finite regularization norm for layer {n}")
    return rel, gap


def regularize_epoch(model: Model, dual: DualState, plan: RankPlan, cfg: CstarConfig,
                     train: Dataset, epoch: int, opt: SGD | None = None,
                     refresh: bool = False) -> tuple[RankPlan, EpochRecord]:
    """One phase-1 epoch (in place on ``model`` and ``dual``).

    Returns the plan for the next epoch and this epoch's record. With
    ``refresh`` the plan is re-selected from the spectra of ``W + M`` and the
    same SVDs feed the projection.
    """
    t0 = time.perf_counter()
    weights = dense_weights(model)
    dual.check(model)
    opt = opt if opt is not None else _optimizer(cfg)
    rho = cfg.rho_at(epoch)
    rate = step_decay(cfg.lr, epoch, cfg.t1)

    def extra():
        return {n: {"weight": rho * (w - dual.z[n] + dual.m[n])} for n, w in weights.items()}

    after = (lambda: update_dual(weights, dual, plan)) if cfg.dual_update == "batch" else None
    loss, clean, robust = train_epoch(model, opt, train, rate, cfg.adv,
                                      epoch_rng(cfg.seed, REGULARIZE, epoch), cfg.batch_size,
                                      extra, after)
    svds = None
    if refresh:
        plan, svds = plan_from({n: w + dual.m[n] for n, w in weights.items()}, cfg)
    if cfg.dual_update == "epoch":
        update_dual(weights, dual, plan, svds)
    rel, gap = gap_metrics(weights, dual)
    rec = EpochRecord(PHASE_NAMES[REGULARIZE], epoch, rate, rho, loss, clean, robust,
                      rel_gap=rel, dual_gap=gap, ranks=plan.ranks(),
                      compressed_params=plan.compressed_params)
    rec.wall_time = time.perf_counter() - t0
    return plan, rec


def run_cstar(model: Model, cfg: CstarConfig, train: Dataset, test: Dataset | None = None,
              on_epoch: Callable[[EpochRecord], None] | None = None,
              on_phase_end: Callable[[str, Model], None] | None = None
              ) -> tuple[Model, TrainReport]:
    """Full compression run on a copy of a dense pretrained ``model``.

    ``t1 = 0`` skips phase 1, which gives decompose-then-finetune.
    ``on_phase_end`` receives ``("regularize", dense model)`` after phase 1
    (when it runs) and ``("finetune", factorized model)`` after phase 2.
    """
    model = model.clone()
    weights = dense_weights(model)
    # Fails with BudgetError before any training if the floor does not fit.
    plan, _ = plan_from(weights, cfg)
    dual = DualState.init(model)
    report = TrainReport()
    opt = _optimizer(cfg)
    for e in range(cfg.t1):
        refresh = cfg.rank_refresh_period > 0 and (e + 1) % cfg.rank_refresh_period == 0
        plan, rec = regularize_epoch(model, dual, plan, cfg, train, e, opt, refresh)
        _maybe_eval(model, test, cfg, e, cfg.t1, rec)
        report.records.append(rec)
        log.info("regularize epoch %d loss %.4f adv %.1f median gap %.4f ratio %.2f",
                 e, rec.loss, rec.train_robust, rec.median_rel_gap, plan.achieved_ratio)
        if on_epoch:
            on_epoch(rec)
    if cfg.t1:
        report.phase1_rel_gap = dict(report.records[-1].rel_gap)
        if on_phase_end:
            on_phase_end(PHASE_NAMES[REGULARIZE], model)
    if plan.achieved_ratio < cfg.target_ratio:
        raise BudgetError(f"plan ratio {plan.achieved_ratio:.3f} below target {cfg.target_ratio}")
    report.plan = plan
    fact = factorize(model, plan.ranks())
    lr = cfg.lr if cfg.finetune_lr is None else cfg.finetune_lr
    report.records += adversarial_train(fact, train, cfg.t2, cfg, test, FINETUNE, lr, on_epoch)
    if on_phase_end:
        on_phase_end(PHASE_NAMES[FINETUNE], fact)
    if test is not None:
        report.final_benign, report.final_robust = evaluate(fact, test, cfg.eval_adv, cfg.seed)
    return fact, report


def config_dict(cfg: CstarConfig) -> dict:
    return asdict(cfg)
