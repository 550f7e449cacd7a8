"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Every key must be a field of
:class:`RunConfig`; ``dataset`` and ``out_dir`` are required. Floats accept
``a/b`` fractions (``delta = 8/255``), tuples are comma separated and booleans
are ``true``/``false``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path

from .attack import AdvConfig
from .cstar_train import CstarConfig
from .data import BlobSpec, Dataset, read_raw, split, synthetic_blobs
from .errors import ConfigError
from .nn import Architecture

REQUIRED = ("dataset", "out_dir")
DATASETS = ("synthetic-blobs", "raw-binary")


@dataclass(frozen=True)
class RunConfig:
    dataset: str = ""
    out_dir: str = ""
    seed: int = 0
    # dataset
    data_path: str = ""
    test_fraction: float = 0.2
    classes: int = 10
    image_size: int = 12
    channels: int = 3
    train_samples: int = 1000
    test_samples: int = 500
    radius: float = 0.08
    noise: float = 0.35
    # architecture
    stem_width: int = 8
    widths: tuple[int, ...] = (24, 64, 224)
    kernel_size: int = 3
    batch_norm: bool = True
    # training
    pretrain_epochs: int = 10
    lr: float = 0.05
    finetune_lr: float = -1.0  # negative: same as lr
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 50
    rho: float = 10.0
    rho_warmup: float = 0.0
    t1: int = 15
    t2: int = 15
    target_ratio: float = 4.0
    rank_refresh_period: int = 1
    scheme: str = "global"
    min_rank: int = 8
    dual_update: str = "epoch"
    eval_every: int = 0
    # attacks
    delta: float = 8 / 255
    step: float = 2 / 255
    train_iters: int = 10
    train_random_init: bool = True
    eval_iters: int = 20
    eval_random_init: bool = False

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.dataset == "raw-binary" and not self.data_path:
            raise ConfigError("raw-binary dataset needs data_path")
        try:
            self.cstar()
            self.architecture()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_adv(self) -> AdvConfig:
        return AdvConfig(self.delta, self.step, self.train_iters, self.train_random_init)

    def eval_adv(self) -> AdvConfig:
        return AdvConfig(self.delta, self.step, self.eval_iters, self.eval_random_init)

    def cstar(self, **overrides) -> CstarConfig:
        kw = dict(
            rho=self.rho, lr=self.lr,
            finetune_lr=None if self.finetune_lr < 0 else self.finetune_lr,
            momentum=self.momentum, weight_decay=self.weight_decay, batch_size=self.batch_size,
            t1=self.t1, t2=self.t2, target_ratio=self.target_ratio,
            rank_refresh_period=self.rank_refresh_period, scheme=self.scheme,
            min_rank=self.min_rank, adv=self.train_adv(), eval_adv=self.eval_adv(),
            eval_every=self.eval_every, rho_warmup=self.rho_warmup,
            dual_update=self.dual_update, seed=self.seed,
        )
        kw.update(overrides)
        return CstarConfig(**kw)

    def architecture(self, in_channels: int | None = None, image_size: int | None = None,
                     num_classes: int | None = None) -> Architecture:
        return Architecture(
            in_channels=in_channels or self.channels,
            image_size=image_size or self.image_size,
            num_classes=num_classes or self.classes,
            stem_width=self.stem_width, widths=tuple(self.widths),
            kernel_size=self.kernel_size, batch_norm=self.batch_norm,
        )

    def load_data(self) -> tuple[Dataset, Dataset]:
        if self.dataset == "synthetic-blobs":
            return synthetic_blobs(BlobSpec(
                self.classes, self.image_size, self.channels, self.train_samples,
                self.test_samples, self.radius, self.noise, seed=self.seed))
        return split(read_raw(self.data_path), self.test_fraction, self.seed)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    default = _FIELDS[key].default
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(f"expected true or false, got {raw!r}")
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(Fraction(raw)) if "/" in raw else float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def parse_config(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    values: dict[str, object] = {}
    items = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        items.append((lineno, key, raw))
    items += [(0, k, v) for k, v in (overrides or {}).items()]
    for lineno, key, raw in items:
        where = f"line {lineno}: " if lineno else "override: "
        if key not in _FIELDS:
            raise ConfigError(f"{where}unknown key {key!r}")
        values[key] = _convert(key, raw)
    missing = [k for k in REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    return RunConfig(**values)


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, overrides)


def format_config(cfg: RunConfig) -> str:
    """Inverse of :func:`parse_config`."""
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            v = ",".join(map(str, v))
        elif isinstance(v, float):
            v = repr(v)
        out.append(f"{f.name} = {v}")
    return "\n".join(out) + "\n"


def replace(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes)
