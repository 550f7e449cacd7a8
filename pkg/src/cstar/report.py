"""Per-layer rank tables with compact parameter counts."""

from __future__ import annotations

import decimal
from dataclasses import dataclass
from typing import Iterable, Sequence

from .nn import ConvDense, ConvFactorized, Model
from .rank_select import LayerRanks, RankPlan
from .tucker import dense_param_count

COLUMNS = ("Layer", "Weight Shape", "Tucker-2 Ranks", "Uncomp. Params", "Comp. Params", "Layer C.R.")


def format_count(n: int) -> str:
    """Three significant figures with a K/M suffix, trailing zeros dropped.

    Rounding is exact decimal half-to-even, so 8175 gives 8.18K and 9945
    gives 9.94K.

    >>> format_count(8175), format_count(3004), format_count(2359296)
    ('8.18K', '3K', '2.36M')
    """
    if n < 0:
        raise ValueError(f"count must be >= 0, got {n}")
    units = ("", "K", "M", "G")
    ctx = decimal.Context(prec=3, rounding=decimal.ROUND_HALF_EVEN)
    u = 0
    while u + 1 < len(units) and n >= 1000 ** (u + 1):
        u += 1
    v = ctx.divide(decimal.Decimal(int(n)), decimal.Decimal(1000 ** u))
    if v >= 1000 and u + 1 < len(units):  # 999_600 rounds up to 1M, not 1000K
        u, v = u + 1, ctx.divide(v, 1000)
    text = f"{v:f}"
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    return text + units[u]


def format_ratio(r: float) -> str:
    return f"{r:.1f}x"


@dataclass(frozen=True)
class Row:
    name: str
    shape: tuple[int, int, int, int]
    ranks: tuple[int, int] | None  # None: dense layer
    dense: int
    compressed: int

    @property
    def ratio(self) -> float:
        return self.dense / self.compressed

    def cells(self) -> tuple[str, ...]:
        ranks = f"[{self.ranks[0]}, {self.ranks[1]}]" if self.ranks else "dense"
        return (self.name, "(" + ", ".join(map(str, self.shape)) + ")", ranks,
                format_count(self.dense), format_count(self.compressed), format_ratio(self.ratio))


def rows_from_plan(plan: RankPlan) -> list[Row]:
    return [_row(lr) for lr in plan.layers]


def _row(lr: LayerRanks) -> Row:
    o, i, k = lr.dims
    return Row(lr.name, (o, i, k, k), (lr.r1, lr.r2), lr.dense_params, lr.compressed_params)


def rows_from_model(model: Model) -> list[Row]:
    """One row per compressible layer; dense layers count as uncompressed."""
    rows = []
    for n in model.compressible:
        layer = model.layer(n)
        if isinstance(layer, ConvFactorized):
            f = layer.factors
            o, i, k, _ = f.weight_shape
            rows.append(Row(n, f.weight_shape, f.ranks, dense_param_count(o, i, k), f.param_count))
        elif isinstance(layer, ConvDense):
            o, i, k, _ = layer.weight_shape
            d = dense_param_count(o, i, k)
            rows.append(Row(n, tuple(layer.weight_shape), None, d, d))
    return rows


def render(rows: Sequence[Row], title: str | None = None) -> str:
    """Aligned plain-text table with a totals line."""
    body = [COLUMNS] + [r.cells() for r in rows]
    dense, comp = sum(r.dense for r in rows), sum(r.compressed for r in rows)
    body.append(("Total", "", "", format_count(dense), format_count(comp),
                 format_ratio(dense / comp) if comp else "-"))
    widths = [max(len(r[c]) for r in body) for c in range(len(COLUMNS))]
    lines = [title] if title else []
    for n, r in enumerate(body):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
        if n == 0 or n == len(body) - 2:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def totals(rows: Iterable[Row]) -> tuple[int, int]:
    rows = list(rows)
    return sum(r.dense for r in rows), sum(r.compressed for r in rows)
