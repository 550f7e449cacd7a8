"""Command-line entry point: ``cstar <command> [options]``.

Commands that train read a run config (see :mod:`cstar.config`) and write
into its ``out_dir``. Errors exit with status 1 and a single ``error:`` line
on stderr; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import bench_conv
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .cstar_train import PLAIN, TrainReport, adversarial_train, evaluate, run_cstar
from .errors import CstarError
from .metrics import MetricsWriter, write_summary
from .nn import mini_conv_net
from .report import render, rows_from_model, totals

log = logging.getLogger("cstar")


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise CstarError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config, _overrides(args.set))
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    return cfg


def _fresh_metrics(path: Path) -> MetricsWriter:
    if path.exists():
        path.unlink()
    return MetricsWriter(path)


def cmd_pretrain(args) -> int:
    cfg = _run_config(args)
    train, test = cfg.load_data()
    c, h, _ = train.input_shape
    model = mini_conv_net(cfg.architecture(c, h, train.num_classes), np.random.default_rng(cfg.seed))
    out = Path(cfg.out_dir)
    writer = _fresh_metrics(out / "pretrain_metrics.csv")
    report = TrainReport()
    report.records = adversarial_train(model, train, cfg.pretrain_epochs, cfg.cstar(), test,
                                       PLAIN, on_epoch=writer)
    report.final_benign, report.final_robust = evaluate(model, test, cfg.eval_adv(), cfg.seed)
    ckpt = Path(args.out) if args.out else out / "pretrained.ckpt"
    save_checkpoint(model, ckpt)
    write_summary(report, out / "pretrain_summary.json", params=model.param_count(),
                  checkpoint=str(ckpt))
    print(f"pretrained {model.param_count()} params: benign {report.final_benign:.2f}%, "
          f"robust {report.final_robust:.2f}% -> {ckpt}")
    return 0


def _compress(args, t1_zero: bool) -> int:
    cfg = _run_config(args)
    model = load_checkpoint(args.checkpoint)
    if model.factorized:
        raise CstarError(f"{args.checkpoint} is already factorized; compression needs a dense model")
    train, test = cfg.load_data()
    tag = "decompose" if t1_zero else "compress"
    if t1_zero:
        epochs = args.epochs if args.epochs is not None else cfg.t1 + cfg.t2
        ccfg = cfg.cstar(t1=0, t2=epochs)
    else:
        ccfg = cfg.cstar()
    out = Path(cfg.out_dir)
    writer = _fresh_metrics(out / f"{tag}_metrics.csv")
    ckpt = Path(args.out) if args.out else out / f"{tag}.ckpt"

    def phase_end(phase, m):
        # the dense phase-1 result is kept next to the final checkpoint
        if phase == "regularize":
            save_checkpoint(m, ckpt.with_name(ckpt.stem + "_phase1.ckpt"))

    model, report = run_cstar(model, ccfg, train, test, on_epoch=writer, on_phase_end=phase_end)
    save_checkpoint(model, ckpt)
    rows = rows_from_model(model)
    (out / f"{tag}_ranks.txt").write_text(render(rows))
    write_summary(report, out / f"{tag}_summary.json", checkpoint=str(ckpt))
    print(f"{tag}: C.R. {report.plan.achieved_ratio:.3f}x, benign {report.final_benign:.2f}%, "
          f"robust {report.final_robust:.2f}% -> {ckpt}")
    return 0


def cmd_compress(args) -> int:
    return _compress(args, False)


def cmd_decompose(args) -> int:
    return _compress(args, True)


def cmd_eval(args) -> int:
    cfg = load_config(args.config, _overrides(args.set))
    model = load_checkpoint(args.checkpoint)
    _, test = cfg.load_data()
    adv = cfg.eval_adv()
    if args.iters is not None:
        adv = type(adv)(adv.delta, adv.step, args.iters, adv.random_init)
    benign, robust = evaluate(model, test, adv, cfg.seed)
    result = {"benign": benign, "robust": robust, "iters": adv.iters, "samples": len(test)}
    print(json.dumps(result) if args.json else
          f"benign {benign:.2f}%  PGD-{adv.iters} robust {robust:.2f}%  ({len(test)} samples)")
    return 0


def cmd_rank_report(args) -> int:
    model = load_checkpoint(args.checkpoint)
    rows = rows_from_model(model)
    if args.json:
        dense, comp = totals(rows)
        print(json.dumps({
            "layers": [{"name": r.name, "shape": list(r.shape),
                        "ranks": list(r.ranks) if r.ranks else None,
                        "dense_params": r.dense, "compressed_params": r.compressed} for r in rows],
            "dense_params": dense, "compressed_params": comp,
            "ratio": dense / comp,
        }, indent=2))
    else:
        sys.stdout.write(render(rows))
    return 0


def cmd_bench(args) -> int:
    ranks = tuple(int(v) for v in args.ranks.split(",")) if args.ranks else None
    if ranks is not None and len(ranks) != 2:
        raise CstarError(f"--ranks expects r1,r2, got {args.ranks!r}")
    res = bench_conv(args.in_channels, args.out_channels, args.kernel, args.size, args.ratio,
                     ranks, args.batch, args.runs, args.warmup)
    print(json.dumps(res.to_dict()) if args.json else res.line())
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run
    return 0 if run(args.seed) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cstar", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="key = value run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")

    sp = sub.add_parser("pretrain", help="adversarially train a dense model")
    with_config(sp)
    sp.add_argument("--out", help="checkpoint path (default out_dir/pretrained.ckpt)")
    sp.set_defaults(func=cmd_pretrain)

    for name, func, text in (("compress", cmd_compress, "low-rank regularize, decompose, fine-tune"),
                             ("decompose", cmd_decompose, "decompose directly, then fine-tune")):
        sp = sub.add_parser(name, help=text)
        with_config(sp)
        sp.add_argument("--checkpoint", required=True, help="dense checkpoint")
        sp.add_argument("--out", help="output checkpoint path")
        if name == "decompose":
            sp.add_argument("--epochs", type=int, help="fine-tune epochs (default t1 + t2)")
        sp.set_defaults(func=func)

    sp = sub.add_parser("eval", help="benign and PGD accuracy of a checkpoint")
    with_config(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--iters", type=int, help="PGD iterations (default eval_iters)")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("rank-report", help="per-layer rank table of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_rank_report)

    sp = sub.add_parser("bench", help="dense vs factorized conv latency")
    sp.add_argument("--in-channels", type=int, default=256)
    sp.add_argument("--out-channels", type=int, default=256)
    sp.add_argument("--kernel", type=int, default=3)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--ratio", type=float, default=4.0)
    sp.add_argument("--ranks", help="explicit r1,r2 instead of the uniform choice")
    sp.add_argument("--batch", type=int, default=1)
    sp.add_argument("--runs", type=int, default=30)
    sp.add_argument("--warmup", type=int, default=5)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("selftest", help="run the built-in oracle checks")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (CstarError, ValueError, OSError, ArithmeticError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
