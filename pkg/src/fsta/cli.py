"""Command-line entry point.

Exit codes: 0 success, 1 a check failed, 2 usage or input error. Reports are
JSON or CSV; the resolved configuration is echoed to stderr before work
starts and embedded in every report.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

log = logging.getLogger("fsta")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _apply_thread_cap() -> None:
    n = os.environ.get("FSTA_THREADS")
    if not n:
        return
    from threadpoolctl import threadpool_limits

    threadpool_limits(int(n))


def _flatten(d: Dict, prefix: str = "") -> Dict[str, object]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, (list, tuple)):
            out[key] = json.dumps(v, sort_keys=True)
        else:
            out[key] = v
    return out


def _render(report, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report, indent=2, sort_keys=True) + "\n"
    rows = report if isinstance(report, list) else [report]
    flat = [_flatten(r) for r in rows]
    header = list(dict.fromkeys(k for r in flat for k in r))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    w.writerows(flat)
    return buf.getvalue()


def _emit(args, report, default_fmt: str = "json") -> None:
    text = _render(report, args.format or default_fmt)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def _echo_config(cfg: Dict[str, object]) -> None:
    print(json.dumps({"resolved_config": cfg}, sort_keys=True), file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gradcheck(args) -> int:
    from .checks import run_gradchecks

    cfg = {"subcommand": "gradcheck", "target": args.target, "seed": args.seed, "probes": args.probes}
    _echo_config(cfg)
    results = run_gradchecks(args.target, args.seed, args.probes)
    ok = all(r.passed for r in results.values())
    report = {
        "config": cfg,
        "step": 1e-5,
        "rtol": 1e-4,
        "results": {k: {"max_rel_error": r.max_rel_error, "probes": r.probes, "pass": r.passed} for k, r in results.items()},
        "pass": ok,
    }
    _emit(args, report)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_oracle(args) -> int:
    from .attention import FstaConfig
    from .baseline import oracle_check, random_instance

    fcfg = FstaConfig(T=args.t, H=args.h, W=args.w, M=args.m, N=args.n, C=args.c)
    cfg = {"subcommand": "oracle", "seed": args.seed, "logit_scale": args.logit_scale, **fcfg.to_dict()}
    _echo_config(cfg)
    x, params = random_instance(fcfg, args.seed, args.logit_scale)
    rep = oracle_check(x, params, fcfg)
    report = {
        "config": cfg,
        "shape": {k: getattr(fcfg, k) for k in ("T", "C", "H", "W", "M", "N")},
        "seed": args.seed,
        "max_abs_diff": rep["max_abs_diff"],
        "rank_check": rep["rank_check"],
        "pass": bool(rep["pass"] and rep["rank_check"]["pass"]),
    }
    _emit(args, report)
    return EXIT_OK if report["pass"] else EXIT_FAIL


BENCH_HEADER = ["config", "dense_elems", "fsta_elems", "ratio", "measured_peak", "wall_ms"]


def cmd_bench(args) -> int:
    from .attention import FstaConfig
    from .cost import bench_row

    sizes = [int(s) for s in args.sweep.split(",")] if args.sweep else [None]
    modes = ["fsta", "dense"] if args.mode == "both" else [args.mode]
    cfg = {
        "subcommand": "bench", "t": args.t, "h": args.h, "w": args.w, "m": args.m, "n": args.n, "c": args.c,
        "mode": args.mode, "repeat": args.repeat, "seed": args.seed, "sweep": args.sweep, "timing": args.timing,
    }
    _echo_config(cfg)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BENCH_HEADER)
    plot_rows = []
    for size in sizes:
        h = w = size if size is not None else None
        fcfg = FstaConfig(T=args.t, H=h or args.h, W=w or args.w, M=args.m, N=args.n, C=args.c)
        for mode in modes:
            report, wall_ms = bench_row(fcfg, mode, args.repeat, args.seed)
            tag = f"T={fcfg.T};H={fcfg.H};W={fcfg.W};M={fcfg.M};N={fcfg.N};C={fcfg.C};mode={mode};seed={args.seed}"
            writer.writerow(
                [
                    tag,
                    report.dense_affinity_elems,
                    report.fsta_attention_elems,
                    f"{report.ratio:.6f}",
                    report.measured_peak_elems,
                    f"{wall_ms:.3f}" if args.timing else "",
                ]
            )
            if mode == "fsta":
                plot_rows.append(report.to_dict())
    text = buf.getvalue()
    if args.out:
        Path(args.out).write_text(text)
        if args.plot and plot_rows:
            from .plots import plot_cost

            plot_cost(plot_rows, Path(args.out).with_suffix(".png"))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .serialize import save_archive
    from .synth import generate, sequence_entries, write_pgm

    cfg = {
        "subcommand": "synth", "seed": args.seed, "frames": args.frames, "h": args.h, "w": args.w,
        "objects": args.objects, "vmax": args.vmax, "exposure": args.exposure, "channels": args.channels,
    }
    _echo_config(cfg)
    if not args.out:
        raise UsageError("synth requires --out DIR")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seq = generate(args.seed, args.frames, args.h, args.w, args.objects, args.vmax, args.exposure, args.channels)
    save_archive(out / "sequence.fsta", sequence_entries(seq))
    (out / "meta.json").write_text(json.dumps(seq.meta, indent=2, sort_keys=True) + "\n")
    if args.channels == 1 and not args.no_pgm:
        for f in range(seq.num_frames):
            write_pgm(out / f"sharp_{f:03d}.pgm", seq.sharp.data[f])
            write_pgm(out / f"blurred_{f:03d}.pgm", seq.blurred.data[f])
    print(json.dumps({"config": cfg, "meta": seq.meta, "path": str(out / "sequence.fsta")}, sort_keys=True))
    return EXIT_OK


def load_experiment(path: Optional[str]):
    """Split a flat ``net.* / train.* / data.*`` key-value file into configs."""
    from .net import NetConfig
    from .serialize import parse_kv
    from .train import data_config_from_dict, train_config_from_dict

    groups: Dict[str, Dict[str, str]] = {"net": {}, "train": {}, "data": {}}
    if path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(path)
        for key, value in parse_kv(p.read_text()).items():
            prefix, _, name = key.partition(".")
            if prefix not in groups or not name:
                raise UsageError(f"config key {key!r} must start with net., train. or data.")
            groups[prefix][name] = value
    return (
        NetConfig.from_dict(groups["net"]),
        train_config_from_dict(groups["train"]),
        data_config_from_dict(groups["data"]),
    )


def experiment_dict(net_cfg, train_cfg, data_cfg) -> Dict[str, object]:
    from dataclasses import asdict

    out = {}
    for prefix, c in (("net", net_cfg), ("train", train_cfg), ("data", data_cfg)):
        out.update({f"{prefix}.{k}": v for k, v in asdict(c).items()})
    return out


def save_checkpoint(path: Path, params, net_cfg) -> None:
    from .serialize import dump_kv, save_archive

    save_archive(path, params)
    Path(str(path) + ".cfg").write_text(dump_kv({f"net.{k}": v for k, v in net_cfg.to_dict().items()}))


def load_checkpoint(path: str, net_cfg=None):
    from .net import NetConfig, check_params
    from .serialize import load_archive, parse_kv

    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(path)
    params = load_archive(p)
    if net_cfg is None:
        side = Path(str(p) + ".cfg")
        if not side.is_file():
            raise FileNotFoundError(str(side))
        kv = parse_kv(side.read_text())
        net_cfg = NetConfig.from_dict({k.partition(".")[2]: v for k, v in kv.items() if k.startswith("net.")})
    check_params(params, net_cfg)
    return params, net_cfg


def cmd_train(args) -> int:
    from dataclasses import replace

    from .train import train

    net_cfg, train_cfg, data_cfg = load_experiment(args.config)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if args.steps is not None:
        train_cfg = replace(train_cfg, steps=args.steps)
    if args.fusion is not None:
        net_cfg = replace(net_cfg, fusion_mode=args.fusion)
    cfg = {"subcommand": "train", **experiment_dict(net_cfg, train_cfg, data_cfg)}
    _echo_config(cfg)
    if not args.out:
        raise UsageError("train requires --out CHECKPOINT")
    result = train(net_cfg, train_cfg, data_cfg.train_data(), progress_every=args.progress)
    save_checkpoint(Path(args.out), result.params, net_cfg)
    if args.log:
        with open(args.log, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "lr"])
            for step, loss, lr in result.curve:
                w.writerow([step, repr(float(loss)), repr(float(lr))])
        if args.plot:
            from .plots import plot_loss

            plot_loss(result.curve, Path(args.log).with_suffix(".png"))
    losses = [c[1] for c in result.curve]
    k = min(50, len(losses))
    summary = {
        "config": cfg,
        "checkpoint": str(args.out),
        "steps": len(losses),
        "first_loss_mean": float(np.mean(losses[:k])) if k else None,
        "last_loss_mean": float(np.mean(losses[-k:])) if k else None,
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate

    net_override, train_cfg, data_cfg = load_experiment(args.config)
    # a checkpoint's own sidecar wins; the config file's net section is the fallback
    loaded = [
        load_checkpoint(c, None if Path(str(c) + ".cfg").is_file() else net_override) for c in args.checkpoint
    ]
    cfg = {
        "subcommand": "eval", "checkpoint": list(args.checkpoint),
        **experiment_dict(loaded[0][1], train_cfg, data_cfg),
    }
    _echo_config(cfg)
    data = data_cfg.eval_data()
    rows = []
    for path, (params, net_cfg) in zip(args.checkpoint, loaded):
        rep = evaluate(params, net_cfg, data).to_dict()
        rep.update(checkpoint=path, fusion_mode=net_cfg.fusion_mode, config=cfg)
        rows.append(rep)
    if len(rows) == 1:
        _emit(args, rows[0])
    else:
        # side-by-side comparison, one row per checkpoint
        keys = ("checkpoint", "fusion_mode", "psnr_in", "psnr_out", "ssim_in", "ssim_out", "frames", "config")
        table = [{k: r[k] for k in keys} for r in rows]
        _emit(args, table if (args.format or "csv") == "csv" else {"config": cfg, "rows": rows}, "csv")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .metrics import psnr, ssim
    from .serialize import load_archive, save_archive
    from .synth import SyntheticSequence, write_pgm
    from .tensor import Tensor
    from .train import restore_sequence

    params, net_cfg = load_checkpoint(args.checkpoint)
    cfg = {"subcommand": "infer", "checkpoint": args.checkpoint, "sequence": args.sequence, **net_cfg.to_dict()}
    _echo_config(cfg)
    if not args.out:
        raise UsageError("infer requires --out DIR")
    seq_path = Path(args.sequence)
    if not seq_path.is_file():
        raise FileNotFoundError(args.sequence)
    entries = load_archive(seq_path)
    if "blurred" not in entries:
        raise UsageError("sequence archive has no 'blurred' entry")
    blurred = entries["blurred"]
    sharp = entries.get("sharp", blurred)
    seq = SyntheticSequence(sharp=sharp, blurred=blurred, meta={})
    restored = restore_sequence(seq, params, net_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = sorted(restored)
    save_archive(out / "restored.fsta", {f"frame.{c:03d}": Tensor(restored[c]) for c in frames})
    if net_cfg.image_channels == 1:
        for c in frames:
            write_pgm(out / f"restored_{c:03d}.pgm", restored[c])
    report: Dict[str, object] = {"config": cfg, "frames": frames}
    if "sharp" in entries:
        p_in = [psnr(blurred.data[c], sharp.data[c]) for c in frames]
        p_out = [psnr(np.clip(restored[c], 0, 1), sharp.data[c]) for c in frames]
        s_in = [ssim(blurred.data[c], sharp.data[c]) for c in frames]
        s_out = [ssim(np.clip(restored[c], 0, 1), sharp.data[c]) for c in frames]
        report.update(
            psnr_in=float(np.mean(p_in)), psnr_out=float(np.mean(p_out)),
            ssim_in=float(np.mean(s_in)), ssim_out=float(np.mean(s_out)),
        )
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None, help="report / output path")
    common.add_argument("--format", choices=("json", "csv"), default=None)

    p = _Parser(prog="fsta", description="Factorized spatio-temporal attention toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    g.add_argument("--target", choices=("primitives", "fsta", "net", "all"), required=True)
    g.add_argument("--probes", type=int, default=100)
    g.set_defaults(func=cmd_gradcheck)

    def shape_flags(sp, t, h, w, m, n, c):
        sp.add_argument("--t", type=int, default=t)
        sp.add_argument("--h", type=int, default=h)
        sp.add_argument("--w", type=int, default=w)
        sp.add_argument("--m", type=int, default=m)
        sp.add_argument("--n", type=int, default=n)
        sp.add_argument("--c", type=int, default=c)

    o = sub.add_parser("oracle", parents=[common], help="compare against the materialized affinity")
    shape_flags(o, 3, 4, 4, 2, 2, 1)
    o.add_argument("--logit-scale", type=float, default=None, help="inflate weights to stress the softmaxes")
    o.set_defaults(func=cmd_oracle)

    b = sub.add_parser("bench", parents=[common], help="memory / FLOP accounting")
    shape_flags(b, 4, 7, 7, 4, 4, 1)
    b.add_argument("--mode", choices=("fsta", "dense", "both"), default="both")
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--sweep", default=None, help="comma-separated H=W sizes")
    b.add_argument("--timing", action="store_true", help="fill wall_ms (makes the CSV run-dependent)")
    b.add_argument("--plot", action="store_true", help="write a PNG next to --out")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic sequence")
    s.add_argument("--frames", type=int, default=12)
    s.add_argument("--h", type=int, default=64)
    s.add_argument("--w", type=int, default=64)
    s.add_argument("--objects", type=int, default=10)
    s.add_argument("--vmax", type=float, default=3.0)
    s.add_argument("--exposure", type=int, default=9)
    s.add_argument("--channels", type=int, default=1)
    s.add_argument("--no-pgm", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train the toy deblurring network")
    t.set_defaults(seed=None)
    t.add_argument("--config", default=None, help="flat key = value file (net.*, train.*, data.*)")
    t.add_argument("--log", default=None, help="CSV of step,loss,lr")
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--fusion", choices=("fsta", "dense_nonlocal", "average", "single_frame"), default=None)
    t.add_argument("--plot", action="store_true", help="write a loss-curve PNG next to --log")
    t.add_argument("--progress", type=int, default=0, help="log every N steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on held-out sequences")
    e.add_argument("--checkpoint", action="append", required=True, help="repeat to compare checkpoints")
    e.add_argument("--config", default=None)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", parents=[common], help="restore a sequence archive")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--sequence", required=True)
    i.set_defaults(func=cmd_infer)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    from .baseline import MemoryGuardError
    from .serialize import FormatError

    try:
        _apply_thread_cap()
        return args.func(args)
    except (UsageError, FileNotFoundError, FormatError, MemoryGuardError, ValueError) as exc:
        print(f"fsta {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
