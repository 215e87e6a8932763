"""``scaa`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every artifact
carries the resolved flag set (minus ``--out``) in its header, so a file
can be regenerated from its own first line.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path
from typing import List, Optional, Sequence

from threadpoolctl import threadpool_limits

from . import __version__
from .ablation import ABLATION_COLUMNS, locality, run_ablation
from .estimator import PRESETS, model_config
from .losses import evaluate
from .memest import BUILTINS, estimate, builtin_arch, param_deviation_note, read_arch, scaa_total
from .model import VARIANTS, ScaaNet
from .synth import PhantomSpec, VolumeSample, make_dataset, read_spec, write_spec
from .train import TrainConfig, grad_check, infer, micro_model, restore, train
from .volume_io import (read_header, read_volume, write_attention, write_metrics, write_table,
                        write_volume)

log = logging.getLogger("scaa")

TEST_SEED_OFFSET = 1000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _non_negative_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _non_negative_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scaa", description="Hybrid 2D/3D organ segmentation with slice-context attention.")
    p.add_argument("--version", action="version", version=f"scaa {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", type=Path, required=out_required, help="output directory")

    def data_flags(sp):
        sp.add_argument("--config", type=Path, help="phantom description (INI); defaults to the built-in phantom")
        sp.add_argument("--n", type=_positive_int, default=8, help="number of synthetic training volumes")

    def train_flags(sp):
        sp.add_argument("--model", choices=PRESETS, default="toy", help="width preset")
        sp.add_argument("--epochs", type=_non_negative_int, default=150)
        sp.add_argument("--max-steps", type=_non_negative_int, help="cap on optimizer steps")
        sp.add_argument("--lr", type=_non_negative_float, default=1e-4)
        sp.add_argument("--slices", type=_positive_int, default=16)
        sp.add_argument("--no-augment", action="store_true")

    sp = sub.add_parser("gen", help="write synthetic phantoms")
    common(sp)
    data_flags(sp)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    data_flags(sp)
    train_flags(sp)
    sp.add_argument("--data", type=Path, help="directory of volumes written by 'gen' (instead of --config/--n)")
    sp.add_argument("--variant", choices=VARIANTS, default="scaa-star")
    sp.add_argument("--checkpoint-every", type=_non_negative_int, default=0)
    sp.add_argument("--resume", type=Path, help="checkpoint to continue from")
    sp.add_argument("--timing", action="store_true", help="record wall-clock ms per step in the log")

    sp = sub.add_parser("infer", help="segment a volume")
    common(sp)
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--volume", type=Path, required=True, help="volume sidecar (.json)")
    sp.add_argument("--batch", type=_positive_int, default=16, help="slices per forward pass")

    sp = sub.add_parser("eval", help="DSC and HD95 of a prediction")
    common(sp)
    sp.add_argument("--pred", type=Path, required=True)
    sp.add_argument("--gt", type=Path, required=True)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    common(sp, out_required=False)
    sp.add_argument("--model", choices=("micro",), default="micro")
    sp.add_argument("--variant", choices=VARIANTS, default="scaa")
    sp.add_argument("--coords", type=_positive_int, default=50, help="coordinates per tensor")
    sp.add_argument("--tolerance", type=float, default=1e-4)

    sp = sub.add_parser("memest", help="activation memory and parameter estimate")
    common(sp, out_required=False)
    sp.add_argument("--arch", choices=BUILTINS, help="built-in architecture")
    sp.add_argument("--config", type=Path, help="layer-list file (instead of --arch)")
    sp.add_argument("--batch", type=_positive_int, help="batch size (default: the reference batch)")
    sp.add_argument("--num-classes", type=_positive_int, default=11)
    sp.add_argument("--no-count-upsample", action="store_true", help="count only conv and norm outputs")

    sp = sub.add_parser("attn-export", help="attention weights of every slice as CSV")
    common(sp)
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--volume", type=Path, help="volume sidecar; defaults to a held-out synthetic phantom")
    sp.add_argument("--config", type=Path, help="phantom description for the synthetic volume")
    sp.add_argument("--batch", type=_positive_int, default=16)

    sp = sub.add_parser("ablate", help="train and compare CA, C-CA, SCAA and SCAA*")
    common(sp)
    data_flags(sp)
    train_flags(sp)
    sp.add_argument("--n-test", type=_positive_int, default=2, help="held-out synthetic volumes")
    sp.add_argument("--variant", choices=VARIANTS, action="append", help="restrict to these variants")
    return p


def echo(args) -> str:
    """The command line that reproduces this run, without the output location."""
    parts = ["scaa", args.command]
    for key, value in sorted(vars(args).items()):
        if key in ("command", "out", "verbose") or value is None or value is False:
            continue
        flag = "--" + key.replace("_", "-")
        if value is True:
            parts.append(flag)
        elif isinstance(value, list):
            parts += [f"{flag}={v}" for v in value]
        else:
            parts.append(f"{flag}={value}")
    return " ".join(parts)


def _require_files(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise UsageError(f"scaa: error: no such file: {p}")


def _phantom(args) -> PhantomSpec:
    return read_spec(args.config) if getattr(args, "config", None) else PhantomSpec()


def _out(args) -> Path:
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _train_config(args, variant) -> TrainConfig:
    return TrainConfig(lr=args.lr, epochs=args.epochs, max_steps=args.max_steps, slices=args.slices,
                       variant=variant, seed=args.seed, augment=not args.no_augment,
                       checkpoint_every=getattr(args, "checkpoint_every", 0))


def load_dataset(directory: Path) -> List[VolumeSample]:
    paths = sorted(p for p in Path(directory).glob("*.json"))
    if not paths:
        raise FileNotFoundError(f"{directory}: no volume sidecars (*.json)")
    return [read_volume(p) for p in paths]


# ---------------------------------------------------------------- subcommands

def cmd_gen(args) -> int:
    out, spec, line = _out(args), _phantom(args), echo(args)
    rows = []
    for sample in make_dataset(spec, args.n, base_seed=args.seed):
        name = f"{sample.id}.json"
        write_volume(out / name, sample, spec.num_classes, meta={"command": line})
        rows.append((sample.id, name, spec.num_classes, *sample.image.shape))
    write_spec(spec, out / "phantom.ini")
    write_table(out / "dataset.csv", ("id", "file", "num_classes", "depth", "height", "width"), rows, [line])
    print(f"wrote {len(rows)} volumes to {out}")
    return 0


def cmd_train(args) -> int:
    _require_files(args.config, args.data, args.resume)
    out, line = _out(args), echo(args)
    if args.data is not None:
        dataset = load_dataset(args.data)
        num_classes = max(read_header(p)["num_classes"] for p in sorted(args.data.glob("*.json")))
    else:
        spec = _phantom(args)
        dataset, num_classes = make_dataset(spec, args.n, base_seed=args.seed), spec.num_classes
    cfg = _train_config(args, args.variant)
    start, state = 0, None
    if args.resume is not None:
        net, state, ckpt = restore(args.resume)
        start = ckpt.step
    else:
        net = ScaaNet(model_config(args.model, num_classes, args.variant), seed=args.seed)
    t0 = time.perf_counter()

    def progress(r):
        log.info("step %d  l2d %.4f  l3d %.4f  total %.4f", r.step, r.l2d, r.l3d, r.total)

    lg = train(net, dataset, cfg, out_dir=out, state=state, start_step=start, timing=args.timing,
               comments=[line], progress=progress)
    last = f"final total loss {lg.rows[-1].total:.4f}" if lg.rows else "no steps run"
    print(f"{len(lg.rows)} steps in {time.perf_counter() - t0:.1f} s; {last}; checkpoint {out / 'final.bin'}")
    return 0


def _net_from_ckpt(path) -> ScaaNet:
    return restore(path)[0]


def cmd_infer(args) -> int:
    _require_files(args.ckpt, args.volume)
    out, line = _out(args), echo(args)
    net = _net_from_ckpt(args.ckpt)
    sample = read_volume(args.volume)
    res = infer(net, sample.image, batch=args.batch)
    pred = VolumeSample(sample.image, res.labels, sample.spacing, f"{sample.id}-pred")
    write_volume(out / "pred.json", pred, net.config.num_classes, meta={"command": line})
    write_attention(out / "attention.csv", res.records, [line])
    print(f"segmented {sample.image.shape[0]} slices; wrote {out / 'pred.json'} and {out / 'attention.csv'}")
    return 0


def cmd_eval(args) -> int:
    _require_files(args.pred, args.gt)
    out, line = _out(args), echo(args)
    pred, gt = read_volume(args.pred), read_volume(args.gt)
    if pred.labels.shape != gt.labels.shape:
        raise ValueError(f"prediction {pred.labels.shape} and ground truth {gt.labels.shape} differ in shape")
    num_classes = int(read_header(args.gt)["num_classes"])
    report = evaluate(pred.labels, gt.labels, num_classes, gt.spacing)
    write_metrics(out / "metrics.csv", report, [line])
    for cls, d, h in report.rows()[1:]:
        print(f"class {cls}: DSC {d}%  HD95 {h or 'n/a'}")
    print(f"mean DSC {report.mean_dsc:.2f}%  mean HD95 {report.mean_hd95:.3f}")
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    report = grad_check(lambda s: micro_model(s, args.variant), args.tolerance, args.coords, args.seed)
    print(f"# {echo(args)}")
    for name, err, skipped, status in report.rows():
        print(f"{name:40s} {err}  {status}" + (f"  ({skipped} kinked coords replaced)" if skipped else ""))
    print(f"max relative error {report.max_error:.3e} over {len(report.errors)} tensors "
          f"(tolerance {report.tolerance:g}) in {time.perf_counter() - t0:.1f} s")
    if args.out is not None:
        write_table(_out(args) / "gradcheck.csv", ("tensor", "max_rel_error", "kinks_skipped", "status"),
                    report.rows(), [echo(args)])
    if not report.passed:
        print(f"gradient check failed for: {', '.join(report.failures)}", file=sys.stderr)
        return 2
    return 0


def cmd_memest(args) -> int:
    if (args.arch is None) == (args.config is None):
        raise UsageError("scaa memest: error: give exactly one of --arch or --config")
    _require_files(args.config)
    t0 = time.perf_counter()
    if args.config is not None:
        spec = read_arch(args.config)
        if args.batch:
            spec = spec.with_batch(args.batch)
    else:
        spec = builtin_arch(args.arch, args.num_classes, args.batch)
    rep = estimate(spec, count_upsample=not args.no_count_upsample)
    print(f"# {echo(args)}")
    print(rep.table())
    if args.arch == "scaa":
        enc, path, total = scaa_total(args.num_classes, spec.batch)
        print(f"3D encoder (batch 1) {enc.gib:.4f} GB + 2D path (batch {spec.batch}) {path.gib:.4f} GB "
              f"= {total.gib:.4f} GB")
    note = param_deviation_note(spec.name, rep.params)
    if note:
        print(note)
    print(f"estimate: {rep.gib:.2f} GB ({time.perf_counter() - t0:.3f} s)")
    if args.out is not None:
        rows = list(rep.csv_rows())
        write_table(_out(args) / "memest.csv", rows[0], rows[1:], [echo(args)])
    return 0


def cmd_attn_export(args) -> int:
    _require_files(args.ckpt, args.volume, args.config)
    out, line = _out(args), echo(args)
    net = _net_from_ckpt(args.ckpt)
    if args.volume is not None:
        sample = read_volume(args.volume)
    else:
        sample = make_dataset(_phantom(args), 1, base_seed=args.seed + TEST_SEED_OFFSET)[0]
    res = infer(net, sample.image, batch=args.batch)
    if not res.records:
        raise ValueError(f"variant {net.config.variant!r} has no attention to export")
    write_attention(out / "attention.csv", res.records, [line])
    rows = locality(res.records, net.config.downsample)
    write_table(out / "locality.csv", ("scale", "depth", "slices", "near_mass", "uniform_baseline"),
                [(r.scale, r.depth, r.slices, f"{r.mass:.6f}", f"{r.baseline:.6f}") for r in rows], [line])
    for r in rows:
        print(f"scale {r.scale}: mass on 3 nearest of {r.depth} depths {r.mass:.3f} (uniform {r.baseline:.3f})")
    print(f"wrote {len(res.records)} attention vectors to {out / 'attention.csv'}")
    return 0


def cmd_ablate(args) -> int:
    _require_files(args.config)
    out, line = _out(args), echo(args)
    spec = _phantom(args)
    train_set = make_dataset(spec, args.n, base_seed=args.seed)
    test_set = make_dataset(spec, args.n_test, base_seed=args.seed + TEST_SEED_OFFSET)
    variants = tuple(args.variant) if args.variant else VARIANTS

    def progress(variant, r):
        log.info("%s step %d total %.4f", variant, r.step, r.total)

    rows = run_ablation(train_set, test_set, lambda v: model_config(args.model, spec.num_classes, v),
                        _train_config(args, "scaa-star"), out, variants, [line], progress=progress)
    write_table(out / "ablation.csv", ABLATION_COLUMNS, [r.cells() for r in rows], [line])
    print(f"{'variant':10s} {'params':>9s} {'DSC %':>7s} {'HD95':>7s} {'one-hot':>8s} {'H>0':>6s}")
    for r in rows:
        c = r.cells()
        print(f"{c[0]:10s} {c[1]:>9d} {c[4][:7]:>7s} {c[5][:7]:>7s} {c[6][:6]:>8s} {c[7][:6]:>6s}")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "memest": cmd_memest, "attn-export": cmd_attn_export, "ablate": cmd_ablate}


def _thread_limit():
    value = os.environ.get("SCAA_THREADS")
    if value is None or value == "":
        return nullcontext()
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"scaa: error: SCAA_THREADS must be a positive integer, got {value!r}")
    return threadpool_limits(limits=n)


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        limit = _thread_limit()
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with limit:
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except Exception as exc:  # reported, not raised: the exit code carries the outcome
        log.debug("failure", exc_info=True)
        print(f"scaa {args.command}: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
