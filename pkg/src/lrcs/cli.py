"""Command-line entry point ``lrcs``.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.
Subcommands that take ``--config FILE`` read flat ``key = value`` lines
whose keys are the long flag names (dashes or underscores); explicit flags
win over file values.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import os
import sys

import numpy as np

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _add_train(sub):
    from .train import TrainConfig

    p = sub.add_parser("train", help="train a network on a folder of images")
    p.add_argument("--config", help="key = value file")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f.name, type=type(f.default), default=None,
                       help=f"default {f.default}")
    return p


def _add_eval(sub):
    p = sub.add_parser("eval", help="evaluate a checkpoint on a folder of images")
    p.add_argument("--config", help="key = value file")
    p.add_argument("--checkpoint", required=False)
    p.add_argument("--dir", dest="image_dir", required=False)
    p.add_argument("--ratio", type=float)
    p.add_argument("--csv", help="write per-image, per-stage metrics here")
    return p


def _add_reconstruct(sub):
    p = sub.add_parser("reconstruct", help="sample and reconstruct one image")
    p.add_argument("--config", help="key = value file")
    p.add_argument("--method", choices=("lrcsnet", "classic", "init-only"), default="lrcsnet")
    p.add_argument("--checkpoint", help="required for --method lrcsnet")
    p.add_argument("--ratio", type=float)
    p.add_argument("--seed", type=int, default=0, help="measurement matrix seed")
    p.add_argument("--lam", type=float, default=0.02)
    p.add_argument("--mu", type=float, default=0.05)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--trace", help="per-iteration CSV for --method classic ('-' = stdout)")
    p.add_argument("input")
    p.add_argument("output")
    return p


def _add_analyze(sub):
    p = sub.add_parser("analyze", help="singular-value spectra of image patches")
    p.add_argument("--dir", dest="image_dir", required=True)
    p.add_argument("--rank", type=int, default=8, help="rank for the summary statistics")
    p.add_argument("--patch-size", type=int, default=33)
    p.add_argument("--stride", type=int, default=33)
    p.add_argument("--csv", default="-", help="output CSV ('-' = stdout)")
    return p


def _add_gradcheck(sub):
    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    return p


def build_parser():
    parser = _Parser(prog="lrcs", description="Low-rank regularized compressive sensing.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    subs = {
        "train": _add_train(sub),
        "eval": _add_eval(sub),
        "reconstruct": _add_reconstruct(sub),
        "analyze": _add_analyze(sub),
        "gradcheck": _add_gradcheck(sub),
    }
    return parser, subs


def _apply_config(args, subparser, argv):
    """Fill options not given on the command line from ``--config``."""
    path = getattr(args, "config", None)
    if not path:
        return
    from .train import read_config_file

    try:
        values = read_config_file(path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    actions = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    given = {a.dest for a in subparser._actions
             for opt in a.option_strings if any(t == opt or t.startswith(opt + "=") for t in argv)}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        if dest not in actions:
            raise UsageError(f"{path}: unknown key {key!r}")
        if dest in given:
            continue
        action = actions[dest]
        try:
            value = action.type(raw) if action.type else raw
        except ValueError:
            raise UsageError(f"{path}: cannot parse {key} = {raw!r}") from None
        if action.choices and value not in action.choices:
            raise UsageError(f"{path}: {key} must be one of {list(action.choices)}")
        setattr(args, dest, value)


# ----------------------------------------------------------------- commands

def _cmd_train(args):
    from .train import TrainConfig, train

    values = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig)
              if getattr(args, f.name) is not None}
    try:
        cfg = TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    path = train(cfg)
    print(f"checkpoint={path}")
    return 0


def _cmd_eval(args):
    from .train import evaluate

    if not args.checkpoint or not args.image_dir:
        raise UsageError("eval needs --checkpoint and --dir")
    report = evaluate(args.checkpoint, args.image_dir, args.ratio)
    if args.csv:
        report.write_csv(args.csv)
    for name, p, s in zip(report.images, report.psnr, report.ssim):
        print(f"image={name} psnr_db={p:.4f} ssim={s:.4f}")
    stages = " ".join(f"stage{k}_psnr_db={v:.4f}" for k, v in enumerate(report.mean_stage_psnr))
    print(f"images={len(report.images)} mean_psnr_db={report.mean_psnr:.4f} "
          f"mean_ssim={report.mean_ssim:.4f} {stages} seconds={report.seconds:.2f}")
    return 0


def _open_out(path):
    if path == "-":
        return sys.stdout, False
    return open(path, "w", newline="", encoding="utf-8"), True


def _cmd_reconstruct(args):
    from . import classic
    from .checkpoint import load_checkpoint
    from .imaging import crop, load_gray, pad_to_block, psnr, save_pgm
    from .sensing import init_measurement
    from .tensor import Tensor
    from .train import reconstruct_image

    image = load_gray(args.input)
    if args.method == "lrcsnet":
        if not args.checkpoint:
            raise UsageError("--method lrcsnet needs --checkpoint")
        params, manifest = load_checkpoint(args.checkpoint)
        if args.ratio is not None and not math.isclose(args.ratio, manifest["ratio"]):
            raise ValueError(f"checkpoint was trained at ratio {manifest['ratio']}, "
                             f"not {args.ratio}")
        out, _ = reconstruct_image(params, image)
    else:
        ratio = 0.25 if args.ratio is None else args.ratio
        if not 0 < ratio <= 1:
            raise UsageError(f"--ratio must lie in (0, 1], got {ratio}")
        op = init_measurement(ratio, args.seed, dtype=np.float64)
        padded, dims = pad_to_block(image)
        if args.method == "init-only":
            from .sensing import init_reconstruction, sample
            x0 = init_reconstruction(op, sample(op, Tensor(padded[None])))
            out = crop(x0.data[0], dims)
        else:
            try:
                hyper = classic.SolverHyper(lam=args.lam, mu=args.mu, beta=args.beta,
                                            iterations=args.iterations, rank=args.rank)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
            y = classic.measure(op, padded)
            res = classic.solve(y, op, hyper, padded.shape, reference=padded)
            out = crop(res.x, dims)
            if args.trace:
                fh, close = _open_out(args.trace)
                try:
                    w = csv.writer(fh)
                    w.writerow(["iteration", "cost", "psnr_db"])
                    for k, (c, p) in enumerate(zip(res.costs, res.psnrs), 1):
                        w.writerow([k, repr(float(c)), repr(float(p))])
                finally:
                    if close:
                        fh.close()
    save_pgm(args.output, out)
    print(f"method={args.method} psnr_db={psnr(np.clip(out, 0, 1), image):.4f}",
          file=sys.stderr if args.trace == "-" else sys.stdout)
    return 0


def _cmd_analyze(args):
    from .imaging import (energy_ratio, extract_patches, list_images, load_gray,
                          pad_to_block, singular_spectrum)

    if not 1 <= args.rank <= args.patch_size:
        raise UsageError(f"--rank must lie in [1, {args.patch_size}]")
    paths = list_images(args.image_dir)
    if not paths:
        raise ValueError(f"no images found in {args.image_dir}")
    fh, close = _open_out(args.csv)
    ratios, energies, count = [], [], 0
    try:
        w = csv.writer(fh)
        w.writerow(["image", "patch_index", "sv_index", "value"])
        for path in paths:
            img, _ = pad_to_block(load_gray(path), args.patch_size)
            patches = extract_patches(img, args.patch_size, args.stride).patches
            name = os.path.basename(path)
            for i, patch in enumerate(patches):
                sv = singular_spectrum(patch)
                for j, v in enumerate(sv, 1):
                    w.writerow([name, i, j, repr(float(v))])
                if sv[0] > 0:
                    ratios.append(sv[args.rank - 1] / sv[0])
                energies.append(energy_ratio(sv, args.rank))
                count += 1
    finally:
        if close:
            fh.close()
    median = float(np.median(ratios)) if ratios else float("nan")
    print(f"images={len(paths)} patches={count} rank={args.rank} "
          f"median_sigma_r_over_sigma1={median:.6g} mean_energy_r={np.mean(energies):.6g}",
          file=sys.stderr if args.csv == "-" else sys.stdout)
    return 0


def _cmd_gradcheck(args):
    from .verify import TOLERANCE, gradient_suite

    worst = 0.0
    for name, err in gradient_suite(args.seed):
        status = "pass" if err < TOLERANCE else "FAIL"
        print(f"check={name} rel_error={err:.3e} status={status}")
        worst = max(worst, err)
    print(f"worst_rel_error={worst:.3e} tolerance={TOLERANCE:g}")
    return 0 if worst < TOLERANCE else RUNTIME_ERROR


COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "reconstruct": _cmd_reconstruct,
            "analyze": _cmd_analyze, "gradcheck": _cmd_gradcheck}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_ERROR
    try:
        _apply_config(args, subs[args.command], argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        subs[args.command].print_usage(sys.stderr)
        print(f"lrcs {args.command}: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except KeyboardInterrupt:
        return RUNTIME_ERROR
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"lrcs {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
