"""Command-line entry point: ``pff {degrade,train,infer,eval,analyze}``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical abort.
Machine-readable tables go to stdout, human summaries to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, degradation as deg
from .checkpoint import load_checkpoint
from .errors import NumericalError, PFFError
from .flow import expected_flow, read_flow, write_flow
from .image import load_image, psnr, save_image
from .trainer import TrainConfig, evaluate, infer_tiled, make_pairs, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _list_images(folder) -> list[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise FileNotFoundError(f"{folder} is not a directory")
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _resolve(path: str, base: Path) -> Path:
    p = Path(path)
    if p.is_absolute() or p.exists():
        return p
    return base / p


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_degrade(args) -> int:
    spec = deg.DegradeSpec(
        task=args.task,
        seed=args.seed,
        qf=args.qf,
        max_len=args.max_len,
        kernel_size=args.kernel_size,
        gaussian_sigma=args.sigma,
        sr_factor=args.factor,
    )
    paths = _list_images(args.inp)
    if not paths:
        raise FileNotFoundError(f"no images in {args.inp}")
    out = Path(args.out)
    (out / "degraded").mkdir(parents=True, exist_ok=True)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    images = [load_image(p) for p in paths]
    pairs = make_pairs(images, spec)
    rows = ["degraded\tclean"]
    for p, (bad, clean) in zip(paths, pairs):
        name = p.stem + ".png"
        save_image(bad, out / "degraded" / name)
        save_image(clean, out / "clean" / name)
        rows.append(f"degraded/{name}\tclean/{name}")
    (out / "manifest.tsv").write_text("\n".join(rows) + "\n")
    spec.save(out / "degrade.cfg")
    print(f"wrote {len(paths)} pairs to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    cfg = TrainConfig.load(cfg_path)
    if not cfg.corpus:
        raise PFFError("config does not name a training corpus (corpus=DIR)")
    base = cfg_path.parent
    corpus = [load_image(p) for p in _list_images(_resolve(cfg.corpus, base))]
    heldout = [load_image(p) for p in _list_images(_resolve(cfg.heldout, base))] if cfg.heldout else None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.tsv")
    result = train(cfg, corpus, heldout, checkpoint_path=out, log_path=log_path, threads=args.threads)
    if result.evals:
        step, loss, p, s = result.evals[-1]
        print(f"step {step}: loss {loss}, held-out psnr {p} ssim {s}", file=sys.stderr)
    return EXIT_OK


def cmd_infer(args) -> int:
    net, _ = load_checkpoint(args.ckpt)
    img = load_image(args.inp)
    if args.iters < 1:
        raise UsageError("--iters must be >= 1")
    outputs = []
    cur, flow = img, None
    for _ in range(args.iters):
        cur, flow = infer_tiled(net, cur, args.tile, args.threads)
        outputs.append(cur)
    ref = load_image(args.ref) if args.ref else None
    prev = img
    for i, cur in enumerate(outputs, 1):
        cur_c = np.clip(cur, 0.0, 1.0)
        if ref is not None:
            line = f"iter {i}: psnr vs reference {psnr(ref, cur_c):.4f} dB"
            if i > 1:
                line += f" (delta {psnr(ref, cur_c) - psnr(ref, np.clip(prev, 0, 1)):+.4f} dB)"
        else:
            line = f"iter {i}: psnr vs previous {psnr(np.clip(prev, 0, 1), cur_c):.4f} dB"
        print(line, file=sys.stderr)
        prev = cur
    save_image(outputs[-1], args.out)
    if args.save_flow:
        if flow is None:
            raise PFFError("direct-image networks do not produce a filter flow")
        write_flow(flow, args.save_flow)
    return EXIT_OK


def cmd_eval(args) -> int:
    net, _ = load_checkpoint(args.ckpt)
    folder = Path(args.pairs)
    manifest = folder / "manifest.tsv"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest} not found")
    lines = manifest.read_text().splitlines()[1:]
    pairs, names = [], []
    for line in lines:
        if not line.strip():
            continue
        bad, clean = line.split("\t")
        pairs.append((load_image(folder / bad), load_image(folder / clean)))
        names.append(Path(bad).stem)
    report = evaluate(net, pairs, args.tile, args.threads, names)
    sys.stdout.write(report.to_tsv())
    print(
        f"mean psnr {report.mean_psnr:.4f} dB (input {report.mean_psnr_input:.4f}), "
        f"mean ssim {report.mean_ssim:.4f} (input {report.mean_ssim_input:.4f})",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_analyze(args) -> int:
    flow = read_flow(args.flow)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(analysis.colorize_flow(expected_flow(flow)), out / "expected_flow.png")
    bank = analysis.FilterBank.from_flows([flow], args.max_filters, args.seed)
    km = pca = None
    maps = []
    if args.kmeans:
        km = analysis.kmeans_filters(bank, min(args.kmeans, bank.n), args.seed)
        save_image(analysis.filter_mosaic(km.centroids, flow.k, cols=20), out / "centroids.png")
        assign = analysis.assign_nearest(flow.coeffs.reshape(-1, flow.coeffs.shape[-1]), km.centroids)
        save_image(
            analysis.colorize_assignments(assign, km.centroids, (flow.height, flow.width)),
            out / "centroid_map.png",
        )
    if args.pca:
        d = min(args.pca, flow.k * flow.k, bank.n)
        pca = analysis.pca_filters(bank, d)
        save_image(analysis.filter_mosaic(pca.components, flow.k, cols=10), out / "components.png")
        maps = analysis.loading_factor_maps(flow, pca, args.top)
        for i, m in enumerate(maps, 1):
            save_image(m.image, out / f"loading_{i:02d}.png")
    (out / "report.txt").write_text(analysis.analysis_report(pca, km, maps))
    sys.stdout.write(analysis.analysis_report(pca, km, maps))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pff", description="Predictive filter flow tools")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("degrade", help="write degraded copies of a folder of images")
    p.add_argument("--task", required=True, choices=deg.TASKS)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--qf", type=int, default=10)
    p.add_argument("--max-len", type=int, default=15)
    p.add_argument("--kernel-size", type=int, default=15)
    p.add_argument("--sigma", type=float, default=0.0, help="fixed Gaussian blur instead of random linear kernels")
    p.add_argument("--factor", type=int, default=4)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="train a predictor from a key=value config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="restore one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--save-flow")
    p.add_argument("--iters", type=int, default=1)
    p.add_argument("--tile", type=int, default=64)
    p.add_argument("--ref", help="clean reference for per-iteration PSNR")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint on a folder written by degrade")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--tile", type=int, default=64)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="cluster, PCA and visualize a saved filter flow")
    p.add_argument("--flow", required=True)
    p.add_argument("--kmeans", type=int, default=0)
    p.add_argument("--pca", type=int, default=0)
    p.add_argument("--top", type=int, default=6)
    p.add_argument("--max-filters", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    for action in sub.choices.values():
        action.add_argument("--threads", type=int, default=1)
    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        if "usage:" not in str(exc):
            print(parser.format_usage().strip(), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pff: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"pff: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PFFError, OSError, ValueError) as exc:
        print(f"pff: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run_cli())
