"""Command-line entry point: ``ddflow <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import codec, datasets, render
from .flow import FlowModel
from .grid import Dataset
from .likelihood import evaluate_bpd
from .train import FlowSpec, train_model
from .verify import run_all

logger = logging.getLogger("ddflow")


def _load_data(args, split="test") -> Dataset:
    return datasets.load_dataset(args.data, args.threshold, split)


def cmd_gen_toy(args):
    ds = datasets.sample_eight_gaussians(args.n, args.seed)
    datasets.save_grids(ds, args.out)
    print(f"wrote {len(ds)} eight-gaussians samples to {args.out}")


def cmd_gen_maps(args):
    ds = datasets.sample_synthetic_maps(args.n, args.seed)
    datasets.save_grids(ds, args.out)
    print(f"wrote {len(ds)} synthetic {ds.num_classes}-class maps to {args.out}")


def cmd_train(args):
    with open(args.spec) as f:
        cfg = json.load(f)
    if args.seed is not None:
        cfg["seed"] = args.seed
    spec = FlowSpec.from_dict(cfg)
    data = datasets.load_dataset(args.data, args.threshold, "train")
    valid = datasets.load_dataset(args.valid, args.threshold, "valid") if args.valid else None
    model, report = train_model(spec, data, valid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.ddfm")
    (out / "report.csv").write_text(report.to_csv())
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2))
    summary = {
        "model_hash": model.hash,
        "initial_train_bpd": report.initial_train_bpd,
        "final_train_bpd": report.final_train_bpd,
        "final_valid_bpd": report.final_valid_bpd,
        "seconds": report.seconds,
        "layers": [
            {"layer": r.layer, "kind": r.kind, "best_epoch": r.best_epoch,
             "train_bpd": r.train_bpd, "valid_bpd": r.valid_bpd}
            for r in report.layers
        ],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"train bpd {report.final_train_bpd:.9f} valid bpd {report.final_valid_bpd:.9f}")
    print(f"model {model.hash[:16]} written to {out / 'model.ddfm'}")


def cmd_eval(args):
    model = FlowModel.load(args.model)
    rep = evaluate_bpd(model, _load_data(args))
    if args.out:
        Path(args.out).write_text(rep.to_csv())
    print(f"bpd {rep.mean_bpd:.9f} over {len(rep.per_sample)} samples")


def cmd_sample(args):
    model = FlowModel.load(args.model)
    x = model.sample(args.n, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    datasets.save_grids(Dataset(x, model.num_classes, "test"), out / "samples.ddfg")
    if len(model.input_shape) == 3:
        img = render.tile_images(x, model.num_classes)
    elif model.input_shape == (2,):
        img = render.heatmap(render.histogram_2d(x, model.num_classes))
    else:
        img = render.tile_images(x.reshape(len(x), 1, 1, -1), model.num_classes)
    render.write_ppm(out / "samples.ppm", img)
    print(f"wrote {args.n} samples to {out}")


def cmd_compress(args):
    model = FlowModel.load(args.model)
    ds = _load_data(args)
    codec.stream_compress(model, ds, args.out)
    size = os.path.getsize(args.out)
    print(f"{len(ds)} items -> {size} bytes ({8 * size / max(len(ds) * ds.dim, 1):.4f} bits/dim incl. headers)")


def cmd_decompress(args):
    model = FlowModel.load(args.model)
    result = codec.stream_decompress(model, args.data, args.index)
    if args.index is not None:
        result = Dataset(result.values[None], result.num_classes, "test")
    if len(result) == 0:
        print("stream is empty; nothing written")
        return
    datasets.save_grids(result, args.out)
    print(f"decoded {len(result)} items to {args.out}")


def cmd_verify(args):
    results = run_all(args.seed)
    for r in results:
        print(r.line())
    if not all(r.passed for r in results):
        raise SystemExit(1)


def density_grid(model: FlowModel) -> np.ndarray:
    """Probability of every cell of a 2D categorical model, ``[x2, x1]`` indexed."""
    k = model.num_classes
    x1, x2 = np.meshgrid(np.arange(k), np.arange(k), indexing="xy")
    points = np.stack([x1.ravel(), x2.ravel()], axis=1)
    rep = evaluate_bpd(model, points)
    return np.exp2(-rep.per_sample * 2).reshape(k, k)


def cmd_plot_density(args):
    model = FlowModel.load(args.model)
    if model.input_shape != (2,):
        raise SystemExit(f"plot-density needs a 2D flat model, got input shape {model.input_shape}")
    p = density_grid(model)
    render.write_ppm(args.out, render.heatmap(p[::-1]))
    print(f"total probability {p.sum():.9f}; wrote {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddflow", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **flags):
        p = sub.add_parser(name)
        p.set_defaults(fn=fn)
        for flag, kw in flags.items():
            names = ["-n"] if flag == "n" else ["--" + flag.replace("_", "-")]
            p.add_argument(*names, dest=flag, **kw)
        return p

    add("gen-toy", cmd_gen_toy, n={"type": int, "default": 50_000}, seed={"type": int, "default": 0},
        out={"required": True})
    add("gen-maps", cmd_gen_maps, n={"type": int, "default": 1000}, seed={"type": int, "default": 0},
        out={"required": True})
    add("train", cmd_train, spec={"required": True}, data={"required": True}, out={"required": True},
        valid={"default": None}, seed={"type": int, "default": None}, threshold={"type": float, "default": 0.5})
    add("eval", cmd_eval, model={"required": True}, data={"required": True}, out={"default": None},
        threshold={"type": float, "default": 0.5})
    add("sample", cmd_sample, model={"required": True}, n={"type": int, "default": 100},
        seed={"type": int, "default": 0}, out={"required": True})
    add("compress", cmd_compress, model={"required": True}, data={"required": True}, out={"required": True},
        threshold={"type": float, "default": 0.5})
    add("decompress", cmd_decompress, model={"required": True}, data={"required": True}, out={"required": True},
        index={"type": int, "default": None})
    add("verify", cmd_verify, seed={"type": int, "default": 0})
    add("plot-density", cmd_plot_density, model={"required": True}, out={"required": True})
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("DDF_THREADS")
    resolved = {k: v for k, v in vars(args).items() if k != "fn"}
    resolved["threads"] = threads
    logger.info("resolved config %s", json.dumps(resolved, sort_keys=True, default=str))
    try:
        if threads is not None and not threads.isdigit():
            raise ValueError(f"DDF_THREADS must be a positive integer, got {threads!r}")
        with threadpool_limits(limits=int(threads) if threads else None):
            args.fn(args)
    except SystemExit as e:
        if isinstance(e.code, str):
            print(f"error: {e.code}", file=sys.stderr)
            return 1
        return int(e.code or 0)
    except (ValueError, OSError, IndexError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())
