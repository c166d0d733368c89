"""Command line interface: ``ecall <subcommand>``.

Settings resolve as command-line flag > ``--config`` JSON file > built-in
desk-scale default. Exit codes: 0 success, 2 invalid configuration, 3 data
error, 4 numerical failure.
"""

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import scipy.fft

from ecall import config as cfgmod
from ecall.datagen import KERNEL_PRESETS, DatasetSplits, generate_dataset
from ecall.errors import ConfigInvalid, DataError, EcallError
from ecall.io import file_sha256, read_image, read_tensor, write_image, write_tensor
from ecall.kernel import closed_form_estimate, mean_spectrum_diagnostics, phase1_estimate
from ecall.metrics import kernel_score, psnr, ssim
from ecall.reconstruct import (
    SpectralFilter,
    apply,
    train_three_phase,
)
from ecall.stats import bundle_of

log = logging.getLogger("ecall")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _finite(obj):
    # JSON has no infinity; identical-image PSNR is reported as the string "inf"
    if isinstance(obj, float) and not np.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def write_json(path, data):
    Path(path).write_text(json.dumps(_finite(data), indent=2, sort_keys=True,
                                     default=_json_default) + "\n")


def resolve_config(args, overrides):
    """Built-in defaults, then the config file, then explicitly given flags."""
    cfg = cfgmod.EcallConfig()
    if getattr(args, "config", None):
        cfg = cfgmod.load_config(args.config, cfg)
    given = {k: v for k, v in overrides.items() if v is not None}
    return cfgmod.from_dict(given, cfg) if given else cfg


def _kernel_std(args):
    if getattr(args, "kernel_std", None) is not None:
        return args.kernel_std
    if getattr(args, "kernel", None) is not None:
        return KERNEL_PRESETS[args.kernel]
    return None


def _threads(args):
    n = getattr(args, "threads", None)
    if n is None:
        n = int(os.environ.get("ECALL_THREADS", "1"))
    if n < 1:
        raise ConfigInvalid(f"threads must be >= 1, got {n}")
    return n


class RunManifest:
    """Records every artifact written by a command with its content hash."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.entries = {}

    def add(self, path):
        path = Path(path)
        self.entries[str(path.relative_to(self.directory))] = file_sha256(path)

    def write(self, name="artifacts.json"):
        write_json(self.directory / name, {"artifacts": self.entries})


# -- subcommands -------------------------------------------------------------

def cmd_generate(args):
    cfg = resolve_config(args, {
        "n": args.n, "n_test": args.n_test, "image_size": args.image_size,
        "kernel_std": _kernel_std(args), "kernel_size": args.kernel_size,
        "noise_frac": args.noise, "seed": args.seed, "channels": args.channels,
    })
    return generate(cfg, args.out)


def generate(cfg, out):
    splits = generate_dataset(cfg.n, cfg.image_size, cfg.kernel_std, cfg.kernel_size,
                              cfg.noise_frac, cfg.seed, cfg.n_test, cfg.channels)
    manifest = splits.save(out)
    log.info("wrote %d+%d+%d training images and %d test pairs to %s",
             manifest["n"], manifest["n"], manifest["n"], manifest["n_test"], out)
    return splits


def _report_kernel(k, dataset):
    if dataset.kernel is None or not dataset.kernel.size:
        return {}
    s = kernel_score(k, dataset.kernel)
    return {"l2err": s.l2err, "mnc": s.mnc}


def cmd_estimate_kernel(args):
    overrides = {"kernel_size": args.kernel_size, "seed": args.seed,
                 "mask_frac": args.mask_frac, "closed_form_eps": args.eps}
    phase1 = {"iters": args.iters, "lr_kernel": args.lr}
    weights = {"lambda_a1": args.lambda_a1, "lambda_c1": args.lambda_c1}
    weights = {k: v for k, v in weights.items() if v is not None}
    if weights:
        phase1["weights"] = weights
    phase1 = {k: v for k, v in phase1.items() if v is not None}
    if phase1:
        overrides["phase1"] = phase1
    cfg = resolve_config(args, overrides)
    dataset = DatasetSplits.load(args.dataset)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report = {"mode": args.mode, "config": cfg.to_dict()}
    if args.mode == "closed-form":
        xb = bundle_of(dataset.originals)
        k = closed_form_estimate(bundle_of(dataset.observations), xb,
                                 cfg.closed_form_eps, cfg.kernel_size)
        report["mean_spectrum"] = mean_spectrum_diagnostics(xb)
    else:
        history = []
        k = phase1_estimate(dataset, cfg, np.random.default_rng(cfg.seed), history=history)
        report["iterations"] = len(history)
        report["final_loss"] = history[-1]["total"] if history else None
    report["kernel_metrics"] = _report_kernel(k, dataset)
    write_tensor(out, k)
    write_json(out.with_suffix(".json"), report)
    return k


def _phases(text):
    try:
        phases = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise ConfigInvalid(f"bad --phases value {text!r}") from None
    if not phases or any(p not in (1, 2, 3) for p in phases):
        raise ConfigInvalid(f"phases must be drawn from 1,2,3, got {text!r}")
    return phases


def write_curves(path, curves):
    keys = sorted({k for curve in curves.values() for row in curve for k in row})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "iteration", *keys])
        for phase, curve in curves.items():
            for i, row in enumerate(curve):
                writer.writerow([phase, i, *[repr(row[k]) if k in row else "" for k in keys]])


def cmd_train(args):
    cfg = resolve_config(args, {"seed": args.seed})
    return train(cfg, args.dataset, args.out_dir, _phases(args.phases))


def train(cfg, dataset_dir, out_dir, phases=(1, 2, 3)):
    dataset = DatasetSplits.load(dataset_dir)
    if dataset.image_shape[-1] < cfg.kernel_size:
        raise ConfigInvalid("kernel_size exceeds the dataset image size")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k, f, report = train_three_phase(dataset, cfg, np.random.default_rng(cfg.seed), phases)
    manifest = RunManifest(out)
    write_tensor(out / "kernel.bin", k)
    write_tensor(out / "filter.bin", f.gains)
    write_curves(out / "loss_curves.csv", report.curves)
    summary = {
        "config": report.config,
        "phases": list(phases),
        "iterations": {p: len(c) for p, c in report.curves.items()},
        "final_losses": {p: c[-1] for p, c in report.curves.items() if c},
        "kernel_metrics": report.kernel_metrics,
        "image_metrics": report.image_metrics,
        "dataset": Path(dataset_dir).name,
    }
    write_json(out / "report.json", summary)
    # wall-clock lives apart from report.json so reports compare byte for byte
    write_json(out / "timings.json", report.wall_clock)
    for name in ("kernel.bin", "filter.bin", "loss_curves.csv", "report.json"):
        manifest.add(out / name)
    manifest.write()
    return summary


def cmd_reconstruct(args):
    f = SpectralFilter(read_tensor(args.filter))
    img = read_image(args.input)
    write_image(args.output, apply(f, img))


def cmd_evaluate(args):
    dataset = None
    if args.dataset or args.test_manifest:
        dataset = DatasetSplits.load(args.dataset or Path(args.test_manifest).parent)
    report = {}
    if args.kernel:
        k = read_tensor(args.kernel)
        if args.true:
            k_true = read_tensor(args.true)
        elif dataset is not None:
            k_true = dataset.kernel
        else:
            raise ConfigInvalid("--kernel needs --true or --dataset")
        s = kernel_score(k, k_true)
        report["kernel_metrics"] = {"l2err": s.l2err, "mnc": s.mnc}
    rows = []
    if args.filter or args.recon_dir:
        if dataset is None:
            raise ConfigInvalid("image metrics need --dataset or --test-manifest")
        recon = _reconstructions(args, dataset)
        for i, (x, y, r) in enumerate(zip(dataset.test_originals, dataset.test_observations, recon)):
            rows.append({"index": i, "psnr_reconstruction": psnr(r, x), "ssim_reconstruction": ssim(r, x),
                         "psnr_observation": psnr(y, x), "ssim_observation": ssim(y, x)})
        report["image_metrics"] = {
            key: float(np.mean([row[key] for row in rows]))
            for key in ("psnr_reconstruction", "ssim_reconstruction",
                        "psnr_observation", "ssim_observation")
        }
        report["image_metrics"].update(count=len(rows), peak=1.0,
                                       ssim_window="gaussian 11x11 sigma=1.5, K1=0.01, K2=0.03")
    if args.csv and rows:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(_finite(rows))
    if args.out:
        write_json(args.out, report)
    print(json.dumps(_finite(report), indent=2, sort_keys=True))
    return report


def _reconstructions(args, dataset):
    if args.filter:
        f = SpectralFilter(read_tensor(args.filter))
        return [apply(f, y) for y in dataset.test_observations]
    files = sorted(p for p in Path(args.recon_dir).iterdir()
                   if p.suffix in (".bin", ".pgm", ".ppm"))
    if len(files) != len(dataset.test_originals):
        raise DataError(f"{len(files)} reconstructions for {len(dataset.test_originals)} test images")
    return [read_image(p) for p in files]


def cmd_pipeline(args):
    cfg = resolve_config(args, {
        "n": args.n, "n_test": args.n_test, "image_size": args.image_size,
        "kernel_std": _kernel_std(args), "kernel_size": args.kernel_size,
        "noise_frac": args.noise, "seed": args.seed,
    })
    return pipeline(cfg, args.out_dir, _phases(args.phases))


def pipeline(cfg, out_dir, phases=(1, 2, 3)):
    out = Path(out_dir)
    generate(cfg, out / "data")
    summary = train(cfg, out / "data", out / "run", phases)
    report = {
        "l2err": summary["kernel_metrics"].get("l2err"),
        "mnc": summary["kernel_metrics"].get("mnc"),
        **summary["image_metrics"],
        "config": cfg.to_dict(),
    }
    write_json(out / "report.json", report)
    manifest = RunManifest(out)
    for path in sorted(out.rglob("*")):
        if path.is_file() and path.name not in ("artifacts.json", "timings.json"):
            manifest.add(path)
    manifest.write()
    return report


# -- argument parsing ----------------------------------------------------------

def _dataset_flags(p, with_channels=True):
    p.add_argument("--n", type=int, help="images per training collection")
    p.add_argument("--n-test", type=int, help="number of paired test images")
    p.add_argument("--image-size", type=int)
    p.add_argument("--kernel", choices=sorted(KERNEL_PRESETS), help="Gaussian preset")
    p.add_argument("--kernel-std", type=float, help="overrides --kernel")
    p.add_argument("--kernel-size", type=int)
    p.add_argument("--noise", type=float, help="noise std as a fraction of the image max")
    p.add_argument("--seed", type=int)
    if with_channels:
        p.add_argument("--channels", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="ecall", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, help="FFT worker threads (env ECALL_THREADS)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize an unpaired dataset")
    _dataset_flags(p)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("estimate-kernel", help="estimate the blur kernel only")
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=["closed-form", "phase1"], default="phase1")
    p.add_argument("--kernel-size", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-a1", type=float)
    p.add_argument("--lambda-c1", type=float)
    p.add_argument("--mask-frac", type=float)
    p.add_argument("--eps", type=float, help="closed-form regularizer")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_estimate_kernel)

    p = sub.add_parser("train", help="three-phase kernel and filter training")
    p.add_argument("--dataset", required=True)
    p.add_argument("--phases", default="1,2,3")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="apply a learned filter to one image")
    p.add_argument("--filter", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="kernel and image metrics")
    p.add_argument("--kernel")
    p.add_argument("--true")
    p.add_argument("--filter")
    p.add_argument("--recon-dir")
    p.add_argument("--dataset")
    p.add_argument("--test-manifest")
    p.add_argument("--csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="generate, train and evaluate in one go")
    _dataset_flags(p, with_channels=False)
    p.add_argument("--phases", default="1,2,3")
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with scipy.fft.set_workers(_threads(args)):
            args.func(args)
    except EcallError as exc:
        print(f"ecall: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError) as exc:
        print(f"ecall: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
