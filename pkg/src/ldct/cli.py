"""Command-line interface: simulate / train / denoise / eval / inspect.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every subcommand validates its inputs before any output file is written.
``LDCT_THREADS`` caps per-file worker parallelism; 1 (the default) is the
strict deterministic mode.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import Tensor
from .container import ContainerError
from .metrics import WINDOW_PRESETS, eval_dataset, write_report_csv
from .network import (arch_table, build_arch, count_trainable, count_weights,
                      forward, receptive_field)
from .perceptual import InputAdapter, LossConfig, load_weights
from .pgm import read_slice, write_slice
from .physics import (MU_WATER_DEFAULT, ClampWarning, default_angles,
                      simulate_low_dose)
from .training import (PIXEL_PEAK, TrainConfig, TrainingDiverged,
                       build_patchset, load_checkpoint, normalize,
                       split_dataset, train)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class ConfigError(ValueError):
    """Invalid configuration or unusable inputs; maps to exit code 2."""


def _n_workers() -> int:
    raw = os.environ.get("LDCT_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"LDCT_THREADS must be an integer, got {raw!r}")
    return max(1, value)


def _map_files(fn, items: list):
    workers = _n_workers()
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _slice_files(directory: Path) -> list[Path]:
    return sorted(directory.glob("*.pgm"))


def cmd_simulate(args) -> int:
    in_dir = Path(args.input)
    out_dir = Path(args.output)
    if not in_dir.is_dir():
        raise ConfigError(f"input directory {in_dir} does not exist")
    files = _slice_files(in_dir)
    if not files:
        raise ConfigError(f"no .pgm slices found in {in_dir}")
    if args.i0 <= 0:
        raise ConfigError(f"--i0 must be positive, got {args.i0}")
    if args.angles < 1:
        raise ConfigError(f"--angles must be >= 1, got {args.angles}")
    angles = default_angles(args.angles)
    out_dir.mkdir(parents=True, exist_ok=True)

    failures = []

    def one(item):
        index, path = item
        import warnings

        try:
            img = read_slice(path)
        except Exception as exc:
            print(f"skipping unreadable slice {path.name}: {exc}", file=sys.stderr)
            failures.append(path.name)
            return
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ClampWarning)
            low = simulate_low_dose(
                img, i0=args.i0, seed=np.random.default_rng([args.seed, index]),
                angles=angles, mu_water=args.mu_water, literal_eq=args.hu_literal)
        notes = [str(w.message) for w in caught if issubclass(w.category, ClampWarning)]
        write_slice(out_dir / path.name, low, extra={
            "simulation": {
                "i0": args.i0, "seed": args.seed, "slice_index": index,
                "n_angles": args.angles, "mu_water": args.mu_water,
                "hu_literal": bool(args.hu_literal), "source": path.name,
                "warnings": notes,
            }})

    _map_files(one, list(enumerate(files)))
    if failures:
        print(f"{len(failures)} slices failed", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"simulated {len(files)} slices -> {out_dir}")
    return EXIT_OK


_CONFIG_SCHEMA = {
    "data": {"low_dir": str, "normal_dir": str},
    "train": {"patch": int, "stride": int, "epochs": list, "lrs": list,
              "batch": int, "seed": int, "n_filters": int},
    "loss": {"lambda_mse": (int, float), "lambda_p": (int, float),
             "extractor_weights": (str, type(None)), "adapter": str},
    "out_dir": str,
}


def _check_keys(doc: dict, schema: dict, where: str) -> None:
    unknown = set(doc) - set(schema)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    for key, want in schema.items():
        if key not in doc:
            continue
        if isinstance(want, dict):
            if not isinstance(doc[key], dict):
                raise ConfigError(f"{where}.{key} must be an object")
            _check_keys(doc[key], want, f"{where}.{key}")
        elif not isinstance(doc[key], want):
            raise ConfigError(f"{where}.{key} has the wrong type")


def _load_run_config(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError(f"config {p} must be a JSON object")
    _check_keys(doc, _CONFIG_SCHEMA, "config")
    for key in ("data", "out_dir"):
        if key not in doc:
            raise ConfigError(f"config is missing required key {key!r}")
    for key in ("low_dir", "normal_dir"):
        if key not in doc["data"]:
            raise ConfigError(f"config.data is missing required key {key!r}")
    return doc


def cmd_train(args) -> int:
    doc = _load_run_config(args.config)
    tr = doc.get("train", {})
    lo = doc.get("loss", {})

    lambda_mse = float(lo.get("lambda_mse", 1.0))
    lambda_p = float(lo.get("lambda_p", 0.01))
    if args.loss == "m":
        lambda_p = 0.0
        if lambda_mse <= 0:
            lambda_mse = 1.0
    elif args.loss == "p":
        lambda_mse = 0.0
        if lambda_p <= 0:
            raise ConfigError("--loss p needs a positive lambda_p")
    else:
        if lambda_mse <= 0 or lambda_p <= 0:
            raise ConfigError("--loss mp needs positive lambda_mse and lambda_p")

    store = None
    if lambda_p > 0:
        weights_path = lo.get("extractor_weights")
        if not weights_path:
            raise ConfigError(
                "perceptual loss requested but config.loss.extractor_weights is not set "
                "(export pretrained feature-extractor weights to the container format first)")
        if not Path(weights_path).is_file():
            raise ConfigError(f"extractor weights not found: {weights_path}")
        store = load_weights(weights_path)

    epochs = tuple(tr.get("epochs", (20, 20)))
    lrs = tuple(tr.get("lrs", (1e-3, 1e-4)))
    if len(epochs) != 2 or len(lrs) != 2:
        raise ConfigError("train.epochs and train.lrs must have exactly two stages")
    cfg = TrainConfig(
        variant=args.arch, n_filters=int(tr.get("n_filters", 64)),
        patch=int(tr.get("patch", 40)), stride=int(tr.get("stride", 20)),
        epochs=(int(epochs[0]), int(epochs[1])), lrs=(float(lrs[0]), float(lrs[1])),
        batch=int(tr.get("batch", 64)), seed=int(tr.get("seed", 0)),
        loss=LossConfig(lambda_mse=lambda_mse, lambda_p=lambda_p,
                        adapter=InputAdapter.named(lo.get("adapter", "identity"))))

    low_dir = Path(doc["data"]["low_dir"])
    normal_dir = Path(doc["data"]["normal_dir"])
    for d in (low_dir, normal_dir):
        if not d.is_dir():
            raise ConfigError(f"data directory {d} does not exist")
    low_files = _slice_files(low_dir)
    names = [p.name for p in low_files]
    missing = [n for n in names if not (normal_dir / n).exists()]
    if not names:
        raise ConfigError(f"no .pgm slices found in {low_dir}")
    if missing:
        raise ConfigError(f"normal-dose dir is missing counterparts: {', '.join(missing[:5])}")
    if args.resume is not None and not Path(args.resume).is_file():
        raise ConfigError(f"resume checkpoint {args.resume} does not exist")

    train_names, _test_names = split_dataset(names)
    pairs = []
    for name in train_names:
        lo_img = normalize(read_slice(low_dir / name))
        nd_img = normalize(read_slice(normal_dir / name))
        pairs.append((lo_img.data[0, 0], nd_img.data[0, 0]))
    data = build_patchset(pairs, patch=cfg.patch, stride=cfg.stride)

    out_dir = Path(doc["out_dir"])
    try:
        ckpt, rows = train(cfg, data, out_dir, store=store, resume=args.resume)
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"trained {ckpt.epoch} epochs on {len(data)} patches from "
          f"{len(train_names)} slices; final checkpoint {out_dir / 'final.ldws'}")
    return EXIT_OK


def cmd_denoise(args) -> int:
    model_path = Path(args.model)
    in_dir = Path(args.input)
    out_dir = Path(args.output)
    if not model_path.is_file():
        raise ConfigError(f"model checkpoint {model_path} does not exist")
    if not in_dir.is_dir():
        raise ConfigError(f"input directory {in_dir} does not exist")
    files = _slice_files(in_dir)
    if not files:
        raise ConfigError(f"no .pgm slices found in {in_dir}")
    if args.window != "none" and args.window not in WINDOW_PRESETS:
        raise ConfigError(f"unknown window {args.window!r}")
    ckpt = load_checkpoint(model_path)
    arch = build_arch(ckpt.config.variant, ckpt.config.n_filters)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(path: Path):
        img = read_slice(path)
        x = normalize(img)
        pred = forward(arch, ckpt.params, Tensor(x.data), mode="infer")
        grid = np.clip(pred.data[0, 0].astype(np.float64), 0.0, None) * PIXEL_PEAK
        out = img.with_grid(grid, unit="pixel")
        write_slice(out_dir / path.name, out, extra={"denoised_by": str(model_path)})
        if args.window != "none":
            from .metrics import apply_window
            from .physics import pixels_to_hu

            preview = apply_window(pixels_to_hu(out), WINDOW_PRESETS[args.window])
            from PIL import Image

            Image.fromarray(preview, mode="L").save(
                out_dir / (path.stem + f"_{args.window}.png"))

    _map_files(one, files)
    print(f"denoised {len(files)} slices -> {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    for d in (args.pred, args.ref) + ((args.low,) if args.low else ()):
        if not Path(d).is_dir():
            raise ConfigError(f"directory {d} does not exist")
    report = eval_dataset(args.pred, args.ref, args.low)
    if not report.rows and not report.missing:
        raise ConfigError("no .pgm files to evaluate")
    write_report_csv(args.out, report)
    mean = report.mean_row()
    print(f"evaluated {len(report.rows)} images -> {args.out}")
    if mean["psnr_pred"] is not None:
        psnr_txt = "identical" if np.isinf(mean["psnr_pred"]) else f"{mean['psnr_pred']:.2f} dB"
        print(f"mean psnr_pred: {psnr_txt}  mean ssim_pred: {mean['ssim_pred']:.4f}")
    if report.missing:
        print("missing counterparts: " + ", ".join(report.missing), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_inspect(args) -> int:
    arch = build_arch(args.arch, args.n_filters)
    print(arch_table(arch))
    print(f"receptive field: {receptive_field(arch)}")
    print(f"trainable parameters: {count_trainable(arch)}")
    closed = count_weights(3, args.n_filters, 1, len(arch.layers))
    print(f"uniform 3x3 closed-form weight count (n={args.n_filters}, c=1, "
          f"N={len(arch.layers)}): {closed}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ldct",
                                 description="Low-dose CT simulation and denoising toolkit")
    ap.add_argument("--version", action="version", version=f"ldct {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="simulate low-dose slices from normal-dose PGMs")
    sim.add_argument("--input", required=True, help="directory of 16-bit PGM slices")
    sim.add_argument("--output", required=True)
    sim.add_argument("--i0", type=float, default=2e3, help="incident photons per detector bin")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--angles", type=int, default=720)
    sim.add_argument("--mu-water", type=float, default=MU_WATER_DEFAULT)
    sim.add_argument("--hu-literal", action="store_true",
                     help="divide by the rescale slope instead of multiplying")
    sim.set_defaults(fn=cmd_simulate)

    tr = sub.add_parser("train", help="train a denoising network")
    tr.add_argument("--config", required=True, help="JSON run configuration")
    tr.add_argument("--arch", choices=("drl", "drl-e"), default="drl-e")
    tr.add_argument("--loss", choices=("m", "p", "mp"), default="m")
    tr.add_argument("--resume", default=None, help="checkpoint to continue from")
    tr.set_defaults(fn=cmd_train)

    dn = sub.add_parser("denoise", help="denoise slices with a trained checkpoint")
    dn.add_argument("--model", required=True)
    dn.add_argument("--input", required=True)
    dn.add_argument("--output", required=True)
    dn.add_argument("--window", choices=("abdomen", "lung", "none"), default="none",
                    help="also write an 8-bit windowed PNG preview")
    dn.set_defaults(fn=cmd_denoise)

    ev = sub.add_parser("eval", help="PSNR/SSIM report against references")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--ref", required=True)
    ev.add_argument("--low", default=None, help="optional raw low-dose baseline dir")
    ev.add_argument("--out", default="report.csv")
    ev.set_defaults(fn=cmd_eval)

    ins = sub.add_parser("inspect", help="print the architecture table")
    ins.add_argument("--arch", choices=("drl", "drl-e"), default="drl-e")
    ins.add_argument("--n-filters", type=int, default=64)
    ins.set_defaults(fn=cmd_inspect)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.fn(args)
    except (ConfigError, ContainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
