"""Command line entry point: ``dldeblur <command> [options]``."""

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import imageproc as ip
from . import plotting, restore, storage
from .dict_learn import PatchPairSet, init_unsupervised, split_validation, train_supervised
from .errors import (ConvergenceError, CorruptModelError, DegenerateActiveSetError,
                     EmptyBatchError, InvalidInputError, NumericError)

log = logging.getLogger("dldeblur")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = (".png", ".pgm", ".pnm", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp")
BENCH_FIELDS = ("experiment", "model", "image", "lambda", "psnr_in", "psnr_out", "isnr",
                "runtime")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- configuration ----------------------------------------------------------

def _float_list(text):
    try:
        return tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from None


def _common(p):
    p.add_argument("--config", help="INI file with [data] and [train] sections")
    p.add_argument("--seed", type=int, help="random seed (default from config, else 0)")
    p.add_argument("--kernel", help="blur kernel: uniform:N, rational[:N], binomial, "
                                    "gaussian:SIGMA or file:PATH")
    p.add_argument("--noise-var", type=float, help="noise variance on the 0-255 scale")
    p.add_argument("--zoom-factor", type=int, help="integer zoom factor (zoom mode)")
    p.add_argument("--lambda", dest="lam", type=float, help="Lasso regularization")
    p.add_argument("--lambda-grid", type=_float_list, help="comma separated lambda values")
    p.add_argument("--patch-limit", type=int, help="maximum number of training patches")
    p.add_argument("--denoiser", help="pre-denoiser: passthrough or gaussian:SIGMA")
    p.add_argument("--stride", type=int, help="patch stride")
    p.add_argument("--output", help="output path")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="dldeblur", description="Supervised dictionary learning for "
                                                  "non-blind deblurring and digital zoom.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-data", help="build a patch dataset from a corpus")
    _common(p)
    p.add_argument("--corpus", help="directory of training images")

    p = sub.add_parser("train", help="learn a model from a patch dataset")
    _common(p)
    p.add_argument("dataset", nargs="?", help="dataset written by make-data")

    for name in ("deblur", "zoom"):
        p = sub.add_parser(name, help=f"{name} one image")
        _common(p)
        p.add_argument("model")
        p.add_argument("image")
        p.add_argument("--reference", help="ground truth image for PSNR reporting")
        p.add_argument("--no-timing", action="store_true", help="omit runtime from the report")

    p = sub.add_parser("bench", help="benchmark models on test images (CSV + figure)")
    _common(p)
    p.add_argument("models", nargs="+")
    p.add_argument("--images", nargs="+", required=True, help="test images or directories")
    p.add_argument("--no-timing", action="store_true", help="leave the runtime column empty")
    p.add_argument("--save-inputs", help="directory receiving the synthesized inputs")

    p = sub.add_parser("inspect-model", help="print model header and statistics")
    _common(p)
    p.add_argument("model")
    return parser


def resolve_config(args):
    run = storage.load_config(args.config)
    tc = run.train
    if args.seed is not None:
        tc = replace(tc, rng_seed=args.seed)
    if args.lam is not None:
        tc = replace(tc, lam=args.lam)
    run.train = tc
    for attr, val in (("kernel", args.kernel), ("noise_var", args.noise_var),
                      ("zoom_factor", args.zoom_factor), ("lambda_grid", args.lambda_grid),
                      ("patch_limit", args.patch_limit), ("denoiser", args.denoiser),
                      ("stride", args.stride)):
        if val is not None:
            setattr(run, attr, val)
    if run.kernel:
        ip.KernelSpec.parse(run.kernel)
    ip.parse_denoiser(run.denoiser)
    if run.noise_var < 0:
        raise InvalidInputError("noise variance must be >= 0")
    if run.patch_limit < 1 or run.stride < 1:
        raise InvalidInputError("patch limit and stride must be >= 1")
    if run.zoom_factor and run.zoom_factor < 2:
        raise InvalidInputError("zoom factor must be >= 2")
    return run


# -- make-data --------------------------------------------------------------

def list_images(paths):
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES))
        else:
            out.append(p)
    return out


def degrade_for(run, sharp, seed):
    """Degraded input for ``sharp`` and the region of ``sharp`` it matches."""
    if run.zoom_factor:
        up, (h, w) = ip.zoom_degrade(sharp, run.zoom_factor)
        return up, sharp[:h, :w]
    return ip.degrade(sharp, ip.make_kernel(run.kernel), run.noise_var, seed), sharp


def image_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_pairs(run, images):
    """Degrade every corpus image and draw the patch pairs.

    The global subsample to ``run.patch_limit`` is decided from the center
    counts alone, so only the kept patches are ever materialized.
    """
    seed = run.train.rng_seed
    ms, mb = run.patch_size_sharp, run.patch_size_blurry
    loaded = []
    for i, path in enumerate(images):
        try:
            sharp = ip.read_image(path)
        except InvalidInputError as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        if min(sharp.shape) < mb + (run.zoom_factor or 0):
            log.warning("skipping %s: smaller than the %dx%d patch", path, mb, mb)
            continue
        loaded.append((i, path, sharp))
    f = run.zoom_factor or 1
    counts = [len(ip.patch_centers((img.shape[0] // f * f, img.shape[1] // f * f), mb,
                                   run.stride)) for _, _, img in loaded]
    total = sum(counts)
    if total == 0:
        raise InvalidInputError("no usable patches in the corpus")
    keep = np.arange(total)
    if total > run.patch_limit:
        keep = np.sort(np.random.default_rng(seed).choice(total, run.patch_limit, replace=False))
    bounds = np.concatenate([[0], np.cumsum(counts)])
    s = ip.INTENSITY_SCALE
    parts = []
    for (i, path, sharp), lo, hi in zip(loaded, bounds[:-1], bounds[1:]):
        sel = keep[(keep >= lo) & (keep < hi)] - lo
        if sel.size == 0:
            continue
        blurry, sharp = degrade_for(run, sharp, image_seed(seed, i))
        denoised = ip.denoise(blurry, run.denoiser)
        centers = ip.patch_centers(blurry.shape, mb, run.stride)[sel]
        parts.append(PatchPairSet(
            ip.extract_patches(blurry / s, mb, centers).astype(np.float32),
            ip.extract_patches(denoised / s, mb, centers).astype(np.float32),
            ip.extract_patches(sharp / s, ms, centers).astype(np.float32)))
        log.info("%s: %d of %d patches", path, sel.size, hi - lo)
    return PatchPairSet.concatenate(parts)


def cmd_make_data(args, run):
    if args.corpus:
        run.corpus = args.corpus
    out = Path(args.output or run.dataset)
    images = list_images([run.corpus])
    if not images:
        raise InvalidInputError(f"no images found in {run.corpus}")
    data = make_pairs(run, images)
    storage.write_dataset(out, data)
    out.with_suffix(".ini").write_text(storage.dump_config(run))
    print(f"wrote {data.n} patch pairs to {out}")


# -- train ------------------------------------------------------------------

def _write_log(path, records):
    keys = ["lambda", "stage", "step", "rho_t", "batch_objective", "validation_objective",
            "skipped", "support_mismatches"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, keys, restval="", extrasaction="ignore")
        w.writeheader()
        for r in records:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def cmd_train(args, run):
    data = storage.read_dataset(args.dataset or run.dataset)
    out = Path(args.output or run.model)
    grid = run.lambda_grid or (run.train.lam,)
    train, val = split_validation(data, run.train)
    if val is None:
        raise InvalidInputError(f"dataset of {data.n} pairs is too small to hold out validation")
    best = None
    all_records = []
    grid_rows = []
    for lam in grid:
        cfg = replace(run.train, lam=lam)
        t = time.perf_counter()
        D = init_unsupervised(train.blurry, cfg.k, lam, cfg)
        res = train_supervised(train, D, cfg, validation=val)
        for r in res.log:
            all_records.append({"lambda": lam, **r})
        grid_rows.append((lam, res.stage1_objective, res.final_objective))
        log.info("lambda %g: stage i %.6g, final %.6g (%.1fs)", lam, res.stage1_objective,
                 res.final_objective, time.perf_counter() - t)
        if best is None or res.final_objective < best[1].final_objective:
            best = (lam, res)
    lam, res = best
    meta = run.metadata()
    meta["provenance"] = {"seed": run.train.rng_seed, "n": int(data.n),
                          "passes": run.train.passes, "rho": res.rho,
                          "dict_rate": res.dict_rate, "lambda_grid": list(grid)}
    storage.save_model(out, res.model, meta)
    _write_log(out.with_suffix(".log.csv"), all_records)
    plotting.training_curve([r for r in all_records if r["lambda"] == lam],
                            out.with_suffix(".curve.png"))
    for g, s1, fin in grid_rows:
        mark = " *" if g == lam else ""
        print(f"lambda={g:g} stage_i={s1:.6g} final={fin:.6g}{mark}")
    print(f"wrote model to {out}")


# -- deblur / zoom ----------------------------------------------------------

def _check_mode(header, mode, run, args):
    if header.get("mode") != mode:
        log.warning("model was trained for %s, running %s", header.get("mode"), mode)
        print(f"warning: model was trained for {header.get('mode')}, running {mode}",
              file=sys.stderr)
    if mode == "zoom" and args.zoom_factor and header.get("zoom_factor") not in (None,
                                                                                args.zoom_factor):
        print(f"warning: model was trained for zoom x{header.get('zoom_factor')}, "
              f"running x{args.zoom_factor}", file=sys.stderr)
    if mode == "deblur":
        for key, val in (("kernel", args.kernel), ("noise_var", args.noise_var)):
            if val is not None and key in header and header[key] != val:
                print(f"warning: model {key} is {header[key]!r}, flag says {val!r}",
                      file=sys.stderr)


def restore_observed(model, observed, mode, factor, denoiser, stride):
    """Run deblur or zoom on an observed image.

    Returns ``(baseline, restored)`` where ``baseline`` is the input on the
    output grid (the image itself, or its bicubic upsampling for zoom).
    """
    if mode == "zoom":
        baseline = ip.upsample_bicubic(observed, factor)
    else:
        baseline = observed
    return baseline, restore.deblur(model, baseline, denoiser, stride)


def _restore_one(args, run, mode):
    if not args.output:
        raise UsageError("--output is required")
    model, header = storage.load_model(args.model)
    _check_mode(header, mode, run, args)
    denoiser = args.denoiser or header.get("denoiser", "passthrough")
    factor = args.zoom_factor or header.get("zoom_factor") or 2
    img = ip.read_image(args.image)
    ref = ip.read_image(args.reference) if args.reference else None
    start = time.perf_counter()
    baseline, out = restore_observed(model, img, mode, factor, denoiser, run.stride)
    runtime = None if args.no_timing else time.perf_counter() - start
    lines = f"runtime: {runtime:.3f}\n" if runtime is not None else ""
    if ref is not None:
        if ref.shape != out.shape:
            raise InvalidInputError(f"reference {ref.shape} does not match output {out.shape}")
        lines = restore.evaluate(ref, baseline, out, runtime=runtime).to_text()
    ip.write_image(args.output, out)
    Path(args.output).with_suffix(".txt").write_text(lines)
    sys.stdout.write(lines)


def cmd_deblur(args, run):
    _restore_one(args, run, "deblur")


def cmd_zoom(args, run):
    _restore_one(args, run, "zoom")


# -- bench ------------------------------------------------------------------

def experiment_label(kernel, noise_var):
    for name, (spec, var) in ip.EXPERIMENTS.items():
        if str(spec) == str(ip.KernelSpec.parse(kernel)) and var == noise_var:
            return name
    return f"{kernel}/{noise_var:g}"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return restore.format_db(v) if math.isinf(v) else f"{v:.6f}"
    return str(v)


def observe(sharp, mode, factor, kernel, noise, seed):
    """Synthesize the 8-bit observation of ``sharp`` and the matching ground truth.

    The observation is quantized exactly as if written to and read back
    from an image file, so the deblur and zoom commands reproduce bench
    numbers from saved inputs.
    """
    if mode == "zoom":
        h, w = (sharp.shape[0] // factor) * factor, (sharp.shape[1] // factor) * factor
        sharp = sharp[:h, :w]
        low = ip.downsample_antialias(sharp, factor)
        return sharp, ip.quantize(low).astype(np.float64)
    blurry = ip.degrade(sharp, ip.make_kernel(kernel), noise, seed)
    return sharp, ip.quantize(blurry).astype(np.float64)


def bench_rows(model, header, run, images, timing=True, overrides=None, save_inputs=None):
    """Benchmark one model against every image, with its linear ablation.

    Degradation settings come from ``overrides`` (command line flags), then
    the model header, then ``run``.
    """
    o = overrides or {}
    factor = o.get("zoom_factor") or header.get("zoom_factor") or run.zoom_factor or 2
    zoom = bool(o.get("zoom_factor")) or header.get("mode") == "zoom"
    kernel = o.get("kernel") or header.get("kernel") or run.kernel
    noise = o.get("noise_var")
    if noise is None:
        noise = header.get("noise_var", run.noise_var)
    denoiser = o.get("denoiser") or header.get("denoiser") or run.denoiser
    mode = "zoom" if zoom else "deblur"
    label = f"zoom-x{factor}" if zoom else experiment_label(kernel, noise)
    rows = []
    for idx, path in enumerate(images):
        sharp, observed = observe(ip.read_image(path), mode, factor, kernel, noise,
                                  image_seed(run.train.rng_seed, idx))
        if save_inputs:
            ip.write_image(Path(save_inputs) / f"{label}_{Path(path).stem}.png", observed)
        for name, m in (("linear+dictionary", model), ("linear", model.linear_only())):
            start = time.perf_counter()
            baseline, out = restore_observed(m, observed, mode, factor, denoiser, run.stride)
            runtime = time.perf_counter() - start if timing else None
            rep = restore.evaluate(sharp, baseline, out, runtime=runtime)
            rows.append({"experiment": label, "model": name, "image": Path(path).stem,
                         "lambda": model.lam, "psnr_in": rep.psnr_input,
                         "psnr_out": rep.psnr_output, "isnr": rep.isnr, "runtime": runtime})
    return rows


def write_bench_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(BENCH_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in BENCH_FIELDS])


def cmd_bench(args, run):
    out = Path(args.output or "bench.csv")
    images = list_images(args.images)
    if not images:
        raise InvalidInputError("no test images")
    loaded = [storage.load_model(p) for p in args.models]
    overrides = {"kernel": args.kernel, "noise_var": args.noise_var,
                 "zoom_factor": args.zoom_factor, "denoiser": args.denoiser}
    rows = []
    for model, header in loaded:
        rows.extend(bench_rows(model, header, run, images, timing=not args.no_timing,
                               overrides=overrides, save_inputs=args.save_inputs))
    write_bench_csv(out, rows)
    plotting.bench_chart(rows, out.with_suffix(".png"))
    for r in rows:
        print(f"{r['experiment']:>10} {r['model']:>18} {r['image']:>12} "
              f"isnr={restore.format_db(r['isnr'])}")
    print(f"wrote {out}")


# -- inspect-model ----------------------------------------------------------

def cmd_inspect_model(args, run):
    model, header = storage.load_model(args.model)
    print(json.dumps(header, indent=2, sort_keys=True))
    norms = np.linalg.norm(model.dict_blurry, axis=0)
    A = model.dict_blurry
    print(f"W: {model.linear_predictor.shape}  Db: {A.shape}  Ds: {model.dict_sharp.shape}")
    print(f"Db column norms: min {norms.min():.6f} max {norms.max():.6f}")
    print(f"Ds Frobenius norm: {np.linalg.norm(model.dict_sharp):.6g}")
    if args.output:
        plotting.dictionary_atoms(model.dict_blurry, args.output)
        print(f"wrote atom tiles to {args.output}")


COMMANDS = {
    "make-data": cmd_make_data,
    "train": cmd_train,
    "deblur": cmd_deblur,
    "zoom": cmd_zoom,
    "bench": cmd_bench,
    "inspect-model": cmd_inspect_model,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"dldeblur: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = resolve_config(args)
        COMMANDS[args.command](args, run)
    except UsageError as exc:
        print(f"dldeblur: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, ConvergenceError, DegenerateActiveSetError, FloatingPointError) as exc:
        print(f"dldeblur: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidInputError, CorruptModelError, EmptyBatchError, OSError) as exc:
        print(f"dldeblur: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
