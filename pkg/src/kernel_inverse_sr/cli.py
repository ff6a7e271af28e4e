"""Command line front end: ``kisr <subcommand> [options]``.

Subcommands: gen-gallery, train, degrade, sr, eval, ablate. Every option can
also come from a ``key = value`` config file passed with ``--config``; flags on
the command line override file values.
"""

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import gallery as gal
from . import lcnn, metrics, pipeline, training
from .errors import (
    ConfigError,
    DivergenceError,
    FormatError,
    NumericError,
    ParameterError,
    SRError,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_NUMERIC = 5
EXIT_PARTIAL = 6

# fixed component indices for splitting the root seed
SEED_COMPONENTS = ("gallery", "init", "shuffle", "eval", "heldout")

log = logging.getLogger("kernel_inverse_sr")


class UsageError(SRError):
    pass


def derive_seed(root, component):
    """Deterministic 32-bit seed for one component of a run."""
    idx = SEED_COMPONENTS.index(component)
    return int(np.random.SeedSequence([int(root), idx]).generate_state(1)[0])


@dataclass
class CliConfig:
    """Resolved options of one invocation plus the seed split."""

    command: str
    options: dict = field(default_factory=dict)
    seed: int = 0

    def seed_for(self, component):
        return derive_seed(self.seed, component)

    def validate_inputs(self, *keys):
        # referenced inputs are checked before any work starts
        for k in keys:
            p = self.options.get(k)
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(f"--{k.replace('_', '-')}: {p} does not exist")


# -- config file ---------------------------------------------------------------

def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("_", "-")] = value
    return out


def _config_argv(sub, values, path):
    # turn file entries into flags placed ahead of the real ones, so argparse's
    # last-wins rule lets the command line override them
    argv = []
    for key, value in values.items():
        flag = f"--{key}"
        action = sub._option_string_actions.get(flag)
        if action is None or flag in ("--config", "--help"):
            raise UsageError(f"{path}: unknown option {key!r} for this subcommand")
        if action.nargs == 0:
            if value.lower() in ("1", "true", "yes", "on"):
                argv.append(flag)
            elif value.lower() not in ("0", "false", "no", "off"):
                raise UsageError(f"{path}: {key} expects true or false")
        else:
            argv += [flag, value]
    return argv


# -- argument types --------------------------------------------------------------

def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    return vals


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


# -- helpers -------------------------------------------------------------------

def _summary_stats(g):
    if not g.kernels:
        return {"count": 0}
    p = np.array([[k.params.sigma1, k.params.sigma2, k.params.theta] for k in g.kernels])
    return {
        "count": len(g.kernels),
        "size": g.config.kernel_size,
        "sigma1_mean": float(p[:, 0].mean()),
        "sigma2_mean": float(p[:, 1].mean()),
        "theta_mean": float(p[:, 2].mean()),
        "seed": g.seed,
    }


def _train_config(args, seed):
    return training.TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        step_size=args.step_size,
        gamma=args.gamma,
        adam_beta1=args.beta1,
        adam_beta2=args.beta2,
        adam_epsilon=args.eps,
        lambda1=args.lambda1,
        lambda2=args.lambda2,
        batch_size=args.batch_size,
        rng_seed=seed,
        checkpoint_every=args.checkpoint_every,
    )


def _load_images(folder):
    folder = Path(folder)
    paths = sorted(folder.glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG images in {folder}")
    return {p.stem: pipeline.read_png(p) for p in paths}


def _eval_pair(sr, hr, lr, s, crop, name, quantize=False):
    # one SR record and one bicubic record for an image; when the SR image was
    # read back from an 8-bit file the baseline is quantized the same way
    bic = pipeline.bicubic_baseline(lr, s)
    if quantize:
        bic = pipeline.to_uint8(bic) / 255.0
    return [
        metrics.report(sr, hr, crop).as_record(image=name, scale=s, method="sr"),
        metrics.report(bic, hr, crop).as_record(image=name, scale=s, method="bicubic"),
    ]


def _print_summary(records, out=None):
    out = out or sys.stdout
    rows = metrics.summarize(records)
    by = {(r["method"], r["scale"]): r for r in rows}
    print("scale\tmethod\tn\tpsnr\tssim\tssim_gain", file=out)
    for (method, s), r in sorted(by.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        base = by.get(("bicubic", s))
        gain = r["ssim"] - base["ssim"] if base else float("nan")
        print(f"x{s}\t{method}\t{r['n']}\t{r['psnr']:.3f}\t{r['ssim']:.4f}\t{gain:+.4f}", file=out)
    return rows


# -- subcommands ---------------------------------------------------------------

def cmd_gen_gallery(args, cfg):
    if args.sigma_min > args.sigma_max:
        raise UsageError(f"--sigma-min {args.sigma_min} exceeds --sigma-max {args.sigma_max}")
    if args.count == 0:
        log.warning("--count 0 writes an empty gallery")
    config = gal.GalleryConfig(count=args.count, kernel_size=args.size,
                               sigma_min=args.sigma_min, sigma_max=args.sigma_max)
    g = gal.generate_gallery(config, cfg.seed_for("gallery"))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    gal.save_gallery(g, args.out)
    print(json.dumps(_summary_stats(g), sort_keys=True))
    return EXIT_OK


def cmd_train(args, cfg):
    cfg.validate_inputs("gallery")
    if args.gallery is not None:
        g = gal.load_gallery(args.gallery)
    else:
        count = gal.GalleryConfig().count if args.gallery_size is None else args.gallery_size
        g = gal.generate_gallery(gal.GalleryConfig(count=count), cfg.seed_for("gallery"))
    if args.gallery_size is not None and args.gallery is not None:
        if args.gallery_size > len(g.kernels):
            raise UsageError(f"--gallery-size {args.gallery_size} exceeds the "
                             f"{len(g.kernels)} kernels in {args.gallery}")
        g = gal.KernelGallery(g.kernels[:args.gallery_size], g.seed,
                              replace(g.config, count=args.gallery_size))
    tcfg = _train_config(args, cfg.seed_for("shuffle"))
    out = Path(args.out)
    if args.resume and training.latest_checkpoint(out) is not None:
        model, hist = training.resume(out, g, tcfg)
    else:
        model, hist = training.train(lcnn.init_model(cfg.seed_for("init")), g, tcfg, run_dir=out)
    h = lcnn.effective_kernel(model)
    final = hist.epochs[-1] if hist.epochs else hist.initial
    print(json.dumps({
        "epochs": len(hist),
        "initial_total": hist.initial["total"],
        "final_total": final["total"],
        "effective_kernel_sum": float(h.sum()),
        "checkpoint": str(out / "model.ckpt"),
    }, sort_keys=True))
    return EXIT_OK


def cmd_degrade(args, cfg):
    cfg.validate_inputs("hr_dir")
    hr = _load_images(args.hr_dir) if args.hr_dir else pipeline.bundled_hr_images()
    s = args.scale
    if args.kernels == "unseen":
        spec = pipeline.KernelSpec.unseen(s, noise=0.25 if args.noise is None else args.noise)
    else:
        spec = replace(pipeline.KernelSpec.in_distribution(s), noise=args.noise or 0.0)
    triples = pipeline.synth_eval_set(hr, spec, s, cfg.seed_for("eval"))
    out = Path(args.out)
    for sub in ("hr", "lr", "kernels"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for t in triples:
        pipeline.write_png(out / "hr" / f"{t.name}.png", t.hr)
        pipeline.write_png(out / "lr" / f"{t.name}.png", t.lr)
        np.save(out / "kernels" / f"{t.name}.npy", t.kernel.grid)
        records.append({"name": t.name, "hr": f"hr/{t.name}.png", "lr": f"lr/{t.name}.png",
                        "kernel": f"kernels/{t.name}.npy", "scale": s})
    pipeline.write_manifest(out / "manifest.jsonl", records)
    print(json.dumps({"images": len(records), "scale": s, "kernel_size": spec.size,
                      "manifest": str(out / "manifest.jsonl")}))
    return EXIT_OK


def _lr_inputs(args):
    """``[(name, lr_image, scale_or_None)]`` from a manifest or a folder."""
    if args.manifest:
        recs = pipeline.read_manifest(args.manifest)
        for r in recs:
            if not Path(r["lr"]).exists():
                raise FileNotFoundError(f"manifest references missing file {r['lr']}")
        return [(r["name"], pipeline.read_png(r["lr"]), r["scale"]) for r in recs]
    return [(name, img, None) for name, img in _load_images(args.lr_dir).items()]


def cmd_sr(args, cfg):
    if not args.manifest and not args.lr_dir:
        raise UsageError("one of --manifest or --lr-dir is required")
    cfg.validate_inputs("checkpoint", "manifest", "lr_dir")
    if not args.scale:
        raise UsageError("--scale needs at least one factor")
    model = lcnn.load_model(args.checkpoint)
    inputs = _lr_inputs(args)
    out = Path(args.out)
    for s in args.scale:
        for name, _, ms in inputs:
            if ms is not None and ms != s:
                raise UsageError(f"manifest entry {name} has scale {ms}, --scale asks for {s}")
        dest = out if len(args.scale) == 1 else out / f"x{s}"
        dest.mkdir(parents=True, exist_ok=True)
        for name, lr, _ in inputs:
            sr = pipeline.super_resolve(model, lr, s, collapse=args.collapse)
            pipeline.write_png(dest / f"{name}.png", sr)
        print(json.dumps({"scale": s, "images": len(inputs), "out": str(dest),
                          "parameters": lcnn.param_count(model)}))
    return EXIT_OK


def cmd_eval(args, cfg):
    cfg.validate_inputs("manifest", "sr_dir")
    recs = pipeline.read_manifest(args.manifest)
    records = []
    for r in recs:
        s = r["scale"]
        if args.scale is not None and args.scale != s:
            raise UsageError(f"manifest entry {r['name']} has scale {s}, --scale is {args.scale}")
        sr_path = Path(args.sr_dir) / f"{r['name']}.png"
        for p in (r["hr"], r["lr"], sr_path):
            if not Path(p).exists():
                raise FileNotFoundError(f"missing image {p}")
        hr, lr, sr = pipeline.read_png(r["hr"]), pipeline.read_png(r["lr"]), pipeline.read_png(sr_path)
        if sr.shape != hr.shape:
            raise FormatError(f"{sr_path} has shape {sr.shape}, HR image has {hr.shape}")
        crop = s if args.crop is None else args.crop
        records += _eval_pair(sr, hr, lr, s, crop, r["name"], quantize=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        metrics.write_records(args.out, records)
    _print_summary(records)
    return EXIT_OK


def _leg_sr_gain(model, s, seed, images):
    spec = pipeline.KernelSpec.in_distribution(s)
    records = []
    for t in pipeline.synth_eval_set(images, spec, s, seed):
        sr = pipeline.super_resolve(model, t.lr, s, collapse=True)
        records += _eval_pair(sr, t.hr, t.lr, s, s, t.name)
    rows = {r["method"]: r for r in metrics.summarize(records)}
    return {"kernel_size": spec.size, "sr_ssim": rows["sr"]["ssim"],
            "bicubic_ssim": rows["bicubic"]["ssim"],
            "ssim_gain": rows["sr"]["ssim"] - rows["bicubic"]["ssim"],
            "sr_psnr": rows["sr"]["psnr"], "bicubic_psnr": rows["bicubic"]["psnr"]}


LOSS_VARIANTS = {
    "identity": (0.0, 0.0),
    "area": (0.8, 0.0),
    "center": (0.0, 0.2),
    "full": (0.8, 0.2),
}


def cmd_ablate(args, cfg):
    legs = []
    if args.sweep == "gallery-size":
        if not args.sizes:
            raise UsageError("--sizes is empty; nothing to sweep")
        legs = [(f"size{n:05d}", {"gallery_size": n}) for n in args.sizes]
    elif args.sweep == "scale":
        if not args.scales:
            raise UsageError("--scales is empty; nothing to sweep")
        if not args.checkpoint:
            raise UsageError("the scale sweep needs --checkpoint")
        cfg.validate_inputs("checkpoint")
        legs = [(f"x{s}", {"scale": s}) for s in args.scales]
    else:
        if not args.variants:
            raise UsageError("--variants is empty; nothing to sweep")
        unknown = [v for v in args.variants if v not in LOSS_VARIANTS]
        if unknown:
            raise UsageError(f"unknown loss variants {unknown}; choose from {sorted(LOSS_VARIANTS)}")
        legs = [(v, {"variant": v}) for v in args.variants]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = pipeline.bundled_hr_images()
    heldout = None
    results = []
    for name, leg in legs:
        leg_dir = out / name
        done = leg_dir / "result.json"
        if done.exists():
            # finished in an earlier invocation
            results.append(json.loads(done.read_text()))
            continue
        try:
            if "scale" in leg:
                model = lcnn.load_model(args.checkpoint)
                res = _leg_sr_gain(model, leg["scale"], cfg.seed_for("eval"), images)
            else:
                l1, l2 = LOSS_VARIANTS[leg.get("variant", "full")]
                count = leg.get("gallery_size", args.gallery_size)
                g = gal.generate_gallery(gal.GalleryConfig(count=count), cfg.seed_for("gallery"))
                tcfg = training.TrainConfig(
                    epochs=args.epochs, learning_rate=args.lr, step_size=args.step_size,
                    lambda1=l1, lambda2=l2, rng_seed=cfg.seed_for("shuffle"))
                if training.latest_checkpoint(leg_dir) is not None:
                    model, _ = training.resume(leg_dir, g, tcfg)
                else:
                    model, _ = training.train(lcnn.init_model(cfg.seed_for("init")), g, tcfg,
                                              run_dir=leg_dir)
                if heldout is None:
                    heldout = gal.generate_gallery(gal.GalleryConfig(count=args.heldout),
                                                   cfg.seed_for("heldout")).grids()
                ev = training.evaluate(model, heldout)
                res = {"heldout_total": ev.total,
                       "heldout_identity_residual": ev.identity_residual,
                       "effective_kernel_sum": float(lcnn.effective_kernel(model).sum())}
                res.update(_leg_sr_gain(model, 2, cfg.seed_for("eval"), images))
            res.update(leg, leg=name, status="ok")
            leg_dir.mkdir(parents=True, exist_ok=True)
            done.write_text(json.dumps(res, sort_keys=True))
        except (SRError, ArithmeticError, OSError) as exc:
            log.error("leg %s failed: %s", name, exc)
            res = dict(leg, leg=name, status="failed", error=str(exc))
        results.append(res)

    with open(out / "report.jsonl", "w") as fh:
        for r in results:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    cols = [c for c in ("leg", "status", "heldout_total", "kernel_size", "bicubic_ssim",
                        "sr_ssim", "ssim_gain") if any(c in r for r in results)]
    print("\t".join(cols))
    for r in results:
        print("\t".join(_fmt(r.get(c, "")) for c in cols))
    return EXIT_PARTIAL if any(r["status"] != "ok" for r in results) else EXIT_OK


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}" if math.isfinite(v) else str(v)
    return str(v)


# -- parser --------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="key = value file; command-line flags override it")
    p.add_argument("--seed", type=int, default=0, help="root seed, split per component")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _train_flags(p, full=True):
    d = training.TrainConfig()
    p.add_argument("--epochs", type=_nonneg_int, default=d.epochs, help="training epochs")
    p.add_argument("--lr", type=float, default=d.learning_rate, help="initial learning rate")
    p.add_argument("--step-size", type=_pos_int, default=d.step_size,
                   help="epochs between learning-rate decays")
    if not full:
        return
    p.add_argument("--gamma", type=float, default=d.gamma, help="learning-rate decay factor")
    p.add_argument("--beta1", type=float, default=d.adam_beta1, help="Adam beta1")
    p.add_argument("--beta2", type=float, default=d.adam_beta2, help="Adam beta2")
    p.add_argument("--eps", type=float, default=d.adam_epsilon, help="Adam epsilon")
    p.add_argument("--lambda1", type=float, default=d.lambda1, help="weight of the area term")
    p.add_argument("--lambda2", type=float, default=d.lambda2, help="weight of the center term")
    p.add_argument("--batch-size", type=_pos_int, default=d.batch_size, help="kernels per step")
    p.add_argument("--checkpoint-every", type=_pos_int, default=d.checkpoint_every,
                   help="epochs between checkpoints")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="kisr", formatter_class=fmt,
        description="Learn an inverse degradation kernel from random Gaussian kernels "
                    "and use it for image super-resolution.",
        epilog="exit codes: 0 ok, 2 usage, 3 I/O, 4 file format, 5 numeric divergence, "
               "6 sweep finished with failed legs",
    )
    subs = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    gd = gal.GalleryConfig()

    p = subs.add_parser("gen-gallery", help="sample a random kernel gallery", formatter_class=fmt)
    p.add_argument("--out", required=True, help="gallery file to write")
    p.add_argument("--count", type=_nonneg_int, default=gd.count, help="number of kernels")
    p.add_argument("--size", type=_pos_int, default=gd.kernel_size, help="kernel side length (odd)")
    p.add_argument("--sigma-min", type=float, default=gd.sigma_min, help="smallest sigma")
    p.add_argument("--sigma-max", type=float, default=gd.sigma_max, help="largest sigma")
    _common(p)
    p.set_defaults(func=cmd_gen_gallery)

    p = subs.add_parser("train", help="train the linear network on a gallery", formatter_class=fmt)
    p.add_argument("--gallery", help="gallery file; generated from the seed when omitted")
    p.add_argument("--gallery-size", type=_nonneg_int, default=None,
                   help="use the first N kernels of --gallery, or generate N kernels "
                        f"(default {gd.count} when generating)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", action="store_true", help="continue from the newest checkpoint")
    _train_flags(p)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("degrade", help="blur and subsample HR images", formatter_class=fmt)
    p.add_argument("--hr-dir", help="folder of HR PNGs; bundled images when omitted")
    p.add_argument("--out", required=True, help="output folder (hr/, lr/, kernels/, manifest)")
    p.add_argument("--scale", type=_pos_int, default=2, help="scale factor")
    p.add_argument("--kernels", choices=("in-distribution", "unseen"), default="in-distribution",
                   help="kernel family; sizes 31/41/51 are used automatically at x8/x16/x32")
    p.add_argument("--noise", type=float, default=None,
                   help="multiplicative kernel noise half-width (0 for in-distribution "
                        "kernels, 0.25 for unseen ones when omitted)")
    _common(p)
    p.set_defaults(func=cmd_degrade)

    p = subs.add_parser("sr", help="super-resolve LR images with one checkpoint",
                        formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--manifest", help="manifest written by degrade")
    p.add_argument("--lr-dir", help="folder of LR PNGs (alternative to --manifest)")
    p.add_argument("--scale", type=_int_list, required=True, help="scale factor(s), e.g. 2,3,4")
    p.add_argument("--out", required=True, help="output folder")
    p.add_argument("--collapse", action="store_true",
                   help="convolve with the collapsed effective kernel instead of the network")
    _common(p)
    p.set_defaults(func=cmd_sr)

    p = subs.add_parser("eval", help="score SR output and the bicubic baseline",
                        formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="manifest written by degrade")
    p.add_argument("--sr-dir", required=True, help="folder of SR PNGs named like the manifest")
    p.add_argument("--scale", type=_pos_int, default=None,
                   help="expected scale; must match the manifest")
    p.add_argument("--crop", type=_nonneg_int, default=None,
                   help="border pixels ignored by the metrics (default: the scale factor)")
    p.add_argument("--out", help="metric records file (one JSON object per line)")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("ablate", help="run a sweep and print a comparison table",
                        formatter_class=fmt)
    p.add_argument("--sweep", choices=("gallery-size", "scale", "loss"), required=True,
                   help="what to vary")
    p.add_argument("--out", required=True, help="sweep folder; finished legs are reused")
    p.add_argument("--sizes", type=_int_list, default=[800, 1600, 2400, 3200, 4000, 4800],
                   help="gallery sizes for the gallery-size sweep")
    p.add_argument("--scales", type=_int_list, default=[8, 16, 32],
                   help="scale factors for the scale sweep")
    p.add_argument("--variants", type=lambda t: [v for v in t.split(",") if v],
                   default=list(LOSS_VARIANTS), help="loss variants for the loss sweep")
    p.add_argument("--checkpoint", help="trained model for the scale sweep")
    p.add_argument("--gallery-size", type=_pos_int, default=gd.count,
                   help="gallery size for the loss sweep")
    p.add_argument("--heldout", type=_pos_int, default=800,
                   help="held-out kernels scoring each trained leg")
    _train_flags(p, full=False)
    _common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        try:
            values = read_config_file(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        file_argv = _config_argv(sub, values, args.config)
        args = parser.parse_args([args.command] + file_argv + list(argv[1:]))
    return args


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"kisr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    cfg = CliConfig(args.command, vars(args), args.seed)
    try:
        return args.func(args, cfg)
    except (UsageError, ConfigError, ParameterError) as exc:
        print(f"kisr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"kisr: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (DivergenceError, NumericError, ArithmeticError) as exc:
        print(f"kisr: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"kisr: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
