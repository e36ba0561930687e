"""Command-line interface: ``vriqa <subcommand> ...``.

Machine-readable results go to stdout as JSON; the resolved configuration and
all diagnostics go to stderr.  Exit codes: 0 success, 2 input error, 3 numeric
failure (non-finite training loss).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext

import numpy as np

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

METRICS = ("psnr", "ssim", "ms_ssim", "vifp", "s_psnr", "ws_psnr", "cpp_psnr")

log = logging.getLogger("vriqa")


class InputError(Exception):
    """Bad flags or unreadable inputs; mapped to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _default_seed() -> int:
    raw = os.environ.get("VIQA_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise InputError(f"VIQA_SEED must be an integer, got {raw!r}") from None


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _echo_config(args) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    print("config: " + json.dumps(cfg, sort_keys=True, default=str), file=sys.stderr)


# ------------------------------------------------------------------ metrics


def _parse_which(text: str) -> list[str]:
    names = [t.strip().lower().replace("-", "_") for t in text.split(",") if t.strip()]
    if "all" in names:
        return list(METRICS)
    unknown = [n for n in names if n not in METRICS]
    if unknown or not names:
        raise InputError(f"unknown metric(s) {unknown}; choose from {', '.join(METRICS)} or all")
    return [m for m in METRICS if m in names]


def cmd_metrics(args) -> int:
    from . import metrics2d, metrics_sphere
    from .image import load_image

    which = _parse_which(args.which)
    ref, dist = load_image(args.ref), load_image(args.dist)
    metrics2d.check_same_shape(ref, dist)
    cpp_dims = (args.cpp_width, args.cpp_height) if args.cpp_width and args.cpp_height else None
    scfg = metrics_sphere.SphericalMetricConfig(args.s_psnr_samples, args.interpolation, cpp_dims)
    funcs = {
        "psnr": lambda: metrics2d.psnr(ref, dist, luma=args.luma),
        "ssim": lambda: metrics2d.ssim(ref, dist),
        "ms_ssim": lambda: metrics2d.ms_ssim(ref, dist),
        "vifp": lambda: metrics2d.vifp(ref, dist),
        "s_psnr": lambda: metrics_sphere.s_psnr(ref, dist, scfg),
        "ws_psnr": lambda: metrics_sphere.ws_psnr(ref, dist),
        "cpp_psnr": lambda: metrics_sphere.cpp_psnr(ref, dist, scfg),
    }
    out, digests = {}, {}
    for name in which:
        res = funcs[name]()
        out[name] = res.json_value()
        digests[name] = res.params_digest
    out["params_digest"] = digests
    _emit(out)
    return EXIT_OK


# ------------------------------------------------------------- distortions


def cmd_distort(args) -> int:
    from .distortion import DistortionSpec, distort, quantize8
    from .image import load_image, save_image

    spec = DistortionSpec(args.kind, args.strength, args.seed)
    img = load_image(args.input)
    out = quantize8(distort(img, spec))
    save_image(out, args.out)
    _emit({"out": args.out, "kind": spec.kind, "strength": spec.strength, "seed": spec.seed})
    return EXIT_OK


def cmd_build_dataset(args) -> int:
    from .distortion import KINDS, DEFAULT_LADDERS, DistortionSpec, build_dataset, write_synthetic_refs

    if bool(args.refs) == bool(args.synthetic):
        raise InputError("give either --refs or --synthetic N")
    refs = args.refs or write_synthetic_refs(os.path.join(args.out, "refs"), args.synthetic, args.width,
                                             args.height, args.seed)
    kinds = args.kinds.split(",") if args.kinds else list(KINDS)
    specs = [DistortionSpec(k, s, args.seed) for k in kinds for s in DEFAULT_LADDERS.get(k, ())]
    if not specs:
        raise InputError(f"no distortion ladder for kinds {kinds}")
    manifest = build_dataset(refs, specs, args.out)
    with open(manifest, newline="", encoding="utf-8") as fh:
        rows = sum(1 for _ in csv.DictReader(fh))
    _emit({"manifest": manifest, "rows": rows})
    return EXIT_OK


# ------------------------------------------------------------------ training


def _train_config(args):
    from .model import EncoderConfig, ModelConfig
    from .training import TrainConfig

    model = ModelConfig(patch_size=args.patch_size, encoder=EncoderConfig(feature_dim=args.feature_dim))
    return TrainConfig(batch_size=args.batch_size, lr=args.lr, lam=args.lam, epochs=args.epochs, seed=args.seed,
                       d_steps_per_p_step=args.d_steps_per_p_step, adversarial=not args.no_critic, model=model)


def _progress(record):
    log.info("epoch %s", json.dumps(record, sort_keys=True))


def cmd_train(args) -> int:
    from .model import save_model
    from .training import load_manifest, train

    cfg = _train_config(args)
    samples = load_manifest(args.manifest)
    p, d, history = train(samples, cfg, progress=_progress)
    save_model(args.out, p, d, {"train_config": cfg.to_dict()})
    hist_path = args.history or os.path.splitext(args.out)[0] + ".history.jsonl"
    history.write(hist_path)
    _emit({"model": args.out, "history": hist_path, "epochs": len(history), "final": history.records[-1]})
    return EXIT_OK


def cmd_score(args) -> int:
    from .image import load_image
    from .model import load_model, predict_score

    p, _, _ = load_model(args.model)
    res = predict_score(p, load_image(args.image, np.float32))
    _emit({"score": res.score, "weights": res.weights.tolist(), "qualities": res.qualities.tolist()})
    return EXIT_OK


def cmd_eval(args) -> int:
    from .model import load_model
    from .stats import EvalReport, fold_result
    from .training import PatchBank, kfold_split, load_manifest, predict_bank, train_on_bank

    samples = load_manifest(args.manifest)
    mos = np.array([s.mos for s in samples])
    report = EvalReport()
    if args.kfold:
        if args.model or args.oracle:
            raise InputError("--kfold trains its own models; drop --model/--oracle")
        cfg = _train_config(args)
        bank = PatchBank(samples, cfg.model.patch_size)
        preds = np.empty(len(samples))
        for k, (tr, te) in enumerate(kfold_split(samples, args.kfold, args.seed)):
            log.info("fold %d: %d train, %d test", k, len(tr), len(te))
            p, _, _ = train_on_bank(bank, cfg, tr, None, _progress)
            preds[te] = predict_bank(p, bank, te)
            report.folds.append(fold_result(preds[te], mos[te]))
    else:
        if args.oracle == bool(args.model):
            raise InputError("give exactly one of --model or --oracle (or use --kfold)")
        if args.oracle:
            preds = mos.copy()
            report.notes["predictor"] = "oracle (stored MOS)"
        else:
            p, _, _ = load_model(args.model)
            bank = PatchBank(samples, p.patch_size, p.dtype)
            preds = predict_bank(p, bank)
        report.folds.append(fold_result(preds, mos))
    if args.pooled:
        report.pooled = fold_result(preds, mos)
    _emit(report.to_dict())
    return EXIT_OK


def cmd_saliency(args) -> int:
    from .image import load_image, save_image
    from .model import load_model, saliency_map

    p, _, _ = load_model(args.model)
    img = load_image(args.image, np.float32)
    sal = saliency_map(p, img)
    save_image(sal, args.out)
    _emit({"out": args.out, "width": sal.width, "height": sal.height})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    results = run_suite(args.seed)
    ok = all(r.passed(args.tol) for r in results)
    _emit({"tolerance": args.tol, "passed": ok, "checks": [r.to_dict() for r in results],
           "worst": max(r.max_rel_error for r in results)})
    return EXIT_OK if ok else EXIT_NUMERIC


# -------------------------------------------------------------------- parser


def _add_train_flags(p, seed_default):
    from .training import TrainConfig

    d = TrainConfig()
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--lam", type=float, default=d.lam)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--d-steps-per-p-step", type=int, default=d.d_steps_per_p_step)
    p.add_argument("--no-critic", action="store_true", help="train the predictor alone (lambda = 0, no guider)")
    p.add_argument("--patch-size", type=int, default=d.model.patch_size)
    p.add_argument("--feature-dim", type=int, default=d.model.feature_dim)


def build_parser(seed_default: int = 0) -> argparse.ArgumentParser:
    parser = _Parser(prog="vriqa", description="Quality assessment toolkit for equirectangular 360-degree images.")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS threads")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("metrics", help="full-reference metrics between two images")
    p.add_argument("--ref", required=True)
    p.add_argument("--dist", required=True)
    p.add_argument("--which", default="all", help="comma list of " + ",".join(METRICS) + " or all")
    p.add_argument("--luma", action="store_true", help="compute PSNR on BT.601 luma instead of the RGB average")
    p.add_argument("--s-psnr-samples", type=int, default=10000)
    p.add_argument("--interpolation", choices=["bilinear", "nearest"], default="bilinear")
    p.add_argument("--cpp-width", type=int, default=None)
    p.add_argument("--cpp-height", type=int, default=None)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("distort", help="apply one synthetic distortion")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["jpegish", "blur", "noise"], required=True)
    p.add_argument("--strength", type=float, required=True)
    p.add_argument("--seed", type=int, default=seed_default)
    p.set_defaults(func=cmd_distort)

    p = sub.add_parser("build-dataset", help="distort references over the default ladders and write a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--refs", nargs="+", default=None)
    p.add_argument("--synthetic", type=int, default=None, help="generate N procedural reference scenes")
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--kinds", default=None, help="comma list of distortion kinds")
    p.add_argument("--seed", type=int, default=seed_default)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="train a predictor (and guider) from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history", default=None)
    _add_train_flags(p, seed_default)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="predict the quality of one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="PLCC / SROCC / RMSE of a model, or k-fold cross-validation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--oracle", action="store_true", help="use the manifest's own MOS as predictions")
    p.add_argument("--kfold", type=int, default=None)
    p.add_argument("--pooled", action="store_true", help="also correlate all predictions at once")
    _add_train_flags(p, seed_default)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("saliency", help="guided-backprop saliency heatmap as an 8-bit PNG")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and both objectives")
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    from .distortion import DatasetBuildError
    from .image import ImageError
    from .training import ManifestError, TrainingDiverged

    try:
        seed_default = _default_seed()
    except InputError as exc:
        print(f"vriqa: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        args = build_parser(seed_default).parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_INPUT
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    _echo_config(args)
    if args.threads is not None and args.threads < 1:
        print("vriqa: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    else:
        limiter = nullcontext()
    try:
        with limiter:
            return args.func(args)
    except TrainingDiverged as exc:
        print(f"vriqa: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ImageError, ManifestError, DatasetBuildError, OSError, ValueError) as exc:
        print(f"vriqa: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
