"""``ctxseg`` command line: generate, train, eval, predict, gradcheck."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import imageio
from .errors import CtxSegError, UsageError
from .gradcheck import check_model_gradients
from .metrics import ConfusionMatrix, format_keyvalue, format_report
from .model import ModelConfig, predict_full_image
from .synthetic import write_dataset
from .model import build_model
from .train import PatchDataset, evaluate, fit, load_model, save_model

log = logging.getLogger("ctxseg")

EXIT_MISSING_FILE = 3
EXIT_GRADCHECK_FAILED = 9


def _add_common(p, *names):
    if "config" in names:
        p.add_argument("--config", help="YAML run config")
    if "seed" in names:
        p.add_argument("--seed", type=int)
    if "context" in names:
        p.add_argument("--context", choices=["on", "off"])
    if "patch-size" in names:
        p.add_argument("--patch-size", type=int)
    if "epochs" in names:
        p.add_argument("--epochs", type=int)
    if "lr" in names:
        p.add_argument("--lr", type=float)
    if "out" in names:
        p.add_argument("--out")


def _resolve(args) -> config_mod.RunConfig:
    cfg = config_mod.load(getattr(args, "config", None))
    cfg = config_mod.apply_overrides(
        cfg, seed=getattr(args, "seed", None), context=getattr(args, "context", None),
        patch_size=getattr(args, "patch_size", None), epochs=getattr(args, "epochs", None),
        lr=getattr(args, "lr", None), out=getattr(args, "out", None))
    cfg.validate()
    log.info("resolved config:\n%s", cfg.dump())
    return cfg


def cmd_generate(args) -> int:
    cfg = _resolve(args)
    root = Path(cfg.data_dir if args.out is None else args.out)
    parts = write_dataset(root, cfg.task, cfg.split)
    (root / "run_config.yaml").write_text(cfg.dump())
    for name, stems in parts.items():
        print(f"{name}: {len(stems)} images -> {root / name}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = Path(args.data) if args.data else Path(cfg.data_dir) / "train"
    items = imageio.load_dataset(data_dir)
    cfg.model.in_channels = items[0][1].shape[2]
    model = build_model(cfg.model)
    dataset = PatchDataset(items, cfg.model.patch_size, cfg.train.ignore_label)
    ckpt = Path(cfg.train.checkpoint_path) if cfg.train.checkpoint_path else out / "model.ckpt"
    log_path = Path(cfg.train.log_path) if cfg.train.log_path else out / "train_log.txt"
    (out / "run_config.yaml").write_text(cfg.dump())
    with open(log_path, "w") as fh:
        fh.write("".join(f"# {line}\n" for line in cfg.dump().splitlines()))
        fh.write("# epoch step loss\n")
        _, history = fit(model, dataset, cfg.train, log=fh)
    for h in history:
        log.info("epoch %d mean loss %.6f", h.epoch, h.mean_loss)
    save_model(ckpt, model, {"train": cfg.train.to_dict()})
    print(f"checkpoint: {ckpt}\nloss log: {log_path}\nfinal mean loss: {history[-1].mean_loss:.6f}")
    return 0


def _context_label(on: bool) -> str:
    return "w" if on else "w/o"


def cmd_eval(args) -> int:
    if not args.predictions and not args.checkpoint:
        raise UsageError("eval needs --checkpoint (once or twice) or --predictions")
    data_dir = Path(args.data)
    items = imageio.load_dataset(data_dir)
    columns = {}
    if args.predictions:
        K = args.num_classes or int(max(int(l.max()) for _, _, l in items)) + 1
        cm = ConfusionMatrix(K, args.background_class, args.ignore_label)
        pred_dir = Path(args.predictions)
        for stem, _, labels in items:
            matches = [p for p in sorted(pred_dir.glob(f"{stem}.*")) if p.suffix.lower() in imageio.IMAGE_SUFFIXES]
            if not matches:
                raise FileNotFoundError(pred_dir / f"{stem}.png")
            cm.accumulate(imageio.read_labels(matches[0]), labels)
        columns["pred"] = cm
    else:
        for path in args.checkpoint:
            model, _ = load_model(path)
            on = model.config.context_enabled if args.context is None else args.context == "on"
            label = _context_label(on)
            if label in columns:
                label = f"{label}:{Path(path).stem}"
            columns[label] = evaluate(model, items, on, args.background_class, args.ignore_label)
        if set(columns) == {"w", "w/o"}:
            columns = {"w/o": columns["w/o"], "w": columns["w"]}
    report = format_report(columns)
    print(report, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(report)
        (out / "metrics.txt").write_text(format_keyvalue(columns))
    return 0


def cmd_predict(args) -> int:
    model, _ = load_model(args.checkpoint)
    on = model.config.context_enabled if args.context is None else args.context == "on"
    image = imageio.read_image(args.image)
    if image.shape[2] != model.config.in_channels:
        raise UsageError(f"image has {image.shape[2]} channels, model expects {model.config.in_channels}")
    labels = predict_full_image(model, image, on)
    imageio.write_labels(args.out, labels)
    print(f"labels: {args.out} ({labels.shape[0]}x{labels.shape[1]}, context {'on' if on else 'off'})")
    return 0


def cmd_gradcheck(args) -> int:
    if args.config:
        cfg = config_mod.load(args.config).model
    else:
        cfg = ModelConfig(patch_size=8, in_channels=3, encoder_channels=(4, 4), encoder_strides=(2, 1),
                          num_classes=2)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    report = check_model_gradients(cfg, seed=cfg.seed)
    width = max(len(n) for n in report.per_tensor)
    for name, err in report.per_tensor.items():
        print(f"{name:<{width}}  max rel err {err:.3e}  {'PASS' if err < args.tol else 'FAIL'}")
    ok = report.passed(args.tol)
    print(f"gradcheck {'PASS' if ok else 'FAIL'}: max relative error {report.max_rel_error:.3e} (tol {args.tol:g})")
    return 0 if ok else EXIT_GRADCHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write the synthetic context task to disk")
    _add_common(p, "config", "seed", "patch-size", "out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model, write checkpoint and loss log")
    _add_common(p, "config", "seed", "context", "patch-size", "epochs", "lr", "out")
    p.add_argument("--data", help="dataset dir with images/ and labels/ (default <data_dir>/train)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics report; pass two checkpoints for w/o vs w columns")
    p.add_argument("--checkpoint", action="append")
    p.add_argument("--predictions", help="evaluate label rasters in this dir instead of a model")
    p.add_argument("--data", required=True)
    p.add_argument("--context", choices=["on", "off"])
    p.add_argument("--num-classes", type=int)
    p.add_argument("--background-class", type=int)
    p.add_argument("--ignore-label", type=int)
    p.add_argument("--out", help="directory for report.txt and metrics.txt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="label raster for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--context", choices=["on", "off"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full fused model")
    _add_common(p, "config", "seed")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except CtxSegError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
