"""Command-line entry point: ``semfuse <command> [options]``.

Settings come from built-in defaults, then an optional JSON ``--config``
file, then ``--key value`` flags; later sources win. Exit codes: 0 success,
2 usage or input error, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .errors import FusionError, NonFiniteLoss
from .imagedata import (
    ColorSpace,
    Split,
    load_image,
    manifest_load,
    manifest_validate,
    save_image,
    write_phantom_set,
)
from .losses import LossWeights
from .metrics import default_lexicon, evaluate, load_lexicon, report_stats
from .textsem import make_backend
from .trainer import TrainConfig, fuse, load_checkpoint, save_checkpoint, train, write_trace

log = logging.getLogger("semfuse")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
CHECKPOINT_NAME = "model.ckpt"
TRACE_NAME = "trace.csv"

# key -> (default, type, help). Training and loss defaults follow TrainConfig / LossWeights.
_TRAIN = TrainConfig()
_W = LossWeights()
SETTINGS = {
    "learning_rate": (_TRAIN.learning_rate, float, "Adam learning rate"),
    "epochs": (_TRAIN.epochs, int, "passes over the training manifest"),
    "batch_size": (_TRAIN.batch_size, int, "pairs per optimizer step"),
    "seed": (_TRAIN.seed, int, "seed for weights and data order"),
    "alpha": (_W.alpha, float, "semantic loss weight"),
    "beta": (_W.beta, float, "gradient loss weight"),
    "gamma": (_W.gamma, float, "reconstruction loss weight"),
    "theta": (_W.theta, float, "cosine threshold of the semantic loss"),
    "omega": (_W.omega, float, "SSIM weight inside the reconstruction loss"),
    "stages": (_TRAIN.stages, int, "number of SFM stages (1-4)"),
    "channels": (_TRAIN.channels, int, "latent channels"),
    "head_dim": (_TRAIN.head_dim, int, "attention head width"),
    "image_size": (list(_TRAIN.image_size), int, "training image size H W"),
    "upsample": (_TRAIN.upsample, bool, "x2 pixel-shuffle in the encoders"),
    "max_steps": (_TRAIN.max_steps, int, "stop after this many steps (none = all epochs)"),
    "clip_grad_norm": (_TRAIN.clip_grad_norm, float, "gradient-norm clip (none = off)"),
    "manifest": (None, str, "dataset manifest JSON"),
    "out_dir": (None, str, "output directory"),
    "checkpoint": (None, str, "checkpoint file"),
    "lexicon": (None, str, "keyword lexicon file (one term per line)"),
    "backend": ("stub", str, "text encoder backend: stub or external"),
    "backend_endpoint": (None, str, "HTTP endpoint of the external text encoder"),
    "backend_projection_seed": (0, int, "seed of the external embedding projection"),
    "backend_timeout": (10.0, float, "external backend timeout in seconds"),
    "log_every": (0, int, "log the loss every N steps (0 = off)"),
}


class InputError(Exception):
    pass


def _flag(key):
    return "--" + key.replace("_", "-")


def _parse_bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _add_settings(parser):
    group = parser.add_argument_group("settings (defaults shown; a --config file and these flags override)")
    group.add_argument("--config", help="JSON file with any of the settings below")
    for key, (default, typ, text) in SETTINGS.items():
        kw = dict(dest=key, default=argparse.SUPPRESS, help=f"{text} (default: {default})")
        if key == "image_size":
            kw.update(nargs=2, type=int, metavar=("H", "W"))
        elif typ is bool:
            kw.update(type=_parse_bool, metavar="BOOL")
        else:
            kw.update(type=typ)
        group.add_argument(_flag(key), **kw)


def _coerce(key, value):
    default, typ, _ = SETTINGS[key]
    if value is None:
        return None
    if key == "image_size":
        if not (isinstance(value, (list, tuple)) and len(value) == 2):
            raise InputError("image_size must be a list of two integers")
        return [int(v) for v in value]
    if typ is bool:
        if not isinstance(value, bool):
            raise InputError(f"{key} must be true or false")
        return value
    try:
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad value for {key}: {value!r}") from exc


def resolve_settings(args) -> dict:
    """Defaults, then the config file, then command-line flags."""
    cfg = {k: v[0] for k, v in SETTINGS.items()}
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        path = Path(cfg_path)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        if not isinstance(doc, dict):
            raise InputError(f"{path}: expected a JSON object")
        unknown = sorted(set(doc) - set(SETTINGS))
        if unknown:
            raise InputError(f"{path}: unknown setting(s): {', '.join(unknown)}")
        for k, v in doc.items():
            cfg[k] = _coerce(k, v)
    for k in SETTINGS:
        if k in vars(args):
            cfg[k] = _coerce(k, getattr(args, k))
    return cfg


def train_config(cfg) -> TrainConfig:
    weights = LossWeights(**{f.name: cfg[f.name] for f in fields(LossWeights)})
    keys = ("learning_rate", "epochs", "batch_size", "seed", "stages", "channels", "head_dim",
            "image_size", "upsample", "max_steps", "clip_grad_norm")
    return TrainConfig(weights=weights, **{k: cfg[k] for k in keys})


def backend_from(cfg):
    if cfg["backend"] == "stub":
        return make_backend({"kind": "stub"})
    spec = {"kind": cfg["backend"], "projection_seed": cfg["backend_projection_seed"],
            "timeout": cfg["backend_timeout"]}
    if cfg["backend_endpoint"] is not None:
        spec["endpoint"] = cfg["backend_endpoint"]
    return make_backend(spec)


def _require(cfg, key):
    if cfg[key] is None:
        raise InputError(f"{_flag(key)} is required")
    return cfg[key]


def _write_csv(rows, out):
    if out is None:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerows(rows)
        return
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


# --------------------------------------------------------------------------
# Commands


def cmd_phantom_gen(args, cfg):
    out = Path(_require(cfg, "out_dir"))
    try:
        manifest = write_phantom_set(out, args.count, seed=cfg["seed"], size=tuple(cfg["image_size"]),
                                     split=Split(args.split))
    except OSError as exc:
        raise InputError(f"cannot write to {out}: {exc}") from exc
    print(f"wrote {len(manifest)} pair(s) and manifest.json to {out}")


def cmd_train(args, cfg):
    manifest_path = Path(_require(cfg, "manifest"))
    if not manifest_path.is_file():
        raise InputError(f"manifest not found: {manifest_path}")
    out = Path(_require(cfg, "out_dir"))
    manifest = manifest_load(manifest_path)
    problems = manifest_validate(manifest)
    if problems:
        raise InputError("invalid manifest:\n  " + "\n  ".join(problems))
    tc = train_config(cfg)
    model = None
    ckpt = out / CHECKPOINT_NAME
    if args.resume:
        if not ckpt.is_file():
            raise InputError(f"no checkpoint found in {out}")
        model = load_checkpoint(ckpt)
        if model.config != tc.model_config():
            raise InputError("checkpoint architecture differs from the requested settings")
    result = train(manifest, tc, backend_from(cfg), model=model, log_every=cfg["log_every"])
    save_checkpoint(result.model, ckpt, seed=tc.seed)
    write_trace(result.trace, out / TRACE_NAME)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    last = result.trace[-1]["total"] if result.trace else float("nan")
    print(f"trained {len(result.trace)} step(s); final total loss {last:.6f}; checkpoint {ckpt}")


def cmd_fuse(args, cfg):
    ckpt = Path(_require(cfg, "checkpoint"))
    if not ckpt.is_file():
        raise InputError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    img1 = load_image(args.img1, ColorSpace.GRAY)
    img2 = load_image(args.img2, None)
    fused = fuse(img1, img2, (args.text1, args.text2), model, backend_from(cfg))
    save_image(fused, args.out)
    print(f"wrote {args.out}")


def cmd_eval(args, cfg):
    manifest = manifest_load(_require(cfg, "manifest"))
    fused_dir = Path(args.fused_dir)
    rows = [["id", "sf", "ag", "sd", "qabf", "ms_ssim"]]
    for e in manifest.entries:
        src1 = load_image(manifest.resolve(e.image1_path), None)
        src2 = load_image(manifest.resolve(e.image2_path), None)
        fused = load_image(fused_dir / f"{e.id}.png", None)
        rows.append(evaluate(src1, src2, fused, image_id=e.id, ag_form=args.ag_form).row())
    _write_csv(rows, args.out)


def _read_reports(path):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"report file not found: {path}")
    reports = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        rid, sep, text = line.partition("\t")
        reports.append((rid, text) if sep else (f"r{n}", line))
    return reports


def cmd_report_stats(args, cfg):
    lexicon = load_lexicon(cfg["lexicon"]) if cfg["lexicon"] else default_lexicon()
    rows = [["id", "word_length", "entropy", "keywords"]]
    for rid, text in _read_reports(args.text_file):
        rows.append(report_stats(text, lexicon, normalize=not args.raw).row(rid))
    _write_csv(rows, args.out)


def cmd_config_dump(args, cfg):
    print(json.dumps(cfg, indent=2, sort_keys=True))


def build_parser():
    parser = argparse.ArgumentParser(prog="semfuse", description="Text-guided medical image fusion.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="write synthetic MRI/PET phantom pairs and a manifest")
    p.add_argument("--count", type=int, required=True, help="number of pairs")
    p.add_argument("--split", default="TRAIN", choices=[s.value for s in Split], help="manifest split")
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("train", help="train on a manifest; writes model.ckpt, trace.csv, config.json")
    p.add_argument("--resume", action="store_true", help="start from <out-dir>/model.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="fuse one registered pair with a checkpoint")
    p.add_argument("--img1", required=True, help="structural (grayscale) image")
    p.add_argument("--img2", required=True, help="functional image, grayscale or RGB")
    p.add_argument("--text1", required=True, help="description of the first image")
    p.add_argument("--text2", required=True, help="description of the second image")
    p.add_argument("--out", required=True, help="output PNG")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="fusion metrics for <fused-dir>/<id>.png against the manifest sources")
    p.add_argument("--fused-dir", required=True, help="directory with one <id>.png per manifest entry")
    p.add_argument("--ag-form", default="printed", choices=["printed", "rms"], help="average-gradient variant")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report-stats", help="word length, character entropy and keywords per report")
    p.add_argument("--text-file", required=True, help="one report per line, optionally '<id>\\t<text>'")
    p.add_argument("--raw", action="store_true", help="entropy over raw characters instead of normalized text")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_report_stats)

    p = sub.add_parser("config-dump", help="print the effective settings as JSON")
    p.set_defaults(func=cmd_config_dump)

    for name, sp in sub.choices.items():
        _add_settings(sp)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_settings(args)
        args.func(args, cfg)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, FusionError, FileNotFoundError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
