"""Command-line entry point: ``python -m densefixmatch <command> ...``.

Commands: gen-data, train, grid, eval, inspect-aug. Every command accepts
``--seed``, ``--config`` and ``--out``. Training options may come from a JSON
config file; any option given on the command line overrides the file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import augment as aug
from .autodiff import IGNORE
from .data import export_dataset, gen_dataset
from .grid import regime_table, run_grid
from .matching import match, pseudolabel, write_pgm
from .metrics import evaluate_model, write_report
from .model import init_model, load_params, predict
from .train import (
    TAG_AUG,
    TAG_DATA,
    TAG_INIT,
    TrainConfig,
    build_data,
    derive_seed,
    load_checkpoint,
    sample_views,
    train_run,
)


class UsageError(Exception):
    pass


def _field_parser(default):
    if isinstance(default, bool):
        def parse_bool(s: str) -> bool:
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")
        return parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        elem = type(default[0]) if default else float

        def parse_tuple(s: str) -> tuple:
            return tuple(elem(x) for x in s.replace(",", ":").split(":") if x)
        return parse_tuple
    return str


FIELD_PARSERS = {f.name: _field_parser(f.default) for f in dataclasses.fields(TrainConfig)}


def parse_value(name: str, text: str):
    if name not in FIELD_PARSERS:
        raise UsageError(f"unknown config field {name!r}")
    try:
        return FIELD_PARSERS[name](text)
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise UsageError(f"bad value {text!r} for {name}: {exc}") from None


def parse_sweep(spec: str) -> tuple[str, list]:
    """``tau=0,0.5,0.8`` -> ("tau", [0.0, 0.5, 0.8]). Tuple values use ``:`` inside an entry."""
    if "=" not in spec:
        raise UsageError(f"--param expects field=v1,v2,..., got {spec!r}")
    name, values = spec.split("=", 1)
    name = name.strip().replace("-", "_")
    if name not in FIELD_PARSERS:
        raise UsageError(f"unknown config field {name!r} in --param")
    raw = [v for v in values.split(",") if v != ""]
    if not raw:
        raise UsageError(f"--param {name} has no values")
    return name, [parse_value(name, v) for v in raw]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="run seed (overrides config)")
    p.add_argument("--config", type=Path, default=None, help="JSON training config")
    p.add_argument("--out", type=Path, default=None, help="output directory")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training config overrides")
    for f in dataclasses.fields(TrainConfig):
        if f.name in ("seed", "out_dir"):
            continue
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, type=FIELD_PARSERS[f.name],
                       default=None, metavar=type(f.default).__name__.upper() if f.default is not None else "STR")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="densefixmatch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and export the synthetic dataset")
    _add_common(p)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--imbalance", type=float, default=None)

    p = sub.add_parser("train", help="train one run")
    _add_common(p)
    _add_config_flags(p)
    p.add_argument("--no-resume", action="store_true", help="ignore an existing checkpoint in --out")

    p = sub.add_parser("grid", help="sweep config fields over all splits")
    _add_common(p)
    _add_config_flags(p)
    p.add_argument("--param", action="append", default=[], metavar="FIELD=V1,V2,...",
                   help="swept field; repeat for a product grid")
    p.add_argument("--table", action="store_true", help="print a method x n_labeled table")

    p = sub.add_parser("eval", help="evaluate saved parameters on the validation set")
    _add_common(p)
    _add_config_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True,
                   help="parameter file (best_teacher.npz) or training checkpoint")
    p.add_argument("--student", action="store_true", help="evaluate the student of a training checkpoint")

    p = sub.add_parser("inspect-aug", help="dump a weak/strong view pair with pseudo-labels")
    _add_common(p)
    _add_config_flags(p)
    p.add_argument("--index", type=int, default=0, help="training image id")
    p.add_argument("--checkpoint", type=Path, default=None, help="parameters that produce the pseudo-labels")
    return parser


def config_from_args(args) -> TrainConfig:
    d = {}
    if args.config is not None:
        try:
            d = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    for k, v in vars(args).items():
        if k.startswith("cfg_") and v is not None:
            d[k[4:]] = v
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "out", None) is not None and args.command == "train":
        d["out_dir"] = str(args.out)
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = config_from_args(args)
    data_seed = cfg.data_seed if args.seed is None else args.seed
    params = {
        "data_seed": data_seed,
        # same derivation as training, so the export is the training set
        "seed": derive_seed(data_seed, TAG_DATA),
        "n": args.n or cfg.n_images,
        "height": args.size or cfg.image_size,
        "width": args.size or cfg.image_size,
        "num_classes": args.num_classes or cfg.num_classes,
        "imbalance": args.imbalance if args.imbalance is not None else cfg.imbalance,
    }
    if args.out is None:
        raise UsageError("gen-data needs --out")
    samples = gen_dataset(**{k: v for k, v in params.items() if k != "data_seed"})
    manifest = export_dataset(args.out, samples, params)
    print(f"wrote {len(samples)} samples to {manifest.parent}")
    return 0


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    result = train_run(cfg, resume=not args.no_resume)
    summary = {k: v for k, v in result.metrics().items() if k != "history"}
    summary["wall_time"] = round(result.wall_time, 2)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_grid(args) -> int:
    cfg = config_from_args(args)
    params = dict(parse_sweep(s) for s in args.param)
    cells = run_grid(cfg, params, args.out)
    for c in cells:
        print(f"{c.overrides}  mIoU {100 * c.mean:.2f} ± {100 * c.std:.2f}  (n={len(c.values)})")
    if args.table:
        if "n_labeled" not in params:
            raise UsageError("--table needs an n_labeled sweep")
        print(regime_table(cells, cfg.n_images))
    return 0


def _load_any(path: Path, student: bool):
    with np.load(path, allow_pickle=False) as z:
        is_checkpoint = "__header__" in z.files
    if is_checkpoint:
        state, _ = load_checkpoint(path)
        return state.student if student else state.teacher.params
    if student:
        raise UsageError("--student needs a training checkpoint")
    return load_params(path)


def cmd_eval(args) -> int:
    cfg = config_from_args(args)
    params = _load_any(args.checkpoint, args.student)
    data = build_data(cfg)
    res = evaluate_model(params, data.val)
    print(json.dumps({k: res[k] for k in ("miou", "miou_std", "per_class_iou", "pixel_percent")}, indent=2))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        write_report(args.out / "eval.json", res, checkpoint=str(args.checkpoint), split=cfg.split_index,
                     seed=cfg.seed, which="student" if args.student else "teacher")
    return 0


def _label_colors(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """H,W labels to H,W,3 bytes; IGNORE is drawn white, classes on a fixed dark palette."""
    base = np.array([[40, 40, 40], [200, 60, 60], [60, 60, 200], [60, 170, 60], [200, 160, 40],
                     [150, 60, 170], [40, 160, 170]], dtype=np.uint8)
    pal = base[np.arange(num_classes) % len(base)]
    out = np.full(labels.shape + (3,), 255, dtype=np.uint8)
    valid = labels != IGNORE
    out[valid] = pal[labels[valid]]
    return out


def write_ppm(path: Path, rgb: np.ndarray) -> None:
    """H,W,3 uint8 as binary PPM."""
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb).tobytes())


def _to_bytes(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def cmd_inspect_aug(args) -> int:
    cfg = config_from_args(args)
    if args.out is None:
        raise UsageError("inspect-aug needs --out")
    data = build_data(cfg)
    if not 0 <= args.index < len(data.train):
        raise UsageError(f"--index must lie in [0, {len(data.train)})")
    image = data.train[args.index].image
    rng = np.random.default_rng([derive_seed(cfg.seed, TAG_AUG), args.index])
    weak, strong = sample_views(cfg, rng)
    params = (_load_any(args.checkpoint, False) if args.checkpoint
              else init_model(derive_seed(cfg.seed, TAG_INIT), cfg.layer_spec, cfg.np_dtype))
    weak_img = aug.apply_to_image(weak, image)
    strong_img = aug.apply_to_image(strong, image)
    probs = predict(params, weak_img[None].astype(cfg.np_dtype)).data[0]
    pl = pseudolabel(probs, cfg.tau)
    matched = match(pl, weak, strong)

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / "weak.ppm", _to_bytes(weak_img))
    write_ppm(out / "strong.ppm", _to_bytes(strong_img))
    write_pgm(out / "pseudolabel.pgm", pl)
    write_pgm(out / "matched.pgm", matched)
    write_ppm(out / "pseudolabel.ppm", _label_colors(pl, cfg.num_classes))
    write_ppm(out / "matched.ppm", _label_colors(matched, cfg.num_classes))
    meta = {"index": args.index, "seed": cfg.seed, "tau": cfg.tau, "weak": weak.to_dict(),
            "strong": strong.to_dict(),
            "valid_pixels": {"pseudolabel": int(np.count_nonzero(pl != IGNORE)),
                             "matched": int(np.count_nonzero(matched != IGNORE))}}
    (out / "views.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    print(f"wrote view pair for image {args.index} to {out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "grid": cmd_grid,
    "eval": cmd_eval,
    "inspect-aug": cmd_inspect_aug,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on unknown flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"densefixmatch {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"densefixmatch {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
