"""``anw`` command-line harness.

Subcommands: synth, watermark, train, verify, metrics, experiment.  Every
command accepts ``--config file.json``; explicit flags override its values.
Exit codes: 0 success, 1 usage, 2 format or IO error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import generate_synthetic, make_rng, read_cifar10, read_dataset, write_dataset
from .errors import FormatError, NumericalError
from .metrics import (
    BernoulliOutcome,
    mia_infer,
    mia_pow_threshold,
    mia_std_threshold,
    protection_advantage,
    signature_cosine,
)
from .nn import load_checkpoint, save_checkpoint
from .train import TrainConfig, train
from .verify import GradientSchedule, SignatureSpace, blue_grid_search, linear_match, verify
from .watermark import (
    BlueChannelKey,
    ColorBasis,
    WatermarkKey,
    blue_channel_watermark,
    random_blue_key,
    random_user_basis,
    watermark_image,
    yiq_matrix,
)

log = logging.getLogger("anw")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers -----------------------------------------------------------------

def _load_json(path) -> dict:
    with open(path) as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise FormatError("config must be a JSON object", field="config")
    return obj


def _resolve(args, keys) -> dict:
    """Merge ``--config`` values with explicit flags (flags win)."""
    cfg = _load_json(args.config) if getattr(args, "config", None) else {}
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _need(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise UsageError(f"missing required setting(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _read_any(path, fmt="auto"):
    path = Path(path)
    if fmt == "cifar" or (fmt == "auto" and path.suffix == ".bin"):
        return read_cifar10(path)
    return read_dataset(path)


def parse_basis(spec) -> ColorBasis:
    """``yiq``, ``random:SEED`` or nine comma-separated reals (row-major)."""
    if isinstance(spec, list):
        return ColorBasis.from_list(spec)
    if isinstance(spec, dict):
        return ColorBasis.from_list(spec["matrix"])
    spec = str(spec)
    if spec == "yiq":
        return yiq_matrix()
    if spec.startswith("random:"):
        return random_user_basis(make_rng(int(spec.split(":", 1)[1])))
    vals = [float(v) for v in spec.split(",")]
    if len(vals) != 9:
        raise UsageError("an explicit basis needs nine comma-separated numbers")
    return ColorBasis(np.array(vals).reshape(3, 3))


def _parse_indices(spec, size) -> np.ndarray:
    if spec is None or spec == "":
        return np.zeros(0, dtype=np.int64)
    if isinstance(spec, list):
        idx = np.asarray(spec, dtype=np.int64)
    elif Path(str(spec)).is_file():
        text = Path(spec).read_text()
        obj = json.loads(text) if text.lstrip().startswith(("[", "{")) else text.split()
        if isinstance(obj, dict):
            obj = obj["indices"]
        idx = np.asarray([int(v) for v in obj], dtype=np.int64)
    else:
        idx = np.asarray([int(v) for v in str(spec).split(",") if v.strip()], dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise UsageError(f"user index out of range for a dataset of {size} images")
    if len(np.unique(idx)) != len(idx):
        raise UsageError("user indices must be unique")
    return np.sort(idx)


def _space(cfg) -> SignatureSpace:
    if cfg.get("tau") is not None:
        space = SignatureSpace.from_tau(float(cfg["tau"]))
        if cfg.get("n") is not None and int(cfg["n"]) != space.n:
            raise UsageError("n and tau disagree: n * 2 * tau must equal 360")
        return space
    return SignatureSpace(int(cfg.get("n", 12)))


def _load_key(path):
    obj = _load_json(path)
    if "blue" in obj:
        return BlueChannelKey.from_json(obj["blue"])
    return WatermarkKey.from_json(obj)


# -- commands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _resolve(args, ["num_images", "height", "width", "num_classes", "seed", "out"])
    cfg = {"num_images": 5000, "height": 32, "width": 32, "num_classes": 10, "seed": 0, **cfg}
    _need(cfg, "out")
    ds = generate_synthetic(int(cfg["num_images"]), int(cfg["height"]), int(cfg["width"]), int(cfg["num_classes"]), int(cfg["seed"]))
    write_dataset(ds, cfg["out"])
    counts = np.bincount(ds.labels, minlength=ds.num_classes).tolist()
    summary = {"config": cfg, "count": len(ds), "num_classes": ds.num_classes, "per_class": counts}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_watermark(args) -> int:
    cfg = _resolve(args, ["input", "out", "indices", "user_share", "seed", "basis", "signature", "blue_alpha",
                          "blue_pixels", "split_secret", "format"])
    cfg = {"basis": "yiq", "signature": 60.0, "seed": 0, "format": "auto", "split_secret": False, **cfg}
    _need(cfg, "input", "out")
    ds = _read_any(cfg["input"], cfg["format"])
    if cfg.get("indices") is not None:
        idx = _parse_indices(cfg["indices"], len(ds))
    elif cfg.get("user_share") is not None:
        count = int(round(float(cfg["user_share"]) * len(ds)))
        idx = np.sort(make_rng(int(cfg["seed"])).choice(len(ds), size=count, replace=False))
    else:
        raise UsageError("give --indices or --user-share")
    if cfg.get("blue_alpha") is not None:
        pixels = int(cfg.get("blue_pixels") or 512)
        key = random_blue_key(ds.height, ds.width, pixels, float(cfg["blue_alpha"]), int(cfg["seed"]))
        marked = blue_channel_watermark(ds.images[idx], key) if len(idx) else ds.images[idx]
        public = {"blue": key.to_json(include_alpha=not cfg["split_secret"])}
        secret = {"alpha": key.alpha} if cfg["split_secret"] else None
    else:
        key = WatermarkKey(parse_basis(cfg["basis"]), float(cfg["signature"]))
        marked = watermark_image(ds.images[idx], key) if len(idx) else ds.images[idx]
        public = key.to_json(include_signature=not cfg["split_secret"])
        secret = {"signature": key.signature} if cfg["split_secret"] else None
    out = Path(cfg["out"])
    write_dataset(ds.replace_images(idx, marked), out)
    _write_json(out.with_name(out.name + ".key.json"), public)
    if secret is not None:
        _write_json(out.with_name(out.name + ".secret.json"), secret)
    _write_json(out.with_name(out.name + ".users.json"), {"indices": idx.tolist(), "config": cfg})
    print(json.dumps({"watermarked": int(len(idx)), "out": str(out)}))
    return EXIT_OK


def cmd_train(args) -> int:
    keys = ["data", "out", "eval", "format", "epochs", "base_lr", "batch_size", "seed", "momentum", "width"]
    cfg = _resolve(args, keys)
    _need(cfg, "data", "out")
    tc_fields = {k: v for k, v in cfg.items() if k not in ("data", "out", "eval", "format", "train")}
    tc_fields.update(cfg.get("train", {}))
    config = TrainConfig.from_json(tc_fields)
    ds = _read_any(cfg["data"], cfg.get("format", "auto"))
    eval_set = _read_any(cfg["eval"], cfg.get("format", "auto")) if cfg.get("eval") else None
    result = train(ds, config=config, eval_set=eval_set)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out)
    with open(out.with_name(out.name + ".log.csv"), "w", newline="") as fh:
        cols = ["epoch", "lr", "train_loss"] + (["eval_acc"] if eval_set is not None else [])
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in result.log:
            w.writerow({c: row[c] for c in cols})
    resolved = {"data": cfg["data"], "out": str(out), "eval": cfg.get("eval"), "train": config.to_json()}
    _write_json(out.with_name(out.name + ".config.json"), resolved)
    print(json.dumps({"checkpoint": str(out), "final": result.log[-1]}, default=_json_default))
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _resolve(args, ["checkpoint", "data", "indices", "key", "basis", "n", "tau", "claimed", "method", "out",
                          "curve", "format", "iterations"])
    cfg = {"method": "grid", "format": "auto", **cfg}
    _need(cfg, "checkpoint", "data")
    model = load_checkpoint(cfg["checkpoint"])
    ds = _read_any(cfg["data"], cfg["format"])
    if cfg.get("indices") is not None:
        idx = _parse_indices(cfg["indices"], len(ds))
        if not len(idx):
            raise UsageError("the user index list is empty")
        ds = ds.subset(idx)
    key = _load_key(cfg["key"]) if cfg.get("key") else None
    if isinstance(key, BlueChannelKey):
        rep = blue_grid_search(model, ds.images, ds.labels, key)
        if cfg.get("claimed") is not None:
            rep.claimed = float(cfg["claimed"])
            rep.matched = linear_match(rep.inferred, rep.claimed, rep.tau)
    else:
        if key is not None:
            basis = key.basis
        elif cfg.get("basis") is not None:
            basis = parse_basis(cfg["basis"])
        else:
            raise UsageError("give --key or --basis")
        schedule = GradientSchedule(int(cfg["iterations"])) if cfg.get("iterations") else GradientSchedule()
        rep = verify(model, ds.images, ds.labels, basis, _space(cfg), claimed=cfg.get("claimed"),
                     method=cfg["method"], schedule=schedule)
    report = rep.to_json()
    report["config"] = cfg
    if cfg.get("out"):
        _write_json(cfg["out"], report)
    if cfg.get("curve"):
        _write_curve(cfg["curve"], rep.per_candidate_losses)
    print(json.dumps({k: report[k] for k in ("method", "inferred", "tau") if k in report} |
                     ({"matched": report["matched"]} if "matched" in report else {})))
    return EXIT_OK


def _write_curve(path, pairs, name="k"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([name, "loss"])
        for k, l in pairs:
            w.writerow([f"{k:.6g}", f"{l:.8g}"])


def cmd_metrics(args) -> int:
    if args.metric == "advantage":
        out = {"adv_p": protection_advantage(BernoulliOutcome(args.M, args.N, args.p))}
    elif args.metric == "mia-std":
        thr = mia_std_threshold(args.train_losses)
        out = {"epsilon": thr.epsilon}
        if args.query is not None:
            out["member"] = [mia_infer(q, thr) for q in args.query]
    elif args.metric == "mia-pow":
        thr = mia_pow_threshold(args.train_losses, args.heldout_losses)
        out = {"epsilon": thr.epsilon, "accuracy": thr.accuracy}
    elif args.metric == "cosine":
        out = {"cosine": signature_cosine(args.inferred, args.true)}
    else:  # pragma: no cover - argparse restricts choices
        raise UsageError(args.metric)
    print(json.dumps(out))
    return EXIT_OK


def cmd_experiment(args) -> int:
    from . import experiments as ex

    cfg = _resolve(args, ["seed", "out", "cache"])
    params = dict(cfg.get("params", {}))
    name = args.name
    if name not in ex.EXPERIMENTS:
        raise UsageError(f"unknown experiment {name!r}; choose from {', '.join(ex.EXPERIMENTS)}")
    if "train" in cfg:
        params["config"] = TrainConfig.from_json(cfg["train"])
    if "setup" in cfg:
        params["setup"] = ex.DeskSetup(**cfg["setup"])
    if cfg.get("seed") is not None:
        if name == "recovery":
            params.setdefault("seeds", [int(cfg["seed"])])
        else:
            params["seed"] = int(cfg["seed"])
    if cfg.get("cache") and name not in ("multiuser", "mae"):
        params["cache"] = ex.ModelCache(cfg["cache"])
    summary = ex.run_experiment(name, **params)
    summary["config"] = cfg
    out = Path(cfg.get("out") or f"runs/{name}")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "summary.json", summary)
    _write_experiment_curves(out, summary)
    print(json.dumps({"experiment": name, "summary": str(out / "summary.json")}))
    return EXIT_OK


def _write_experiment_curves(out: Path, summary: dict):
    runs = summary.get("runs")
    if isinstance(runs, dict):
        items = runs.items()
    elif isinstance(runs, list):
        items = ((str(r.get("seed", r.get("count", r.get("signature", i)))), r) for i, r in enumerate(runs))
    else:
        return
    space = SignatureSpace()
    for label, row in items:
        losses = row.get("losses") or row.get("watermarked", {}).get("losses")
        if losses and len(losses) == space.n:
            _write_curve(out / f"curve_{label}.csv", zip(space.candidates, losses))


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="anw", description="Hue-rotation watermarks for training-data use verification.")
    p.add_argument("--version", action="version", version=f"anw {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--num-images", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--num-classes", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("watermark", help="watermark a user's images inside a dataset")
    s.add_argument("--config")
    s.add_argument("--input")
    s.add_argument("--out")
    s.add_argument("--format", choices=["auto", "anw", "cifar"])
    s.add_argument("--indices", help="comma list, or a file of indices (text or JSON)")
    s.add_argument("--user-share", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--basis", help="yiq | random:SEED | nine comma-separated reals")
    s.add_argument("--signature", type=float)
    s.add_argument("--blue-alpha", type=float)
    s.add_argument("--blue-pixels", type=int)
    s.add_argument("--split-secret", action="store_true", default=None,
                   help="keep the signature out of the key file; it goes to a separate secret file")
    s.set_defaults(func=cmd_watermark)

    s = sub.add_parser("train", help="train the tiny CNN")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--eval")
    s.add_argument("--format", choices=["auto", "anw", "cifar"])
    s.add_argument("--out")
    s.add_argument("--epochs", type=int)
    s.add_argument("--base-lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--momentum", type=float)
    s.add_argument("--width", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("verify", help="infer a user's signature from a checkpoint")
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--data", help="the user's clean images")
    s.add_argument("--indices", help="restrict --data to these indices (comma list or manifest file)")
    s.add_argument("--format", choices=["auto", "anw", "cifar"])
    s.add_argument("--key", help="key file written by `anw watermark`")
    s.add_argument("--basis")
    s.add_argument("--n", type=int)
    s.add_argument("--tau", type=float)
    s.add_argument("--method", choices=["grid", "gradient", "refine"])
    s.add_argument("--iterations", type=int)
    s.add_argument("--claimed", type=float, help="used only after the search, for the match decision")
    s.add_argument("--out")
    s.add_argument("--curve")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("metrics", help="standalone metric calculations")
    msub = s.add_subparsers(dest="metric", required=True, parser_class=_Parser)
    m = msub.add_parser("advantage")
    m.add_argument("--M", type=int, required=True)
    m.add_argument("--N", type=int, required=True)
    m.add_argument("--p", type=float, required=True)
    m = msub.add_parser("mia-std")
    m.add_argument("--train-losses", type=float, nargs="+", required=True)
    m.add_argument("--query", type=float, nargs="+")
    m = msub.add_parser("mia-pow")
    m.add_argument("--train-losses", type=float, nargs="+", required=True)
    m.add_argument("--heldout-losses", type=float, nargs="+", required=True)
    m = msub.add_parser("cosine")
    m.add_argument("--inferred", type=float, required=True)
    m.add_argument("--true", type=float, required=True)
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("experiment", help="run a desk-scale experiment")
    s.add_argument("name")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--cache", help="directory for cached checkpoints")
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"anw: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError, json.JSONDecodeError) as e:
        print(f"anw: error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericalError as e:
        print(f"anw: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, IndexError, KeyError) as e:
        print(f"anw: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
