"""Command-line entry point: ``rotvpr <subcommand> [options]``.

Every subcommand resolves one flat ``section.key=value`` configuration
(defaults, then the ``--config`` file, then ``--set`` overrides, then
dedicated flags) before doing any work, and echoes it into its output.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import shutil
import sys
from pathlib import Path

import numpy as np

from . import backbone, dataset, metric_learning, retrieval

log = logging.getLogger("rotvpr")

SECTIONS = {
    "world": dataset.WorldSpec,
    "model": backbone.ModelConfig,
    "train": metric_learning.TrainConfig,
    "batch": metric_learning.BatchSpec,
    "loss": metric_learning.MsLossConfig,
}
# per-section seeds are driven by the single top-level seed
SEEDED = {"world", "model", "train"}
EXTRA_DEFAULTS = {
    "seed": 0,
    "data.interval_m": 440.0,
    "data.diameter_px": 500,
    "data.min_water_free_fraction": 0.5,
    "data.max_places": 0,
    "encode.variant": 0,
    "encode.rotate": False,
    "encode.crop_fraction": 0.9,
    "encode.dim": 0,
    "encode.batch_size": 16,
    "eval.criterion": "same",
    "bench.warmup": 3,
    "bench.reps": 10,
}


class CliError(Exception):
    """A user-facing failure: reported on stderr with exit code 2."""


# -- configuration ------------------------------------------------------------------

def default_config() -> dict:
    cfg = {}
    for name, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            if f.name == "seed" and name in SEEDED:
                continue
            cfg[f"{name}.{f.name}"] = getattr(cls(), f.name)
    cfg.update(EXTRA_DEFAULTS)
    return cfg


def _coerce(key: str, text, default):
    if not isinstance(text, str):
        return text
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(text)
            return low in ("1", "true", "yes")
        if isinstance(default, tuple):
            kind = type(default[0]) if default else int
            return tuple(kind(x) for x in text.split(",") if x.strip())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise CliError(f"bad value for {key}: {text!r}") from None
    return text


def parse_kv_lines(text: str, origin: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{origin}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(config_file=None, overrides=None, flags=None) -> dict:
    """Merge defaults <- config file <- ``--set`` pairs <- dedicated flags."""
    cfg = default_config()
    layers = []
    if config_file:
        path = Path(config_file)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        layers.append(parse_kv_lines(path.read_text(encoding="utf-8"), str(path)))
    if overrides:
        layers.append(parse_kv_lines("\n".join(overrides), "--set"))
    layers.append({k: v for k, v in (flags or {}).items() if v is not None})
    for layer in layers:
        unknown = sorted(set(layer) - set(cfg))
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in layer.items():
            cfg[k] = _coerce(k, v, cfg[k])
    return cfg


def section(cfg: dict, name: str):
    cls = SECTIONS[name]
    kw = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith(name + ".")}
    if name in SEEDED:
        kw["seed"] = cfg["seed"]
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid {name} config: {e}") from None


def adopt_model_config(cfg: dict, model) -> None:
    """A loaded model's architecture replaces the configured one."""
    for line in model.config.to_lines():
        k, v = line.split("=", 1)
        if k != "seed":
            cfg[f"model.{k}"] = _coerce(k, v, cfg[f"model.{k}"])


def config_text(cfg: dict) -> str:
    def fmt(v):
        return ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
    return "".join(f"{k}={fmt(v)}\n" for k, v in sorted(cfg.items()))


# -- output handling -------------------------------------------------------------------

@contextlib.contextmanager
def output_dir(path, force: bool, keep_existing: bool = False):
    """Create ``path`` for writing; remove whatever was written if the body fails."""
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise CliError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not keep_existing:
        if not force:
            raise CliError(f"{out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    before = set(out.iterdir()) if out.exists() else None
    out.mkdir(parents=True, exist_ok=True)
    try:
        yield out
    except BaseException:
        if before is None or not before:
            shutil.rmtree(out, ignore_errors=True)
        else:
            for p in set(out.iterdir()) - before:
                shutil.rmtree(p, ignore_errors=True) if p.is_dir() else p.unlink(missing_ok=True)
        raise


@contextlib.contextmanager
def output_file(path, force: bool):
    """Yield a temporary sibling path that replaces ``path`` only on success."""
    out = Path(path)
    if out.exists() and not force:
        raise CliError(f"{out} exists (use --force to overwrite)")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".partial")
    try:
        yield tmp
        tmp.replace(out)
    finally:
        tmp.unlink(missing_ok=True)


def write_report(out: Path, stem: str, rows: list[dict]) -> None:
    """The same rows as ``<stem>.csv`` and ``<stem>.json``."""
    (out / f"{stem}.json").write_text(json.dumps(rows, indent=1) + "\n", encoding="utf-8")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else [], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    (out / f"{stem}.csv").write_text(buf.getvalue(), encoding="utf-8")


def _require(path, what: str) -> Path:
    if path is None:
        raise CliError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


# -- subcommands ----------------------------------------------------------------------

def cmd_build_dataset(args, cfg) -> int:
    out_path = Path(args.out or "dataset")
    spec = section(cfg, "world")
    batch = section(cfg, "batch")
    with output_dir(out_path, args.force) as out:
        world = dataset.generate_world(spec)
        max_places = cfg["data.max_places"] or None
        try:
            records, images, stats = dataset.build_places(
                world, cfg["data.interval_m"], cfg["data.diameter_px"],
                cfg["data.min_water_free_fraction"], max_places=max_places, seed=cfg["seed"])
        except ValueError as e:
            raise CliError(str(e)) from None
        manifest = dataset.write_dataset(out, records, images)
        (out / "config.txt").write_text(config_text(cfg), encoding="utf-8")
        digest = hashlib.sha256(manifest.read_bytes()).hexdigest()
        row = {"places": stats.places, "lattice_inside": stats.lattice_inside,
               "water_rejected": stats.water_rejected, "years": spec.n_years,
               "manifest_sha256": digest}
        write_report(out, "build_report", [row])
    print(f"places: {stats.places} (lattice points inside: {stats.lattice_inside}, "
          f"rejected for water: {stats.water_rejected})")
    print(f"manifest: {manifest}  sha256 {digest}")
    if stats.places < batch.places:
        log.warning("only %d places produced, fewer than batch.places=%d: not trainable",
                    stats.places, batch.places)
    return 0


def cmd_train(args, cfg) -> int:
    manifest = _require(args.data, "--data manifest")
    out_path = Path(args.out or "run")
    resume = Path(args.resume) if args.resume else None
    same_dir = resume is not None and resume.resolve().parent == out_path.resolve()
    try:
        data = dataset.PlaceImages.from_manifest(manifest)
    except dataset.ManifestError as e:
        raise CliError(str(e)) from None
    if resume is not None:
        model = backbone.load_model(_require(resume, "--resume checkpoint"))
        start = int(model.meta.get("epoch", "0"))
        adopt_model_config(cfg, model)
    else:
        model = backbone.build_model(section(cfg, "model"))
        start = 0
    tcfg = section(cfg, "train")
    batch = section(cfg, "batch")
    if batch.input_size != model.config.input_size:
        raise CliError(f"batch.input_size {batch.input_size} != model.input_size "
                       f"{model.config.input_size}")
    with output_dir(out_path, args.force, keep_existing=same_dir) as out:
        (out / "config.txt").write_text(config_text(cfg), encoding="utf-8")
        try:
            res = metric_learning.train(model, data, tcfg, batch, section(cfg, "loss"),
                                        out_dir=out, start_epoch=start)
        except metric_learning.TrainingDiverged as e:
            raise CliError(str(e)) from None
        last = res.log[-1]
        write_report(out, "train_summary", [{
            "epochs": tcfg.epochs, "start_epoch": start, "final_epoch": start + tcfg.epochs,
            "final_loss": last["loss"], "seconds": round(res.seconds, 3),
            "model_checksum": model.checksum()}])
    print(f"trained {tcfg.epochs} epochs (epoch {start} -> {start + tcfg.epochs}); "
          f"model: {out / 'model.epm'}")
    return 0


def _image_inputs(path: Path, cfg):
    """``(views, ids, positions)`` from a manifest file or a directory of circular PPMs."""
    size = cfg["model.input_size"]
    rng = np.random.default_rng([cfg["seed"], 5])
    crop = cfg["encode.crop_fraction"]
    if path.is_dir():
        files = sorted(p for p in path.glob("*.ppm"))
        if not files:
            raise CliError(f"no .ppm images in {path}")
        views, ids = [], np.arange(len(files))
        for f in files:
            if dataset.mask_path(f).exists():
                img = dataset.load_circular(f)
            else:
                pix = dataset.read_ppm(f)
                img = dataset.CircularImage(pix, np.ones(pix.shape[:2], bool))
            angle = rng.uniform(0, 2 * math.pi) if cfg["encode.rotate"] else 0.0
            views.append(dataset.rotate_then_crop(img, angle, size, crop))
        return np.stack(views), ids, None
    try:
        data = dataset.PlaceImages.from_manifest(path)
    except dataset.ManifestError as e:
        raise CliError(str(e)) from None
    ids = data.place_ids()
    views, pos = [], []
    for pid in ids:
        rec = data.records[pid]
        img = data.image(pid, cfg["encode.variant"] % data.n_variants(pid))
        angle = rng.uniform(0, 2 * math.pi) if cfg["encode.rotate"] else 0.0
        views.append(dataset.rotate_then_crop(img, angle, size, crop))
        pos.append((rec.location.lat, rec.location.lon))
    return np.stack(views), np.array(ids), np.array(pos)


def cmd_encode(args, cfg) -> int:
    model = backbone.load_model(_require(args.model, "--model"))
    src = _require(args.data, "--data (manifest or image directory)")
    adopt_model_config(cfg, model)
    out_path = Path(args.out or "descriptors.epd")
    views, ids, positions = _image_inputs(src, cfg)
    desc = backbone.encode_batch(model, views, batch_size=cfg["encode.batch_size"], jobs=args.jobs)
    meta = {"model": model.checksum(), "source": src.name, "dataset": _file_digest(src)}
    store = retrieval.build_store(desc, ids, meta, positions)
    dim = cfg["encode.dim"]
    if dim:
        if dim > store.dim:
            raise CliError(f"--dim {dim} exceeds native dim {store.dim}")
        store = store.truncated(dim) if dim < store.dim else store
    with output_file(out_path, args.force) as tmp:
        tmp.write_bytes(retrieval.store_bytes(store))
        out_path.with_name(out_path.name + ".config.txt").write_text(config_text(cfg), encoding="utf-8")
    print(f"encoded {store.count} images -> {out_path} (dim {store.dim})")
    return 0


def _file_digest(path: Path) -> str:
    if path.is_dir():
        return "dir:" + path.name
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def _load_stores(args):
    try:
        q = retrieval.load_store(_require(args.query, "--query store"))
        db = retrieval.load_store(_require(args.db, "--db store"))
    except retrieval.StoreFormatError as e:
        raise CliError(str(e)) from None
    return q, db


def _criterion(cfg):
    try:
        return retrieval.parse_criterion(cfg["eval.criterion"])
    except ValueError as e:
        raise CliError(str(e)) from None


def cmd_eval(args, cfg) -> int:
    q, db = _load_stores(args)
    crit = _criterion(cfg)
    try:
        rep = retrieval.recall_at_n(q, db, crit)
    except ValueError as e:
        raise CliError(str(e)) from None
    with output_dir(Path(args.out or "eval"), args.force) as out:
        (out / "config.txt").write_text(config_text(cfg), encoding="utf-8")
        (out / "recall.json").write_text(rep.to_json() + "\n", encoding="utf-8")
        (out / "recall.csv").write_text(rep.to_csv(), encoding="utf-8")
    print(f"criterion {rep.criterion}: " + "  ".join(f"R@{n}={v:.2f}" for n, v in rep.recall.items())
          + f"  ({rep.n_queries} queries, {rep.n_excluded} excluded)")
    return 0


def cmd_sweep_dims(args, cfg) -> int:
    q, db = _load_stores(args)
    try:
        dims = [int(d) for d in args.dims.split(",")]
        rows = retrieval.sweep_dims(q, db, dims, _criterion(cfg))
    except ValueError as e:
        raise CliError(str(e)) from None
    with output_dir(Path(args.out or "sweep"), args.force) as out:
        (out / "config.txt").write_text(config_text(cfg), encoding="utf-8")
        (out / "sweep.csv").write_text(retrieval.sweep_csv(rows), encoding="utf-8")
        payload = [{"dim": r.dim, "recall1": r.report.recall[1], "recall5": r.report.recall[5],
                    "recall10": r.report.recall[10], "delta_recall1": r.delta_recall1} for r in rows]
        (out / "sweep.json").write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    for r in rows:
        print(f"dim {r.dim:5d}  R@1={r.report.recall[1]:.2f}  delta={r.delta_recall1:+.2f}")
    return 0


def cmd_bench_encode(args, cfg) -> int:
    model = backbone.load_model(_require(args.model, "--model"))
    s = model.config.input_size
    rng = np.random.default_rng(cfg["seed"])
    images = (rng.random((8, 3, s, s)) * dataset.circle_mask(s)).astype(model.config.dtype)
    try:
        res = retrieval.bench_encode(model, images, cfg["bench.warmup"], cfg["bench.reps"])
    except ValueError as e:
        raise CliError(str(e)) from None
    with output_dir(Path(args.out or "bench"), args.force) as out:
        (out / "config.txt").write_text(config_text(cfg), encoding="utf-8")
        write_report(out, "bench", [{"group_order": model.config.group_order,
                                     "mean_ms": res.mean_ms, "std_ms": res.std_ms,
                                     "reps": res.reps, **res.machine}])
    print(f"N={model.config.group_order}: {res.mean_ms:.3f} ms +- {res.std_ms:.3f} ms per image "
          f"({res.reps} reps, batch size 1)")
    return 0


def cmd_estimate_storage(args, cfg) -> int:
    try:
        n, total = retrieval.estimate_storage(args.area_km2, args.km2_per_image, args.dim,
                                              args.bytes_per_value)
    except ValueError as e:
        raise CliError(str(e)) from None
    print(f"{n} images, {total} bytes ({total / 1e9:.2f} GB)")
    if args.out:
        with output_dir(Path(args.out), args.force) as out:
            (out / "config.txt").write_text(config_text(cfg), encoding="utf-8")
            write_report(out, "storage", [{"area_km2": args.area_km2,
                                           "km2_per_image": args.km2_per_image, "dim": args.dim,
                                           "bytes_per_value": args.bytes_per_value,
                                           "images": n, "bytes": total}])
    return 0


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="single source of randomness (default 0)")
    common.add_argument("--jobs", type=int, default=1, help="worker threads; 1 is the reference mode")
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--out", help="output directory (or file, for encode)")
    common.add_argument("--force", action="store_true", help="overwrite existing output")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rotvpr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-dataset", parents=[common], help="generate a synthetic place dataset")
    b.add_argument("--size", type=int, help="world side in pixels")
    b.add_argument("--interval", type=float, help="lattice spacing in metres")
    b.add_argument("--years", type=int, help="number of yearly variants")
    b.add_argument("--diameter", type=int, help="circular image diameter in pixels")
    b.add_argument("--max-places", type=int)
    b.set_defaults(func=cmd_build_dataset, flag_keys={
        "size": "world.size_px", "interval": "data.interval_m", "years": "world.n_years",
        "diameter": "data.diameter_px", "max_places": "data.max_places"})

    t = sub.add_parser("train", parents=[common], help="train an encoder")
    t.add_argument("--data", help="manifest.jsonl")
    t.add_argument("--group", type=int, help="cyclic group order (1, 4 or 8)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train, flag_keys={"group": "model.group_order",
                                               "epochs": "train.epochs", "lr": "train.lr"})

    e = sub.add_parser("encode", parents=[common], help="encode images into a descriptor store")
    e.add_argument("--model", help="model.epm")
    e.add_argument("--data", help="manifest.jsonl or directory of .ppm images")
    e.add_argument("--dim", type=int, help="truncate-and-renormalise to this dim")
    e.add_argument("--variant", type=int, help="yearly variant index (-1 = latest)")
    e.add_argument("--rotate", action="store_const", const="true",
                   help="apply a seeded random rotation per image (query views)")
    e.set_defaults(func=cmd_encode, flag_keys={"dim": "encode.dim", "variant": "encode.variant",
                                                "rotate": "encode.rotate"})

    v = sub.add_parser("eval", parents=[common], help="Recall@N of a query store against a database")
    v.add_argument("--query")
    v.add_argument("--db")
    v.add_argument("--criterion", help="same | radius:<m> | window:<n>")
    v.set_defaults(func=cmd_eval, flag_keys={"criterion": "eval.criterion"})

    s = sub.add_parser("sweep-dims", parents=[common], help="recall across descriptor dims")
    s.add_argument("--query")
    s.add_argument("--db")
    s.add_argument("--dims", default="512,256,128,64,32", help="descending comma list")
    s.add_argument("--criterion")
    s.set_defaults(func=cmd_sweep_dims, flag_keys={"criterion": "eval.criterion"})

    m = sub.add_parser("bench-encode", parents=[common], help="per-image encoding latency")
    m.add_argument("--model")
    m.add_argument("--reps", type=int)
    m.add_argument("--warmup", type=int)
    m.set_defaults(func=cmd_bench_encode, flag_keys={"reps": "bench.reps", "warmup": "bench.warmup"})

    g = sub.add_parser("estimate-storage", parents=[common], help="descriptor memory for an area")
    g.add_argument("area_km2", type=float)
    g.add_argument("km2_per_image", type=float)
    g.add_argument("dim", type=int)
    g.add_argument("bytes_per_value", type=float)
    g.set_defaults(func=cmd_estimate_storage, flag_keys={})
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    flags = {key: getattr(args, attr) for attr, key in args.flag_keys.items()}
    if args.seed is not None:
        flags["seed"] = args.seed
    try:
        cfg = resolve_config(args.config, args.set, flags)
        return args.func(args, cfg)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
