"""Command-line entry point: synth, match, project, train, eval and predict.

Every option can come from a ``key=value`` config file (``--config``); flags
given on the command line override it. Each run writes the resolved values
to a run manifest next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigMismatch, FormatError, PCTreesError
from .georef import PlotFrame, group_species, match_by_rounding, read_census, read_match_report, write_match_report
from .models import canonical_name, config_text, model_from_config_text
from .pointcloud import apply_scale, center, filter_min_points, normalize_unit, read_manifest, rescale_global
from .raster import VIEWS, MODES, project6, write_pgm, write_projection_binary
from .synth import generate_dataset, write_synth
from .train import (EvalReport, Item, LabeledDataset, TrainConfig, evaluate, format_report, predict_proba,
                    prepare_points, prepare_rasters, read_metrics_csv, resample, stratified_split, train_model,
                    write_metrics_csv, write_timing_csv)

log = logging.getLogger("pctrees")


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigMismatch(f"not a boolean: {s!r}")


def _model(s: str) -> str:
    return canonical_name(s)


# option name -> (type, default, help); names use underscores, flags use dashes
COMMON = {
    "seed": (int, 0, "root seed for every random choice"),
    "verbose": (_bool, False, "log progress to stderr"),
}
OPTIONS: dict[str, dict[str, tuple[Callable, object, str]]] = {
    "synth": {
        "out": (Path, None, "output directory"),
        "per_class": (int, 100, "clouds per archetype"),
        "points_min": (int, 800, "fewest points per cloud"),
        "points_max": (int, 3000, "most points per cloud"),
        "shared_cells": (int, 0, "items deliberately placed in an occupied grid cell"),
    },
    "match": {
        "manifest": (Path, None, "cloud manifest CSV"),
        "census": (Path, None, "census CSV"),
        "out": (Path, None, "match report CSV"),
        "post_x": (float, 0.0, "plot post easting"),
        "post_y": (float, 0.0, "plot post northing"),
        "cell_size": (float, 1.0, "matching grid cell in meters"),
        "min_points": (int, 1000, "drop clouds with this many points or fewer"),
        "filter_order": (str, "after", "apply the point-count filter after or before matching"),
        "top_k": (int, 5, "species kept as classes; the rest become 'other'"),
        "include_dead": (_bool, False, "keep dead stems from the census"),
    },
    "project": {
        "manifest": (Path, None, "cloud manifest CSV"),
        "out": (Path, None, "output directory"),
        "res": (int, 128, "raster resolution"),
        "extent": (float, 2.0, "window size in normalized units"),
        "mode": (str, "density", "density or occupancy"),
        "scaling": (str, "global", "global (keeps relative height) or unit"),
        "min_points": (int, 1000, "drop clouds with this many points or fewer"),
        "previews": (_bool, True, "also write PGM previews"),
    },
    "train": {
        "manifest": (Path, None, "cloud manifest CSV"),
        "match": (Path, None, "match report CSV"),
        "out": (Path, None, "run directory"),
        "model": (_model, "pctrees", "baseline, baselinepp or pctrees"),
        "epochs": (int, 100, "training epochs"),
        "batch_size": (int, 32, "mini-batch size"),
        "lr": (float, 1e-5, "Adam learning rate"),
        "split": (float, 0.8, "training fraction per class"),
        "resample": (str, "none", "none, up or down (training split only)"),
        "min_points": (int, 1000, "drop clouds with this many points or fewer"),
        "tiny": (_bool, False, "use the reduced point-transformer preset"),
        "input_points": (int, 0, "points per cloud for pctrees (0: 1024, or 128 when tiny)"),
        "res": (int, 128, "raster resolution for CNN models"),
        "extent": (float, 2.0, "raster window size"),
        "mode": (str, "density", "raster mode"),
        "scaling": (str, "auto", "auto, global or unit (auto: unit for baseline, global otherwise)"),
        "fusion": (str, "auto", "auto, separate or channels"),
    },
    "eval": {
        "run": (str, None, "training run directory (comma-separated for several)"),
        "out": (Path, None, "optional file for the report text"),
    },
    "predict": {
        "run": (Path, None, "training run directory"),
        "manifest": (Path, None, "cloud manifest CSV"),
        "out": (Path, None, "prediction CSV"),
        "min_points": (int, 0, "drop clouds with this many points or fewer"),
    },
}
REQUIRED = {
    "synth": ["out"], "match": ["manifest", "census", "out"], "project": ["manifest", "out"],
    "train": ["manifest", "match", "out"], "eval": ["run"], "predict": ["run", "manifest", "out"],
}
INPUT_FILES = {"manifest", "census", "match"}


def read_kv(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{n}: expected key=value")
        k, _, v = line.partition("=")
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def write_kv(values: dict, path) -> None:
    lines = [f"{k}={'' if v is None else v}" for k, v in sorted(values.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pctrees", description="Tree species classification from LiDAR point clouds.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, opts in OPTIONS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="key=value file; flags override it")
        for key, (_, default, helptext) in {**COMMON, **opts}.items():
            sp.add_argument("--" + key.replace("_", "-"), dest=key, default=argparse.SUPPRESS,
                            help=f"{helptext} (default: {default})")
    return p


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    known = {**COMMON, **OPTIONS[command]}
    raw: dict[str, object] = {}
    if getattr(args, "config", None) is not None:
        raw.update(read_kv(args.config))
        unknown = set(raw) - set(known)
        if unknown:
            raise ConfigMismatch(f"unknown config keys: {', '.join(sorted(unknown))}")
    raw.update({k: v for k, v in vars(args).items() if k in known})
    cfg = {}
    for key, (conv, default, _) in known.items():
        if key in raw and raw[key] not in ("", None):
            try:
                cfg[key] = conv(raw[key])
            except (ValueError, KeyError) as exc:
                raise ConfigMismatch(f"bad value for {key}: {raw[key]!r}") from exc
        else:
            cfg[key] = default
    missing = [k for k in REQUIRED[command] if cfg[k] is None]
    if missing:
        raise ConfigMismatch(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    for key in INPUT_FILES & set(cfg):
        if not Path(cfg[key]).is_file():
            raise FileNotFoundError(f"{key} file not found: {cfg[key]}")
    cfg["command"] = command
    return cfg


def _manifest_values(cfg: dict) -> dict:
    return {k: (v.as_posix() if isinstance(v, Path) else v) for k, v in cfg.items()}


# ---------------------------------------------------------------- subcommands

def cmd_synth(cfg: dict) -> int:
    out = Path(cfg["out"])
    res = generate_dataset(per_class=cfg["per_class"], n_points=(cfg["points_min"], cfg["points_max"]),
                           seed=cfg["seed"], shared_cells=cfg["shared_cells"])
    paths = write_synth(res, out)
    write_kv({**_manifest_values(cfg), "post_x": repr(res.frame.post_x), "post_y": repr(res.frame.post_y)},
             out / "run_manifest.txt")
    print(f"wrote {len(res.clouds)} clouds, manifest {paths['manifest']}, census {paths['census']}")
    print(f"plot post: post_x={res.frame.post_x!r} post_y={res.frame.post_y!r}")
    return 0


def cmd_match(cfg: dict) -> int:
    if cfg["filter_order"] not in ("after", "before"):
        raise ConfigMismatch("filter_order must be after or before")
    clouds = read_manifest(cfg["manifest"])
    if cfg["filter_order"] == "before":
        clouds = filter_min_points(clouds, cfg["min_points"])
    frame = PlotFrame(cfg["post_x"], cfg["post_y"])
    records = read_census(cfg["census"], frame, include_dead=cfg["include_dead"])
    result = match_by_rounding(clouds, records, cfg["cell_size"])
    pairs = result.pairs
    if cfg["filter_order"] == "after":
        # small clouds still occupy their cell during matching, then their pairs are dropped
        kept = {c.id for c in filter_min_points(clouds, cfg["min_points"])}
        pairs = [p for p in pairs if p[0] in kept]
    species_of = {r.tag: r.species for r in records}
    classes = group_species([species_of[tag] for _, tag in pairs], cfg["top_k"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_match_report(pairs, species_of, classes, out)
    write_kv(_manifest_values(cfg), out.with_name(out.name + ".run.txt"))
    print(f"clouds={len(clouds)} records={len(records)} matched={len(result.pairs)} kept={len(pairs)} "
          f"ambiguous_cells={result.ambiguous_cells} unmatched_clouds={result.unmatched_clouds} "
          f"unmatched_records={result.unmatched_records} match_rate={result.match_rate:.4f}")
    print("classes: " + ", ".join(f"{i}={n}" for i, n in enumerate(classes.class_names)))
    return 0


def _scale_clouds(clouds, scaling: str, scale: float | None = None):
    clouds = [center(c) for c in clouds]
    if scaling == "unit":
        return [normalize_unit(c) for c in clouds], None
    if scaling != "global":
        raise ConfigMismatch(f"unknown scaling {scaling!r}")
    if scale is None:
        return rescale_global(clouds)
    return apply_scale(clouds, scale), scale


def cmd_project(cfg: dict) -> int:
    if cfg["mode"] not in MODES:
        raise ConfigMismatch(f"mode must be one of {MODES}")
    clouds = filter_min_points(read_manifest(cfg["manifest"]), cfg["min_points"])
    clouds, scale = _scale_clouds(clouds, cfg["scaling"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    clipped = 0
    for c in clouds:
        ps = project6(c, cfg["res"], cfg["extent"], cfg["mode"])
        clipped += ps.clipped
        write_projection_binary(ps, out / f"{c.id}.pctr")
        if cfg["previews"]:
            for view, r in zip(VIEWS, ps.views):
                write_pgm(r, out / f"{c.id}_{view}.pgm")
    write_kv({**_manifest_values(cfg), "scale": "" if scale is None else repr(scale)}, out / "run_manifest.txt")
    print(f"projected {len(clouds)} clouds at res {cfg['res']}; {clipped} point-views clamped to the border")
    return 0


def _labeled_clouds(manifest, match, min_points: int) -> LabeledDataset:
    rows = read_match_report(match)
    if not rows:
        raise FormatError(f"{match}: no matched clouds")
    k = max(r[2] for r in rows) + 1
    names = [f"class{i}" for i in range(k)]
    labels = {}
    for cid, _, idx, name in rows:
        names[idx] = name
        labels[cid] = idx
    clouds = filter_min_points(read_manifest(manifest), min_points)
    items = [Item(c.id, c, labels[c.id]) for c in clouds if c.id in labels]
    return LabeledDataset(items, names)


def _preprocess_settings(cfg: dict) -> dict:
    model = cfg["model"]
    scaling = cfg["scaling"]
    if scaling == "auto":
        scaling = "unit" if model == "baseline" else "global"
    fusion = cfg["fusion"]
    if fusion == "auto":
        fusion = None if model == "pctrees" else ("separate" if model == "baseline" else "channels")
    n_points = cfg["input_points"] or (128 if cfg["tiny"] else 1024)
    return {"scaling": scaling, "fusion": fusion, "input_points": n_points}


def _prepare(ds: LabeledDataset, model: str, pre: dict, cfg: dict, seed: int, scale):
    if model == "pctrees":
        return prepare_points(ds, pre["input_points"], seed, pre["scaling"], scale)
    return prepare_rasters(ds, cfg["res"], cfg["extent"], cfg["mode"], pre["scaling"], scale)


def _split(cfg: dict):
    ds = _labeled_clouds(cfg["manifest"], cfg["match"], cfg["min_points"])
    train, test = stratified_split(ds, cfg["split"], cfg["seed"])
    train = resample(train, cfg["resample"], cfg["seed"])
    return ds, train, test


def cmd_train(cfg: dict) -> int:
    if cfg["resample"] not in ("none", "up", "down"):
        raise ConfigMismatch("resample must be none, up or down")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    pre = _preprocess_settings(cfg)
    ds, train, test = _split(cfg)
    train_p, scale = _prepare(train, cfg["model"], pre, cfg, cfg["seed"], None)
    test_p, _ = _prepare(test, cfg["model"], pre, cfg, cfg["seed"] + 1, scale)
    tc = TrainConfig(batch_size=cfg["batch_size"], epochs=cfg["epochs"], lr=cfg["lr"], seed=cfg["seed"],
                     split_fraction=cfg["split"], model=cfg["model"], tiny=cfg["tiny"],
                     input_points=pre["input_points"] if cfg["model"] == "pctrees" else None,
                     fusion=pre["fusion"])
    model, reports = train_model(tc, train_p, test_p)

    T.save_checkpoint(out / "checkpoint.pctw", sorted(model.state_dict().items()))
    (out / "model.txt").write_text(config_text(model, cfg["model"]))
    write_metrics_csv(reports, out / "metrics.csv")
    write_timing_csv(reports, out / "timing.csv")
    notes = [f"split: stratified {cfg['split']:.2f}/{1 - cfg['split']:.2f}, seed {cfg['seed']}, "
             f"{len(train)} train / {len(test)} test items; resample={cfg['resample']}"]
    (out / "report.txt").write_text(format_report({cfg["model"]: reports[-1]}, ds.class_names, notes))
    write_kv({**_manifest_values(cfg), **pre, "fusion": pre["fusion"] or "",
              "scale": "" if scale is None else repr(scale),
              "class_names": ",".join(ds.class_names)}, out / "run_manifest.txt")
    last = reports[-1]
    print(f"epoch {last.epoch}: accuracy={last.overall_accuracy:.4f} auc={last.auc_macro_ovr:.4f} "
          f"train_seconds={last.wall_time:.1f}")
    return 0


def _load_run(run: Path) -> tuple[dict, str, object]:
    manifest = read_kv(run / "run_manifest.txt")
    name, model = model_from_config_text((run / "model.txt").read_text(), int(manifest.get("seed", 0)))
    model.load_state_dict(T.load_checkpoint(run / "checkpoint.pctw"))
    model.eval()
    return manifest, name, model


def _run_cfg(manifest: dict) -> dict:
    known = OPTIONS["train"]
    cfg = {k: known[k][0](manifest[k]) if manifest.get(k, "") != "" else known[k][1] for k in known}
    cfg["seed"] = int(manifest.get("seed", 0))
    return cfg


def cmd_eval(cfg: dict) -> int:
    results: dict[str, EvalReport] = {}
    class_names = None
    for run in [Path(r.strip()) for r in cfg["run"].split(",") if r.strip()]:
        manifest, name, model = _load_run(run)
        rc = _run_cfg(manifest)
        pre = {"scaling": manifest["scaling"], "input_points": int(manifest["input_points"])}
        scale = float(manifest["scale"]) if manifest.get("scale") else None
        ds, _, test = _split(rc)
        test_p, _ = _prepare(test, name, pre, rc, rc["seed"] + 1, scale)
        x = np.stack([np.asarray(it.data, dtype=np.float32) for it in test_p.items])
        k = len(ds.class_names)
        overall, per_class, auc, conf, _ = evaluate(model, x, test_p.labels, k, rc["batch_size"])
        rows = read_metrics_csv(run / "metrics.csv")
        timing = run / "timing.csv"
        seconds = sum(float(r["seconds"]) for r in read_metrics_csv(timing)) if timing.is_file() else float("nan")
        epoch = int(rows[-1]["epoch"]) if rows else 0
        results[name] = EvalReport(epoch, float("nan"), overall, per_class, auc, conf, seconds)
        class_names = ds.class_names
    text = format_report(results, class_names, ["Rows without measurements show only the reference values."])
    print(text, end="")
    if cfg["out"] is not None:
        out = Path(cfg["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        write_kv(_manifest_values(cfg), out.with_name(out.name + ".run.txt"))
    return 0


def cmd_predict(cfg: dict) -> int:
    run = Path(cfg["run"])
    manifest, name, model = _load_run(run)
    rc = _run_cfg(manifest)
    names = manifest["class_names"].split(",")
    scale = float(manifest["scale"]) if manifest.get("scale") else None
    clouds = filter_min_points(read_manifest(cfg["manifest"]), cfg["min_points"])
    ds = LabeledDataset([Item(c.id, c, 0) for c in clouds], names)
    pre = {"scaling": manifest["scaling"], "input_points": int(manifest["input_points"])}
    prepared, _ = _prepare(ds, name, pre, rc, cfg["seed"], scale)
    x = np.stack([np.asarray(it.data, dtype=np.float32) for it in prepared.items])
    probs = predict_proba(model, x, rc["batch_size"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cloud_id", "class_index", "class_name", "probability"])
        for it, p in zip(prepared.items, probs):
            k = int(p.argmax())
            w.writerow([it.id, k, names[k], f"{p[k]:.6f}"])
    write_kv(_manifest_values(cfg), out.with_name(out.name + ".run.txt"))
    print(f"predicted {len(prepared)} clouds -> {out}")
    return 0


COMMANDS = {"synth": cmd_synth, "match": cmd_match, "project": cmd_project, "train": cmd_train,
            "eval": cmd_eval, "predict": cmd_predict}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args.command, args)
        logging.basicConfig(level=logging.INFO if cfg["verbose"] else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](cfg)
    except PCTreesError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
    except (OSError, UnicodeDecodeError) as exc:
        print(f"error: IO: {exc}", file=sys.stderr)
    except (ValueError, KeyError) as exc:
        print(f"error: Config: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
