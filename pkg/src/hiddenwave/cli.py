"""Command-line pipeline.

Subcommands: simulate, invert-fd, invert-ipinn, train-bhpm, transfer-bhpm,
report. Structured settings come from JSON config files (experiments are
archived artifacts); flags cover only paths and overrides. Every command
writes a provenance JSON before any work starts, so aborted runs stay
diagnosable. Exit codes: 0 success, 2 config/input error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from . import __version__, bhpm, dataio, ipinn, viz, wavesim
from . import autodiff as ad
from . import checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

OUT_ROOT_ENV = "HIDDENWAVE_OUT_ROOT"


class ConfigError(ValueError):
    pass


# -- config plumbing -----------------------------------------------------------


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")


def _dataclass_from(doc, cls, where):
    """Build a dataclass from a JSON object, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in dc_fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    coerced = dict(doc)
    for key in ("betas", "u_widths", "a_widths", "v_widths"):
        if key in coerced and isinstance(coerced[key], list):
            coerced[key] = tuple(coerced[key])
    try:
        return cls(**coerced)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}")


def parse_spec(doc):
    if not isinstance(doc, dict):
        raise ConfigError("spec: expected an object")
    doc = dict(doc)
    source = doc.pop("source", None)
    inclusions = doc.pop("inclusions", [])
    spec = _dataclass_from(doc, dataio.SyntheticSpec, "spec")
    if source is not None:
        spec.source = _dataclass_from(source, dataio.SourceSpec, "spec.source")
    spec.inclusions = [tuple(i) for i in inclusions]
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"spec: {exc}")
    return spec


def parse_window(doc):
    if doc is None:
        return None
    try:
        return dataio.Window(x=tuple(doc["x"]), y=tuple(doc["y"]), t=tuple(doc["t"]))
    except KeyError as exc:
        raise ConfigError(f"window: missing range {exc}")
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"window: {exc}")


def _resolve_out(cfg, override):
    out = override or cfg.get("out")
    if out is None:
        raise ConfigError("no output directory: set \"out\" in the config or pass --out")
    root = os.environ.get(OUT_ROOT_ENV)
    path = Path(root) / out if root and not Path(out).is_absolute() else Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_provenance(out_dir, cfg, command):
    doc = {"command": command, "version": __version__,
           "config": cfg, "written_at": time.strftime("%Y-%m-%dT%H:%M:%S")}
    with open(out_dir / "provenance.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)


def _write_csv(path, rows, columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row.get(c, "") for c in columns])


def _write_summary(out_dir, **kv):
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(kv, fh, indent=2)


def _load_windowed(cfg):
    try:
        ds = dataio.load(cfg["dataset"])
    except KeyError:
        raise ConfigError("missing required field \"dataset\"")
    except (FileNotFoundError, dataio.FormatError) as exc:
        raise ConfigError(f"dataset: {exc}")
    w = parse_window(cfg.get("window"))
    if w is not None:
        try:
            ds = dataio.window(ds, w)
        except ValueError as exc:
            raise ConfigError(f"window: {exc}")
    return ds


def _snapshot_indices(cfg, nt):
    fracs = cfg.get("snapshots", [0.25, 0.5, 0.75])
    return sorted({min(nt - 1, max(0, int(round(f * (nt - 1))))) for f in fracs})


# -- flaw scoring ---------------------------------------------------------------


def iou(a, b):
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def bottom_decile_mask(field2d):
    f = np.asarray(field2d, dtype=np.float64)
    return f <= np.quantile(f, 0.1)


def truth_inclusion_mask(ds):
    """Inclusion-disk mask on the dataset grid, from generator metadata
    (None when the dataset has no recorded inclusions)."""
    incl = ds.metadata.get("inclusions")
    if not incl:
        return None
    x0, y0, _ = ds.origin
    jj, ii = np.meshgrid(np.arange(ds.nx), np.arange(ds.ny))
    xx = x0 + jj * ds.dx
    yy = y0 + ii * ds.dx
    m = np.zeros((ds.ny, ds.nx), dtype=bool)
    for cx, cy, rad, _f in incl:
        m |= (xx - cx) ** 2 + (yy - cy) ** 2 <= rad ** 2
    return m


def _flaw_iou(latent_map, ds):
    truth = truth_inclusion_mask(ds)
    if truth is None or not truth.any():
        return None
    return iou(bottom_decile_mask(latent_map), truth)


# -- commands ---------------------------------------------------------------------


def cmd_simulate(cfg, out_override):
    out = _resolve_out(cfg, out_override)
    _write_provenance(out, cfg, "simulate")
    spec = parse_spec(cfg.get("spec", {}))
    name = cfg.get("name", "dataset")
    t0 = time.perf_counter()
    ds, truth = dataio.synthesize(spec)
    dataio.save(ds, out / name)
    viz.save_heatmap(truth.values(), out / "truth_v.png", title="true wave speed (mm/us)")
    _write_summary(out, command="simulate", dataset=str(out / name),
                   nx=ds.nx, ny=ds.ny, nt=ds.nt, wall_time_s=time.perf_counter() - t0)
    print(f"wrote {out / name}.json / .raw ({ds.nx}x{ds.ny}x{ds.nt})")
    return EXIT_OK


def _observation_triptychs(out, ds, predicted, snap_idx, tag):
    for k in snap_idx:
        obs = np.asarray(ds.values[k], dtype=np.float64)
        pred = predicted[k]
        viz.save_triptych(
            [(obs, "observed"), (pred, "model"),
             (viz.log_abs_error(obs, pred), "log10 |error|")],
            out / f"{tag}_obs_t{k:04d}.png")


def cmd_invert_fd(cfg, out_override):
    out = _resolve_out(cfg, out_override)
    _write_provenance(out, cfg, "invert-fd")
    ds = _load_windowed(cfg)
    fd_cfg = _dataclass_from(cfg.get("fd", {}), wavesim.FdConfig, "fd")
    t0 = time.perf_counter()
    vel, losses = wavesim.calibrate_fd(ds, fd_cfg)
    wall = time.perf_counter() - t0

    checkpoint.save_arrays(out / "velocity.ckpt", {"kind": "velocity"},
                           [("latent", vel.latent.data)])
    _write_csv(out / "metrics.csv",
               [{"step": i, "loss": l} for i, l in enumerate(losses)],
               ["step", "loss"])
    vmap = vel.values()
    viz.save_heatmap(vmap, out / "v_field.png", title="recovered wave speed (mm/us)")
    predicted = wavesim.predict_frames(ds, vel, substep=fd_cfg.substep)
    _observation_triptychs(out, ds, predicted, _snapshot_indices(cfg, ds.nt), "fd")
    obs_rmse = float(np.sqrt(np.mean((predicted - np.asarray(ds.values, dtype=np.float64)) ** 2)))
    _write_summary(out, command="invert-fd", obs_rmse=obs_rmse,
                   final_loss=float(losses[-1]), flaw_iou=_flaw_iou(vmap, ds),
                   wall_time_s=wall)
    print(f"invert-fd done: obs_rmse {obs_rmse:.4g}")
    return EXIT_OK


def _physics_triptychs(out, leaf_or_model, predictor, ds, snap_idx, tag):
    """Rows u_tt / model / log10 error on the window grid at snapshots."""
    norm = dataio.normalize(ds)
    nt, ny, nx = norm.values.shape
    xs = np.linspace(-1.0, 1.0, nx)
    ys = np.linspace(-1.0, 1.0, ny)
    ts = np.linspace(-1.0, 1.0, nt)
    for k in snap_idx:
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        coords = np.stack([xx.reshape(-1), yy.reshape(-1),
                           np.full(ny * nx, ts[k])], axis=1)
        u_tt, model_rhs = predictor(coords)
        u_tt = u_tt.reshape(ny, nx)
        model_rhs = model_rhs.reshape(ny, nx)
        viz.save_triptych(
            [(u_tt, "u_tt"), (model_rhs, "model physics"),
             (viz.log_abs_error(u_tt, model_rhs), "log10 |residual|")],
            out / f"{tag}_phys_t{k:04d}.png")


def _u_net_frames(leaf_like, ds, snap_idx):
    norm = dataio.normalize(ds)
    nt, ny, nx = norm.values.shape
    xs = np.linspace(-1.0, 1.0, nx)
    ys = np.linspace(-1.0, 1.0, ny)
    ts = np.linspace(-1.0, 1.0, nt)
    frames = {}
    with ad.no_grad(), ad.finite_checks(False):
        for k in snap_idx:
            yy, xx = np.meshgrid(ys, xs, indexing="ij")
            coords = np.stack([xx.reshape(-1), yy.reshape(-1),
                               np.full(ny * nx, ts[k])], axis=1)
            u = leaf_like.u_net.apply(ad.Tensor(coords)).data
            frames[k] = (u * norm.scale.value_std + norm.scale.value_mean).reshape(ny, nx)
    return frames


def _save_model_frames_triptychs(out, frames, ds, tag):
    for k, pred in frames.items():
        obs = np.asarray(ds.values[k], dtype=np.float64)
        viz.save_triptych(
            [(obs, "observed"), (pred, "model"),
             (viz.log_abs_error(obs, pred), "log10 |error|")],
            out / f"{tag}_obs_t{k:04d}.png")


def cmd_invert_ipinn(cfg, out_override):
    out = _resolve_out(cfg, out_override)
    _write_provenance(out, cfg, "invert-ipinn")
    ds = _load_windowed(cfg)
    icfg = _dataclass_from(cfg.get("ipinn", {}), ipinn.IpinnConfig, "ipinn")
    norm = dataio.normalize(ds)
    model = ipinn.IpinnModel.create(norm.scale, icfg)
    t0 = time.perf_counter()
    try:
        metrics = ipinn.train_ipinn(model, ds, icfg)
    except bhpm.TrainAbort as exc:
        _save_ipinn_model(out / "model.aborted.ckpt", model)
        print(f"numerical abort: {exc}; checkpoint at {out / 'model.aborted.ckpt'}",
              file=sys.stderr)
        return EXIT_NUMERIC
    wall = time.perf_counter() - t0

    _save_ipinn_model(out / "model.ckpt", model)
    _write_csv(out / "metrics.csv", [m for m in metrics if "loss" in m],
               ["step", "loss", "data_rmse", "phys_rms"])
    snap_idx = _snapshot_indices(cfg, ds.nt)
    frames = _u_net_frames(model, ds, snap_idx)
    _save_model_frames_triptychs(out, frames, ds, "ipinn")
    vmap = ipinn.v_field_map(model, ds.ny, ds.nx)
    viz.save_heatmap(vmap, out / "v_field.png", title="recovered wave speed (mm/us)")

    def predictor(coords):
        with ad.finite_checks(False):
            feats = bhpm.features(model.u_net, coords, scale=model.scale,
                                  create_graph=False)
            with ad.no_grad():
                v = model.v_net.apply(ad.Tensor(coords[:, :2])).data
        return feats.u_tt.data, v ** 2 * feats.psi.data[:, 2]

    _physics_triptychs(out, model, predictor, ds, snap_idx, "ipinn")
    rows = [m for m in metrics if "loss" in m]
    _write_summary(out, command="invert-ipinn",
                   obs_rmse=rows[-1]["data_rmse"], phys_rms=rows[-1]["phys_rms"],
                   flaw_iou=_flaw_iou(vmap, ds), wall_time_s=wall)
    print(f"invert-ipinn done: data_rmse {rows[-1]['data_rmse']:.4g}")
    return EXIT_OK


def _save_ipinn_model(path, model):
    arrays = [("u." + n, t.data) for n, t in model.u_net.params()]
    arrays += [("v." + n, t.data) for n, t in model.v_net.params()]
    checkpoint.save_arrays(path, {"kind": "ipinn",
                                  "u_arch": model.u_net.arch_header(),
                                  "v_arch": model.v_net.arch_header()}, arrays)


def _bhpm_outputs(out, cfg, ds, leaf, root, metrics, wall, command):
    leaf.save(out / "leaf.ckpt")
    root.save(out / "root.ckpt")
    rows = [m for m in metrics if "elbo" in m]
    _write_csv(out / "metrics.csv", rows, ["step", "elbo", "data_rmse", "phys_rms", "kl"])
    snap_idx = _snapshot_indices(cfg, ds.nt)
    frames = _u_net_frames(leaf, ds, snap_idx)
    _save_model_frames_triptychs(out, frames, ds, "bhpm")
    amap = bhpm.a_field_map(leaf, ds.ny, ds.nx)
    viz.save_heatmap(amap, out / "a_field.png", title="latent field a")

    def predictor(coords):
        with ad.finite_checks(False):
            feats = bhpm.leaf_features(leaf, coords, create_graph=False)
            with ad.no_grad():
                f_mean, _ = root.f.predict(feats.psi.data)
                a = leaf.a_net.apply(ad.Tensor(coords[:, :2])).data
        return feats.u_tt.data, a ** 2 * f_mean.data

    _physics_triptychs(out, leaf, predictor, ds, snap_idx, "bhpm")
    obs_rmse, phys_rms = bhpm.rms_metrics(leaf, root, ds)
    _write_summary(out, command=command, obs_rmse=obs_rmse, phys_rms=phys_rms,
                   flaw_iou=_flaw_iou(amap, ds), wall_time_s=wall)
    print(f"{command} done: obs_rmse {obs_rmse:.4g}, phys_rms {phys_rms:.4g}")


def cmd_train_bhpm(cfg, out_override):
    out = _resolve_out(cfg, out_override)
    _write_provenance(out, cfg, "train-bhpm")
    ds = _load_windowed(cfg)
    tcfg = _dataclass_from(cfg.get("train", {}), bhpm.TrainConfig, "train")
    norm = dataio.normalize(ds)
    leaf = bhpm.Leaf.create(norm.scale, tcfg, experiment_id=cfg.get("name", "train"))
    root = bhpm.Root.create(tcfg)
    t0 = time.perf_counter()
    try:
        metrics = bhpm.train(leaf, root, ds, tcfg)
    except bhpm.TrainAbort as exc:
        leaf.save(out / "leaf.aborted.ckpt")
        root.save(out / "root.aborted.ckpt")
        print(f"numerical abort: {exc}; checkpoints at {out / 'leaf.aborted.ckpt'}",
              file=sys.stderr)
        return EXIT_NUMERIC
    _bhpm_outputs(out, cfg, ds, leaf, root, metrics,
                  time.perf_counter() - t0, "train-bhpm")
    return EXIT_OK


def cmd_transfer_bhpm(cfg, out_override):
    out = _resolve_out(cfg, out_override)
    _write_provenance(out, cfg, "transfer-bhpm")
    ds = _load_windowed(cfg)
    tcfg = _dataclass_from(cfg.get("train", {}), bhpm.TrainConfig, "train")
    try:
        root = bhpm.Root.load(cfg["root_checkpoint"])
    except KeyError:
        raise ConfigError("missing required field \"root_checkpoint\"")
    except (FileNotFoundError, checkpoint.CheckpointError) as exc:
        raise ConfigError(f"root_checkpoint: {exc}")
    t0 = time.perf_counter()
    try:
        leaf, metrics = bhpm.transfer(root, ds, tcfg,
                                      experiment_id=cfg.get("name", "transfer"))
    except bhpm.TrainAbort as exc:
        root.save(out / "root.aborted.ckpt")
        print(f"numerical abort: {exc}; checkpoint at {out / 'root.aborted.ckpt'}",
              file=sys.stderr)
        return EXIT_NUMERIC
    _bhpm_outputs(out, cfg, ds, leaf, root, metrics,
                  time.perf_counter() - t0, "transfer-bhpm")
    return EXIT_OK


def cmd_report(run_dirs, out_path):
    rows = []
    for run in run_dirs:
        summary = Path(run) / "summary.json"
        if not summary.exists():
            raise ConfigError(f"no summary.json in run directory {run}")
        with open(summary, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        rows.append({
            "run": str(run),
            "obs_rmse": doc.get("obs_rmse", ""),
            "phys_rms": doc.get("phys_rms", ""),
            "flaw_iou": doc.get("flaw_iou", ""),
            "wall_time_s": doc.get("wall_time_s", ""),
        })
    _write_csv(out_path, rows, ["run", "obs_rmse", "phys_rms", "flaw_iou", "wall_time_s"])
    print(f"wrote {out_path} ({len(rows)} runs)")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="hiddenwave",
                                description="Wavefield inversion and physics discovery pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "invert-fd", "invert-ipinn", "train-bhpm", "transfer-bhpm"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--out", default=None, help="output directory (overrides config)")
    rp = sub.add_parser("report")
    rp.add_argument("--runs", nargs="*", default=[], help="run directories")
    rp.add_argument("--out", required=True, help="summary CSV path")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    handlers = {
        "simulate": cmd_simulate,
        "invert-fd": cmd_invert_fd,
        "invert-ipinn": cmd_invert_ipinn,
        "train-bhpm": cmd_train_bhpm,
        "transfer-bhpm": cmd_transfer_bhpm,
    }
    try:
        if args.command == "report":
            return cmd_report(args.runs, args.out)
        cfg = load_config(args.config)
        return handlers[args.command](cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except wavesim.DivergenceError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
