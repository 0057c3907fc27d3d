"""Command-line pipeline: truth generation, observation simulation, reconstruction, evaluation."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import VelocityField, geostrophic_currents
from .eddylab import LnamParams, detect, match_days, property_errors, scores, track, write_eddies
from .evalmetrics import EvalReport, along_track_rmse, evaluate_fields, window_profile
from .gridcore import Field, GridError, GridSpec, read_field, read_tracks, write_field, write_tracks
from .interp import OiEngine, OiParams, VarEngine, VarParams, WindowPlan, nearest_baseline, run_windows
from .objective import DerivNorm, NoConstraintError, leave_one_satellite
from .obssim import SshObsParams, SstObsParams, inclined_tracks, simulate_ssh_obs, simulate_sst_obs, synthetic_cloud_cover
from .truthgen import TruthConfig, generate_truth, gulf_stream_spec, read_truth, write_truth

DATA_ROOT_ENV = "SSHRECON_DATA_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(Exception):
    pass


class UsageError(Exception):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "truth": {"n": 64, "nt": 63},
    "obs": {"n_sat": 3, "passes_per_day": 1, "sigma_noise": 0.019, "hold_out_sat": None, "sst": True,
            "cloud_fraction": 0.5, "sst_params": {}},
    "reconstruct": {"engine": "var", "n_ensemble": 1, "seeds": None, "profile": False,
                    "plan": {}, "oi": {"length_scale_km": 80.0, "time_scale_days": 20.0, "max_neighbors": 64},
                    "var": {"smooth_weight": 3.0, "time_weight": 3000.0, "max_iters": 600}},
    "evaluate": {"region": None, "threshold": 1.0, "units": "deg", "detect": True, "lnam": {},
                 "bin_edges": [0.0, 30.0, 60.0, 90.0, 1e9]},
}


# --------------------------------------------------------------------------- config and manifest


# sections handed to a parameter dataclass, which checks the keys itself
OPEN_SECTIONS = {"truth.", "obs.sst_params.", "reconstruct.plan.", "reconstruct.oi.", "reconstruct.var.", "evaluate.lnam."}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = dict(base)
    for k, v in over.items():
        if k not in base and where not in OPEN_SECTIONS:
            raise ConfigError(f"unknown config key {where}{k}")
        if isinstance(base.get(k), dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path is None:
        return cfg
    try:
        with open(path) as fh:
            user = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    return _merge(cfg, user)


def _dataclass(cls, d: dict, **extra):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**{**d, **extra})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from None


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _versions() -> dict:
    import scipy
    import skimage

    return {"sshrecon": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "scikit-image": skimage.__version__, "python": platform.python_version()}


def write_manifest(out: Path, command: str, cfg: dict, seeds: dict, inputs: list, started: float) -> Path:
    outputs = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    man = {
        "command": command,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "seeds": seeds,
        "versions": _versions(),
        "inputs": [str(p) for p in inputs],
        "outputs": {str(p.relative_to(out)): _sha256(p) for p in outputs},
        "timing": {"seconds": time.perf_counter() - started},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


def _resolve(p: str | None) -> Path | None:
    if p is None:
        return None
    path = Path(p)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _need_dir(p: Path, what: str) -> Path:
    if not p.is_dir():
        raise UsageError(f"{what} directory {p} not found")
    return p


def _grid(cfg: dict) -> GridSpec:
    t = cfg["truth"]
    return gulf_stream_spec(int(t.get("n", 64)), int(t.get("nt", 63)))


def _truth_config(cfg: dict) -> TruthConfig:
    t = {k: v for k, v in cfg["truth"].items() if k not in ("n", "nt")}
    for k in ("radius_range", "amplitude_range", "drift_speed_range"):
        if k in t:
            t[k] = tuple(t[k])
    return _dataclass(TruthConfig, t, spec=_grid(cfg), seed=int(cfg["seed"]))


# --------------------------------------------------------------------------- commands


def cmd_generate_truth(args, cfg: dict) -> int:
    started = time.perf_counter()
    tc = _truth_config(cfg)
    out = _resolve(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ssh, sst, vel = generate_truth(tc)
    write_truth(out, ssh, sst, vel)
    write_manifest(out, "generate-truth", cfg, {"truth": tc.seed}, [], started)
    return EXIT_OK


def cmd_simulate_obs(args, cfg: dict) -> int:
    started = time.perf_counter()
    o = cfg["obs"]
    truth_dir = _need_dir(_resolve(args.truth), "truth")
    ssh, sst, _ = read_truth(truth_dir)
    seed = int(cfg["seed"])
    support = inclined_tracks(ssh.spec, n_sat=int(o["n_sat"]), passes_per_day=int(o["passes_per_day"]), seed=seed)
    obs = simulate_ssh_obs(ssh, support, _dataclass(SshObsParams, {"sigma_noise": float(o["sigma_noise"])}, seed=seed))
    out = _resolve(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.json").write_text(json.dumps(ssh.spec.to_dict(), indent=2, sort_keys=True) + "\n")
    write_tracks(out / "tracks.csv", obs)
    held = o["hold_out_sat"]
    if held is not None:
        inp, _ = leave_one_satellite(obs, int(held))
        write_tracks(out / "input.csv", inp)
        write_tracks(out / "held_out.csv", obs.select(obs.sat_id == int(held)))
    if o["sst"]:
        cloud = synthetic_cloud_cover(sst.spec, seed, float(o["cloud_fraction"]))
        sp = _dataclass(SstObsParams, dict(o["sst_params"]), seed=seed)
        write_field(out / "sst_obs", simulate_sst_obs(sst, cloud, sp))
        write_field(out / "cloud", cloud)
    write_manifest(out, "simulate-obs", cfg, {"tracks": seed, "noise": seed}, [truth_dir], started)
    return EXIT_OK


def _read_obs_dir(obs_dir: Path) -> tuple[GridSpec, object]:
    side = obs_dir / "grid.json"
    if not side.exists():
        raise UsageError(f"{side} not found")
    spec = GridSpec.from_dict(json.loads(side.read_text()))
    name = "input.csv" if (obs_dir / "input.csv").exists() else "tracks.csv"
    return spec, read_tracks(obs_dir / name)


def cmd_reconstruct(args, cfg: dict) -> int:
    started = time.perf_counter()
    r = cfg["reconstruct"]
    obs_dir = _need_dir(_resolve(args.obs), "observation")
    spec, obs = _read_obs_dir(obs_dir)
    plan = _dataclass(WindowPlan, r["plan"])
    oi = _dataclass(OiParams, r["oi"])
    out = _resolve(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_ens = int(r["n_ensemble"])
    seeds = list(range(int(cfg["seed"]), int(cfg["seed"]) + n_ens)) if r["seeds"] is None else [int(s) for s in r["seeds"]]
    engine_name = r["engine"]
    if engine_name == "baseline":
        write_field(out / "estimate", nearest_baseline(obs, spec))
        write_manifest(out, "reconstruct", cfg, {"ensemble": []}, [obs_dir], started)
        return EXIT_OK
    if engine_name == "oi":
        engine = OiEngine(oi)
    elif engine_name == "var":
        vp = _dataclass(VarParams, r["var"])
        norm = DerivNorm.from_tracks(obs)
        (out / "norm.json").write_text(json.dumps(norm.to_dict(), indent=2, sort_keys=True) + "\n")
        engine = VarEngine(vp, oi, norm)
    else:
        raise ConfigError(f"unknown engine {engine_name!r}")
    res = run_windows(obs, spec, plan, engine, n_ens, seeds, bool(r["profile"]))
    write_field(out / "estimate", res.stitched)
    write_field(out / "central", res.central)
    if n_ens > 1:
        for m, f in enumerate(res.members):
            write_field(out / f"member_{m}", f)
    if engine_name == "var":
        tdir = out / "traces"
        tdir.mkdir(exist_ok=True)
        for k, tr in enumerate(engine.traces):
            tr.to_csv(tdir / f"trace_{k // n_ens:03d}_{k % n_ens}.csv")
    if res.offsets is not None:
        np.save(out / "offsets.npy", res.offsets)
        (out / "starts.json").write_text(json.dumps([int(s) for s in res.starts]) + "\n")
    write_manifest(out, "reconstruct", cfg, {"ensemble": seeds}, [obs_dir], started)
    return EXIT_OK


def _field_arg(p: str) -> Field:
    path = _resolve(p)
    if path.is_dir():
        path = path / "estimate"
    try:
        return read_field(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None


def _detect_days(ssh: Field, vel: VelocityField | None, p: LnamParams, workers: int) -> list:
    vel = geostrophic_currents(ssh) if vel is None else vel
    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        return list(ex.map(lambda k: detect(ssh, vel, p, k=k), range(ssh.spec.nt)))


def _truth_window(truth: Field, est: Field) -> tuple[Field, slice]:
    k0 = int(round((est.spec.t0 - truth.spec.t0) / truth.spec.dt))
    if k0 < 0 or k0 + est.spec.nt > truth.spec.nt or not truth.spec.same_space(est.spec):
        raise GridError("estimate does not lie inside the truth record")
    return truth.subset_time(k0, k0 + est.spec.nt), slice(k0, k0 + est.spec.nt)


def cmd_evaluate(args, cfg: dict) -> int:
    started = time.perf_counter()
    e = cfg["evaluate"]
    out = _resolve(args.out)
    ests = []
    for item in args.est:
        name, _, path = item.rpartition("=")
        ests.append((name or f"est{len(ests)}", _field_arg(path)))
    held = read_tracks(_resolve(args.held_out)) if args.held_out else None
    inputs = [str(x) for x in args.est]
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if args.tracks_only:
        if held is None:
            raise UsageError("--tracks-only needs --held-out")
        for name, est in ests:
            rep = EvalReport(along_track_rmse=along_track_rmse(held.in_time(est.spec.t0 - 0.5, est.spec.t_max + 0.5), est))
            rep.write_json(out / f"report_{name}.json")
            rows.append({"engine": name, "along_track_rmse": rep.along_track_rmse})
    else:
        if args.truth is None:
            raise UsageError("evaluate needs --truth unless --tracks-only is given")
        truth_dir = _need_dir(_resolve(args.truth), "truth")
        ssh, _, vel = read_truth(truth_dir)
        inputs.append(str(truth_dir))
        region = tuple(e["region"]) if e["region"] is not None else None
        lp = _dataclass(LnamParams, e["lnam"])
        truth_eddies = {}
        for name, est in ests:
            t_ssh, ks = _truth_window(ssh, est)
            t_vel = VelocityField(vel.u.subset_time(ks.start, ks.stop), vel.v.subset_time(ks.start, ks.stop))
            h = held.in_time(est.spec.t0 - 0.5, est.spec.t_max + 0.5) if held is not None else None
            rep = evaluate_fields(t_ssh, est, t_vel, h, region, float(e["threshold"]), e["units"])
            if e["detect"]:
                key = (ks.start, ks.stop)
                if key not in truth_eddies:
                    truth_eddies[key] = track(_detect_days(t_ssh, t_vel, lp, args.workers))
                    write_eddies(out / f"truth_eddies_{ks.start}_{ks.stop}.jsonl", [x for d in truth_eddies[key] for x in d])
                est_days = track(_detect_days(est, None, lp, args.workers))
                write_eddies(out / f"eddies_{name}.jsonl", [x for d in est_days for x in d])
                mr = match_days(truth_eddies[key], est_days)
                p, rc, f1 = scores(mr)
                rep.detection = {"precision": p, "recall": rc, "f1": f1, "n_truth": mr.n_truth, "n_est": mr.n_est,
                                 "excluded_multi": mr.excluded_multi,
                                 "errors": property_errors(mr, "radius", e["bin_edges"])}
            rep.write_json(out / f"report_{name}.json")
            rep.write_daily_csv(out / f"daily_{name}.csv", est.spec.times)
            row = {k: v for k, v in asdict(rep).items() if k not in ("daily_rmse", "detection")}
            if rep.detection:
                row.update({k: rep.detection[k] for k in ("precision", "recall", "f1")})
            rows.append({"engine": name, **row})
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    write_manifest(out, "evaluate", cfg, {}, inputs, started)
    return EXIT_OK


def cmd_profile_window(args, cfg: dict) -> int:
    started = time.perf_counter()
    truth_dir = _need_dir(_resolve(args.truth), "truth")
    rec_dir = _need_dir(_resolve(args.recon), "reconstruction")
    if not (rec_dir / "offsets.npy").exists():
        raise UsageError(f"{rec_dir} holds no per-offset fields; reconstruct with profile enabled")
    ssh, _, _ = read_truth(truth_dir)
    offsets = np.load(rec_dir / "offsets.npy")
    starts = json.loads((rec_dir / "starts.json").read_text())
    prof = window_profile(ssh, offsets, starts)
    out = _resolve(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "profile.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["offset", "delay_days", "rmse"])
        for o, d, r in zip(prof.offsets, prof.delay_days, prof.rmse):
            w.writerow([int(o), int(d), "" if np.isnan(r) else repr(float(r))])
    summary = {"argmin": prof.argmin, "gaps": prof.gaps}
    (out / "profile.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "profile-window", cfg, {}, [truth_dir, rec_dir], started)
    return EXIT_OK


def cmd_detect_eddies(args, cfg: dict) -> int:
    started = time.perf_counter()
    ssh = _field_arg(args.ssh)
    lp = _dataclass(LnamParams, cfg["evaluate"]["lnam"])
    days = track(_detect_days(ssh, None, lp, args.workers), args.max_jump_km, args.max_gap_days)
    out = _resolve(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_eddies(out / "eddies.jsonl", [x for d in days for x in d])
    write_manifest(out, "detect-eddies", cfg, {}, [args.ssh], started)
    return EXIT_OK


# --------------------------------------------------------------------------- entry point


def _apply_overrides(args, cfg: dict) -> dict:
    cfg = json.loads(json.dumps(cfg))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "hold_out_sat", None) is not None:
        cfg["obs"]["hold_out_sat"] = args.hold_out_sat
    if getattr(args, "sigma", None) is not None:
        cfg["obs"]["sigma_noise"] = args.sigma
    if getattr(args, "no_sst", False):
        cfg["obs"]["sst"] = False
    r = cfg["reconstruct"]
    for flag, key in (("engine", "engine"), ("n_ensemble", "n_ensemble")):
        if getattr(args, flag, None) is not None:
            r[key] = getattr(args, flag)
    if getattr(args, "profile", False):
        r["profile"] = True
    for flag in ("loss_kind", "lambda1", "lambda2", "max_iters"):
        if getattr(args, flag, None) is not None:
            r["var"][flag] = getattr(args, flag)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sshrecon", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config; missing keys take defaults")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True)
        return p

    p = common(sub.add_parser("generate-truth", help="synthetic SSH, SST and currents"))
    p.set_defaults(func=cmd_generate_truth)

    p = common(sub.add_parser("simulate-obs", help="along-track SSH and cloudy SST observations"))
    p.add_argument("--truth", required=True)
    p.add_argument("--hold-out-sat", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--no-sst", action="store_true")
    p.set_defaults(func=cmd_simulate_obs)

    p = common(sub.add_parser("reconstruct", help="windowed gridding of the tracks"))
    p.add_argument("--obs", required=True)
    p.add_argument("--engine", choices=("oi", "var", "baseline"))
    p.add_argument("--loss-kind", choices=("unsup", "unsup_reg"))
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--n-ensemble", type=int)
    p.add_argument("--profile", action="store_true", help="keep every in-window offset")
    p.set_defaults(func=cmd_reconstruct)

    p = common(sub.add_parser("evaluate", help="score estimates against truth or held-out tracks"))
    p.add_argument("--truth")
    p.add_argument("--est", action="append", required=True, help="NAME=PATH, repeatable")
    p.add_argument("--held-out")
    p.add_argument("--tracks-only", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("profile-window", help="RMSE against in-window position"))
    p.add_argument("--truth", required=True)
    p.add_argument("--recon", required=True)
    p.set_defaults(func=cmd_profile_window)

    p = common(sub.add_parser("detect-eddies", help="eddy detection and tracking on an SSH container"))
    p.add_argument("--ssh", required=True)
    p.add_argument("--max-jump-km", type=float, default=50.0)
    p.add_argument("--max-gap-days", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_detect_eddies)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(args, load_config(args.config))
        return args.func(args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, NoConstraintError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GridError, ValueError, KeyError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
