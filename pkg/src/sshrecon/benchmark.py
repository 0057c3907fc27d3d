"""Desk-scale observing system simulation: truth, tracks, leave-one-out split, engines and scores."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import VelocityField
from .evalmetrics import WindowProfile, along_track_rmse, window_profile
from .gridcore import Field, TrackSet
from .interp import OiEngine, OiParams, VarEngine, VarParams, WindowPlan, WindowResult, nearest_baseline, run_windows
from .objective import leave_one_satellite
from .obssim import SshObsParams, inclined_tracks, simulate_ssh_obs
from .truthgen import TruthConfig, generate_truth, gulf_stream_spec


@dataclass(frozen=True)
class DeskConfig:
    n: int = 64
    nt: int = 63
    n_sat: int = 3
    sigma_noise: float = 0.019
    held_out_sat: int = 2
    seed: int = 0
    oi: OiParams = OiParams(length_scale_km=80.0, time_scale_days=20.0, max_neighbors=64)
    var: VarParams = VarParams(smooth_weight=3.0, time_weight=3000.0, max_iters=600)
    plan: WindowPlan = WindowPlan()

    def truth_config(self) -> TruthConfig:
        return TruthConfig(spec=gulf_stream_spec(self.n, self.nt), seed=self.seed)


@dataclass
class Osse:
    cfg: DeskConfig
    ssh: Field
    vel: VelocityField
    obs: TrackSet  # every satellite
    inputs: TrackSet  # held-out satellite removed
    held_out: TrackSet


def build_osse(cfg: DeskConfig = DeskConfig()) -> Osse:
    ssh, _, vel = generate_truth(cfg.truth_config())
    support = inclined_tracks(ssh.spec, n_sat=cfg.n_sat, seed=cfg.seed)
    obs = simulate_ssh_obs(ssh, support, SshObsParams(cfg.sigma_noise, cfg.seed))
    inputs, _ = leave_one_satellite(obs, cfg.held_out_sat)
    held = obs.select(obs.sat_id == cfg.held_out_sat)
    return Osse(cfg, ssh, vel, obs, inputs, held)


@dataclass
class EngineRun:
    name: str
    central_rmse: float
    held_out_rmse: float
    seconds: float
    result: WindowResult | None = field(default=None, repr=False)
    estimate: Field | None = field(default=None, repr=False)  # full daily record


def central_days(osse: Osse) -> np.ndarray:
    plan = osse.cfg.plan
    return plan.starts(osse.ssh.spec.nt) + plan.center_index


def _rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _stitched_days(osse: Osse, res: WindowResult) -> tuple[Field, np.ndarray]:
    first = int(res.starts[0])
    return res.stitched, np.arange(first, first + res.stitched.spec.nt)


def run_baseline(osse: Osse) -> EngineRun:
    t = time.perf_counter()
    est = nearest_baseline(osse.inputs, osse.ssh.spec)
    cd = central_days(osse)
    return EngineRun("baseline", _rmse(est.values[cd], osse.ssh.values[cd]),
                     along_track_rmse(osse.held_out, est), time.perf_counter() - t, estimate=est)


def run_engine(osse: Osse, name: str, engine, seeds=(0,), profile: bool = False) -> EngineRun:
    """Windowed reconstruction scored on the window centres and on the held-out satellite."""
    t = time.perf_counter()
    res = run_windows(osse.inputs, osse.ssh.spec, osse.cfg.plan, engine, len(seeds), list(seeds), profile)
    cd = central_days(osse)
    stitched, days = _stitched_days(osse, res)
    lo, hi = stitched.spec.t0 - 0.5, stitched.spec.t_max + 0.5
    held = osse.held_out.in_time(lo, hi)
    return EngineRun(name, _rmse(res.central.values, osse.ssh.values[cd]), along_track_rmse(held, stitched),
                     time.perf_counter() - t, result=res, estimate=stitched)


def oi_engine(cfg: DeskConfig) -> OiEngine:
    return OiEngine(cfg.oi)


def var_engine(cfg: DeskConfig, loss_kind: str, cache: dict | None = None) -> VarEngine:
    eng = VarEngine(replace(cfg.var, loss_kind=loss_kind), cfg.oi)
    if cache is not None:
        eng._cache = cache
    return eng


def profile_of(osse: Osse, run: EngineRun) -> WindowProfile:
    res = run.result
    if res is None or res.offsets is None:
        raise ValueError("run was not profiled")
    return window_profile(osse.ssh, res.offsets, res.starts)
