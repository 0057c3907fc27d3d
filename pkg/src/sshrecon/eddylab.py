"""Eddy detection from LNAM and SSH level sets, tracking, matching and scores.

Centres are strict extrema of the Local Normalised Angular Momentum above a
threshold. Each centre gets a characteristic contour: among closed SSH level
sets that enclose this centre and no other, the one with the largest mean
geostrophic speed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage
from skimage import measure

from .dynamics import DEFAULT_CONSTS, PhysConsts, VelocityField, geostrophic_currents
from .gridcore import M_PER_DEG, Field, GridError, GridSpec, bilinear_slice

CYCLONE = "cyclone"
ANTICYCLONE = "anticyclone"


@dataclass(frozen=True)
class LnamParams:
    neighborhood_half_width: int = 2
    center_threshold: float = 0.7
    n_levels: int = 30
    min_radius_px: float = 2.0  # smaller characteristic contours are discarded
    min_amplitude_m: float = 0.01  # |extremum - contour level| below this is discarded

    def __post_init__(self):
        if self.neighborhood_half_width < 1:
            raise ValueError("neighborhood_half_width must be >= 1")
        if not 0 < self.center_threshold <= 1:
            raise ValueError("center_threshold must lie in (0, 1]")
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")
        if self.min_radius_px < 0 or self.min_amplitude_m < 0:
            raise ValueError("min_radius_px and min_amplitude_m must be >= 0")


@dataclass(frozen=True)
class Eddy:
    polarity: str
    center: tuple[float, float]  # (lat, lon)
    barycenter: tuple[float, float]
    contour: np.ndarray = field(repr=False)  # (n, 2) closed polyline of (lat, lon)
    mean_radius: float  # km
    max_radius: float  # km
    max_velocity: float  # m/s
    t: float
    track_id: int = -1
    lifetime: int = 1
    amplitude: float = 0.0  # m, extremum minus contour level, signed by polarity

    def to_dict(self) -> dict:
        d = asdict(self)
        d["contour"] = np.asarray(self.contour).tolist()
        d["center"] = list(self.center)
        d["barycenter"] = list(self.barycenter)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Eddy:
        d = dict(d)
        d["contour"] = np.asarray(d["contour"], dtype=np.float64).reshape(-1, 2)
        d["center"] = tuple(d["center"])
        d["barycenter"] = tuple(d["barycenter"])
        return cls(**d)


def write_eddies(path, eddies) -> None:
    with open(path, "w") as fh:
        for e in eddies:
            fh.write(json.dumps(e.to_dict()) + "\n")


def read_eddies(path) -> list[Eddy]:
    with open(path) as fh:
        return [Eddy.from_dict(json.loads(line)) for line in fh if line.strip()]


# --------------------------------------------------------------------------- LNAM


def lnam_slice(u: np.ndarray, v: np.ndarray, spec: GridSpec, h: int = 2) -> np.ndarray:
    """LNAM of one velocity slice; cells closer than ``h`` to the border are 0."""
    ny, nx = u.shape
    if ny < 2 * h + 1 or nx < 2 * h + 1:
        raise GridError("grid smaller than the LNAM neighbourhood")
    core = (slice(h, ny - h), slice(h, nx - h))
    dx_m = spec.dlon * M_PER_DEG * np.cos(np.deg2rad(spec.lats[h:ny - h]))[:, None]
    dy_m = spec.dlat * M_PER_DEG
    L = np.zeros((ny - 2 * h, nx - 2 * h))
    S = np.zeros_like(L)
    B = np.zeros_like(L)
    for di in range(-h, h + 1):
        for dj in range(-h, h + 1):
            if di == 0 and dj == 0:
                continue
            uj = u[h + di:ny - h + di, h + dj:nx - h + dj]
            vj = v[h + di:ny - h + di, h + dj:nx - h + dj]
            x = dj * dx_m
            y = -di * dy_m  # rows run south
            L += x * vj - y * uj
            S += x * uj + y * vj
            B += np.hypot(x, y) * np.hypot(uj, vj)
    den = S + B
    out = np.zeros((ny, nx))
    out[core] = np.divide(L, den, out=np.zeros_like(L), where=den != 0)
    return out


def lnam(vel: VelocityField, p: LnamParams = LnamParams()) -> Field:
    spec = vel.spec
    vals = np.stack([lnam_slice(vel.u.values[k], vel.v.values[k], spec, p.neighborhood_half_width)
                     for k in range(spec.nt)])
    return Field(spec, vals, "dimensionless")


def lnam_centers(lam: np.ndarray, threshold: float, h: int = 2) -> list[tuple[int, int]]:
    """Strict 8-neighbour extrema with ``|LNAM| > threshold``; plateaus keep the first pixel."""
    ny, nx = lam.shape
    found = []
    for sign in (1.0, -1.0):
        a = sign * lam
        pad = np.pad(a, 1, constant_values=-np.inf)
        ok = a > threshold
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di == 0 and dj == 0:
                    continue
                nb = pad[1 + di:1 + di + ny, 1 + dj:1 + dj + nx]
                # neighbours earlier in row-major order must be strictly lower
                earlier = di < 0 or (di == 0 and dj < 0)
                ok &= (a > nb) if earlier else (a >= nb)
        ok[:h, :] = ok[-h:, :] = False
        ok[:, :h] = ok[:, -h:] = False
        found.extend(zip(*np.nonzero(ok)))
    return sorted((int(i), int(j)) for i, j in found)


# --------------------------------------------------------------------------- contours


def _component(mask: np.ndarray, seed: tuple[int, int]) -> np.ndarray | None:
    if not mask[seed]:
        return None
    lab, _ = ndimage.label(mask)
    return lab == lab[seed]


def _level_ok(h: np.ndarray, sign: float, level: float, seed, others: np.ndarray) -> bool:
    """Region ``sign*(h - level) > 0`` around ``seed`` is closed and holds no other centre."""
    comp = _component(sign * (h - level) > 0, seed)
    if comp is None:
        return False
    if comp[0].any() or comp[-1].any() or comp[:, 0].any() or comp[:, -1].any():
        return False
    return not (others.size and comp[others[:, 0], others[:, 1]].any())


def _saddle_level(h, sign, seed, others, n_iter: int = 48) -> float | None:
    top = h[seed]
    lo = float(np.min(sign * h)) * sign  # the far end of the range is never closed
    inner = top - sign * 1e-12 * max(1.0, abs(top))
    if not _level_ok(h, sign, inner, seed, others):
        return None
    good, bad = inner, lo
    for _ in range(n_iter):
        mid = 0.5 * (good + bad)
        if _level_ok(h, sign, mid, seed, others):
            good = mid
        else:
            bad = mid
    return good


def _polygon_metrics(rows, cols, spec: GridSpec, lat_c: float, lon_c: float):
    lat = spec.lat0 - rows * spec.dlat
    lon = spec.lon0 + cols * spec.dlon
    coslat = math.cos(math.radians(lat_c))
    x = (lon - lon_c) * M_PER_DEG * coslat
    y = (lat - lat_c) * M_PER_DEG
    x0, y0, x1, y1 = x[:-1], y[:-1], x[1:], y[1:]
    cross = x0 * y1 - x1 * y0
    area2 = cross.sum()
    area = 0.5 * abs(area2)
    if area2 == 0:
        cx, cy = x.mean(), y.mean()
    else:
        cx = np.sum((x0 + x1) * cross) / (3 * area2)
        cy = np.sum((y0 + y1) * cross) / (3 * area2)
    bary = (lat_c + cy / M_PER_DEG, lon_c + cx / (M_PER_DEG * coslat))
    rmax = float(np.max(np.hypot(x, y)))
    return lat, lon, area, bary, rmax


def characteristic_contour(h: np.ndarray, speed: np.ndarray, seed, sign: float, others: np.ndarray, n_levels: int = 30):
    """Closed level set around ``seed`` with the largest mean speed, as (rows, cols, speed, level) or None."""
    top = h[seed]
    saddle = _saddle_level(h, sign, seed, others)
    if saddle is None:
        return None
    best, best_speed = None, -np.inf
    for k in range(1, n_levels + 1):
        level = top + (saddle - top) * k / n_levels
        comp = _component(sign * (h - level) > 0, seed)
        if comp is None or not _level_ok(h, sign, level, seed, others):
            continue
        ii, jj = np.nonzero(comp)
        r0, r1 = max(ii.min() - 1, 0), min(ii.max() + 2, h.shape[0])
        c0, c1 = max(jj.min() - 1, 0), min(jj.max() + 2, h.shape[1])
        # contour only the component so that neighbouring structures cannot interfere
        box = np.where(comp[r0:r1, c0:c1], h[r0:r1, c0:c1], level - sign)
        for cnt in measure.find_contours(box, level):
            if len(cnt) < 4 or not np.allclose(cnt[0], cnt[-1]):
                continue
            if not measure.points_in_poly([[seed[0] - r0, seed[1] - c0]], cnt)[0]:
                continue
            rows, cols = cnt[:, 0] + r0, cnt[:, 1] + c0
            seg = np.hypot(np.diff(rows), np.diff(cols))
            sp = bilinear_slice(speed, rows, cols)
            mean_speed = float(np.sum(0.5 * (sp[:-1] + sp[1:]) * seg) / max(seg.sum(), 1e-300))
            if mean_speed > best_speed:
                best, best_speed = (rows, cols, sp, level), mean_speed
            break
    return best


def detect(ssh: Field, vel: VelocityField | None = None, p: LnamParams = LnamParams(),
           consts: PhysConsts = DEFAULT_CONSTS, k: int = 0, diagnostics: dict | None = None) -> list[Eddy]:
    """Eddies in time slice ``k``."""
    spec = ssh.spec
    if vel is None:
        vel = geostrophic_currents(ssh, consts)
    u, v = vel.time_slice(k)
    h = ssh.values[k]
    speed = np.hypot(u, v)
    lam = lnam_slice(u, v, spec, p.neighborhood_half_width)
    centres = lnam_centers(lam, p.center_threshold, p.neighborhood_half_width)
    allc = np.array(centres, dtype=np.int64).reshape(-1, 2)
    eddies = []
    n_discarded = 0
    for n, (i, j) in enumerate(centres):
        # LNAM sign times f: positive is cyclonic in either hemisphere
        cyclonic = lam[i, j] * np.sign(spec.lats[i]) > 0
        # cyclones sit in SSH lows, anticyclones in highs
        sign = -1.0 if cyclonic else 1.0
        others = np.delete(allc, n, axis=0)
        res = characteristic_contour(h, speed, (i, j), sign, others, p.n_levels)
        if res is None:
            n_discarded += 1
            continue
        rows, cols, sp, level = res
        amplitude = float(sign * (h[i, j] - level))
        lat_c, lon_c = float(spec.lats[i]), float(spec.lons[j])
        lat, lon, area, bary, rmax = _polygon_metrics(rows, cols, spec, lat_c, lon_c)
        if (math.sqrt(area / math.pi) < p.min_radius_px * min(spec.pixel_km()) * 1e3
                or amplitude < p.min_amplitude_m):
            n_discarded += 1
            continue
        eddies.append(Eddy(
            polarity=CYCLONE if cyclonic else ANTICYCLONE,
            center=(lat_c, lon_c),
            barycenter=(float(bary[0]), float(bary[1])),
            contour=np.column_stack([lat, lon]),
            mean_radius=math.sqrt(area / math.pi) / 1e3,
            max_radius=rmax / 1e3,
            max_velocity=float(sp.max()),
            t=float(spec.times[k]),
            amplitude=amplitude,
        ))
    if diagnostics is not None:
        diagnostics["discarded"] = diagnostics.get("discarded", 0) + n_discarded
        diagnostics["centres"] = diagnostics.get("centres", 0) + len(centres)
    return eddies


def detect_all(ssh: Field, vel: VelocityField | None = None, p: LnamParams = LnamParams(),
               consts: PhysConsts = DEFAULT_CONSTS, diagnostics: dict | None = None) -> list[list[Eddy]]:
    if vel is None:
        vel = geostrophic_currents(ssh, consts)
    return [detect(ssh, vel, p, consts, k, diagnostics) for k in range(ssh.spec.nt)]


# --------------------------------------------------------------------------- tracking and matching


def distance_km(a: tuple[float, float], b: tuple[float, float]) -> float:
    coslat = math.cos(math.radians(0.5 * (a[0] + b[0])))
    return math.hypot((a[0] - b[0]) * M_PER_DEG, (a[1] - b[1]) * M_PER_DEG * coslat) / 1e3


def track(eddies_per_day: list[list[Eddy]], max_jump_km: float = 50.0, max_gap_days: int = 1) -> list[list[Eddy]]:
    """Greedy nearest-barycentre association; returns the same nesting with track ids and lifetimes."""
    tracks: list[list[tuple[int, int]]] = []  # (day index, position in that day)
    last: list[tuple[float, Eddy]] = []  # per track: (t, eddy)
    assign = [[-1] * len(day) for day in eddies_per_day]
    for d, day in enumerate(eddies_per_day):
        if not day:
            continue
        t = day[0].t
        pairs = []
        for tid, (t_last, e_last) in enumerate(last):
            if t - t_last > max_gap_days + 1 + 1e-9:
                continue
            for n, e in enumerate(day):
                if e.polarity != e_last.polarity:
                    continue
                dist = distance_km(e_last.barycenter, e.barycenter)
                if dist < max_jump_km:
                    pairs.append((dist, tid, n))
        used_t, used_e = set(), set()
        for dist, tid, n in sorted(pairs):
            if tid in used_t or n in used_e:
                continue
            used_t.add(tid)
            used_e.add(n)
            assign[d][n] = tid
        for n, e in enumerate(day):
            if assign[d][n] < 0:
                assign[d][n] = len(tracks)
                tracks.append([])
                last.append((e.t, e))
            tid = assign[d][n]
            tracks[tid].append((d, n))
            last[tid] = (e.t, e)
    life = {}
    for tid, members in enumerate(tracks):
        ts = [eddies_per_day[d][n].t for d, n in members]
        life[tid] = int(round(max(ts) - min(ts))) + 1
    return [[replace(e, track_id=assign[d][n], lifetime=life[assign[d][n]]) for n, e in enumerate(day)]
            for d, day in enumerate(eddies_per_day)]


@dataclass
class MatchReport:
    pairs: list = field(default_factory=list)
    unmatched_truth: list = field(default_factory=list)
    unmatched_est: list = field(default_factory=list)
    excluded_truth: list = field(default_factory=list)

    @property
    def excluded_multi(self) -> int:
        return len(self.excluded_truth)

    @property
    def n_truth(self) -> int:
        return len(self.pairs) + len(self.unmatched_truth) + len(self.excluded_truth)

    @property
    def n_est(self) -> int:
        return len(self.pairs) + len(self.unmatched_est)

    def merge(self, other: MatchReport) -> MatchReport:
        return MatchReport(self.pairs + other.pairs, self.unmatched_truth + other.unmatched_truth,
                           self.unmatched_est + other.unmatched_est, self.excluded_truth + other.excluded_truth)

    def restrict(self, keep) -> MatchReport:
        """Sub-report for a region; pairs follow the truth eddy, unmatched eddies their own position."""
        return MatchReport([(t, e) for t, e in self.pairs if keep(t)],
                           [t for t in self.unmatched_truth if keep(t)],
                           [e for e in self.unmatched_est if keep(e)],
                           [t for t in self.excluded_truth if keep(t)])


def interior(spec: GridSpec, margin_km: float):
    """Predicate: barycentre at least ``margin_km`` from every edge of the box."""
    def keep(e: Eddy) -> bool:
        lat, lon = e.barycenter
        dy = min(lat - spec.lat_min, spec.lat0 - lat) * M_PER_DEG / 1e3
        dx = min(lon - spec.lon0, spec.lon_max - lon) * M_PER_DEG / 1e3 * math.cos(math.radians(lat))
        return min(dx, dy) >= margin_km
    return keep


def match(truth_eddies: list[Eddy], est_eddies: list[Eddy]) -> MatchReport:
    """Pair truth and estimated eddies whose barycentres are closer than their mean radius average.

    Polarity must agree. Truth eddies with more than one candidate are excluded.
    """
    rep = MatchReport()
    single: dict[int, list[tuple[float, int]]] = {}
    for ti, te in enumerate(truth_eddies):
        cands = []
        for ei, ee in enumerate(est_eddies):
            if ee.polarity != te.polarity:
                continue
            d = distance_km(te.barycenter, ee.barycenter)
            if d < 0.5 * (te.mean_radius + ee.mean_radius):
                cands.append((d, ei))
        if len(cands) > 1:
            rep.excluded_truth.append(te)
        elif len(cands) == 1:
            single.setdefault(cands[0][1], []).append((cands[0][0], ti))
        else:
            rep.unmatched_truth.append(te)
    paired_est = set()
    for ei, claims in single.items():
        claims.sort()
        rep.pairs.append((truth_eddies[claims[0][1]], est_eddies[ei]))
        paired_est.add(ei)
        rep.unmatched_truth.extend(truth_eddies[ti] for _, ti in claims[1:])
    rep.unmatched_est = [e for i, e in enumerate(est_eddies) if i not in paired_est]
    return rep


def match_days(truth_days: list[list[Eddy]], est_days: list[list[Eddy]]) -> MatchReport:
    if len(truth_days) != len(est_days):
        raise ValueError("truth and estimate cover different numbers of days")
    rep = MatchReport()
    for a, b in zip(truth_days, est_days):
        rep = rep.merge(match(a, b))
    return rep


def _ratio(num: float, den: float) -> float | None:
    return None if den == 0 else num / den


def scores(report: MatchReport) -> tuple[float | None, float | None, float | None]:
    """(precision, recall, f1); ``None`` marks an undefined score."""
    m = len(report.pairs)
    precision = _ratio(m, report.n_est)
    recall = _ratio(m, report.n_truth - report.excluded_multi)
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def f1_score(precision: float, recall: float) -> float | None:
    return None if precision + recall == 0 else 2 * precision * recall / (precision + recall)


_BIN_KEYS = {"radius": "mean_radius", "lifetime": "lifetime", "max_velocity": "max_velocity"}


def property_errors(report: MatchReport, bin_by: str = "radius", edges=None) -> dict:
    """Radius and velocity RMSE/bias (estimate minus truth) over matched pairs, optionally binned."""
    def stats(pairs):
        if not pairs:
            return None
        out = {}
        for name in ("mean_radius", "max_radius", "max_velocity"):
            d = np.array([getattr(e, name) - getattr(t, name) for t, e in pairs])
            out[f"{name}_bias"] = float(d.mean())
            out[f"{name}_rmse"] = float(np.sqrt(np.mean(d**2)))
        out["n"] = len(pairs)
        return out

    result = {"all": stats(report.pairs), "bin_by": bin_by, "bins": []}
    if edges is not None:
        key = _BIN_KEYS[bin_by]
        edges = list(edges)
        for lo, hi in zip(edges[:-1], edges[1:]):
            sel = [(t, e) for t, e in report.pairs if lo <= getattr(t, key) < hi]
            result["bins"].append({"lo": lo, "hi": hi, "stats": stats(sel)})
    return result
