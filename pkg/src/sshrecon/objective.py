"""Reconstruction losses, their gradients, normalisation and the leave-one-out split.

Three losses are available: ``sup`` (MSE against a gridded truth), ``unsup``
(MSE against along-track observations) and ``unsup_reg`` (``unsup`` plus MSE
terms on the first and second along-track derivatives). Gradients are
assembled with the trilinear adjoint and the transposes of the difference
operators, so they are exact up to rounding.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .gridcore import Field, GridError, GridSpec, TrackSet, stencil_for
from .trackcalc import DerivedTrackSet, along_track_derivative, second_derivative

LOSS_KINDS = ("sup", "unsup", "unsup_reg")


class NoConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class LossParams:
    lambda1: float = 0.05
    lambda2: float = 0.05

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularisation weights must be >= 0")


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not (np.isfinite(self.std) and self.std > 0):
            raise ValueError("zero variance: cannot normalise")

    @classmethod
    def from_samples(cls, x) -> NormStats:
        x = np.asarray(x, dtype=np.float64)
        x = x[np.isfinite(x)]
        if x.size == 0:
            raise ValueError("no samples to compute statistics from")
        std = float(np.std(x))
        if std == 0:
            raise ValueError("zero variance: cannot normalise")
        return cls(float(np.mean(x)), std)

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def unapply(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, d: dict) -> NormStats:
        return cls(float(d["mean"]), float(d["std"]))


def compute_norm_stats(inputs) -> NormStats:
    """Statistics over observed samples only (a TrackSet or any array of values)."""
    vals = inputs.value if isinstance(inputs, TrackSet) else inputs
    return NormStats.from_samples(vals)


def zero_fill(x: np.ndarray) -> np.ndarray:
    """Replace missing (NaN) entries by zero; intended for already-normalised data."""
    return np.where(np.isfinite(x), x, 0.0)


@dataclass(frozen=True)
class DerivNorm:
    """Per-order statistics for the derivative terms."""

    d1: NormStats
    d2: NormStats

    @classmethod
    def from_tracks(cls, obs: TrackSet, max_gap_s: float = 2.0) -> DerivNorm:
        d1 = along_track_derivative(obs, max_gap_s)
        d2 = second_derivative(d1)
        return cls(NormStats.from_samples(d1.values), NormStats.from_samples(d2.values))

    def to_dict(self) -> dict:
        return {"d1": self.d1.to_dict(), "d2": self.d2.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> DerivNorm:
        return cls(NormStats.from_dict(d["d1"]), NormStats.from_dict(d["d2"]))


def leave_one_satellite(obs: TrackSet, held_out: int) -> tuple[TrackSet, TrackSet]:
    """``(input_set, constraint_set)``: inputs drop one satellite, the constraint keeps everything."""
    if held_out not in obs.satellites:
        raise ValueError(f"unknown satellite id {held_out}")
    return obs.select(obs.sat_id != held_out), obs


# --------------------------------------------------------------------------- losses


def _check_same(a: Field, b: Field) -> None:
    if a.values.shape != b.values.shape:
        raise GridError("field shapes differ")


def loss_sup(truth: Field, est: Field) -> float:
    _check_same(truth, est)
    return float(np.mean((est.values - truth.values) ** 2))


class TrackProblem:
    """Observation operator and derivative geometry for one constraint set on one grid.

    Building this once and reusing it inside an iterative solver avoids recomputing
    stencils and pair indices at every step.
    """

    def __init__(self, obs: TrackSet, spec: GridSpec, norm: DerivNorm | None = None, max_gap_s: float = 2.0):
        if len(obs) == 0:
            raise NoConstraintError("no constraint points")
        self.obs = obs
        self.spec = spec
        self.stencil = stencil_for(obs, spec)
        self.d1: DerivedTrackSet = along_track_derivative(obs, max_gap_s)
        self.d2: DerivedTrackSet = second_derivative(self.d1)
        self._norm = norm

    @property
    def has_derivatives(self) -> bool:
        return len(self.d1) > 0

    @property
    def norm(self) -> DerivNorm:
        if self._norm is None:
            # an empty second-order set contributes nothing, so any scale will do
            d2 = NormStats.from_samples(self.d2.values) if len(self.d2) else NormStats(0.0, 1.0)
            self._norm = DerivNorm(NormStats.from_samples(self.d1.values), d2)
        return self._norm

    def _terms(self, est: Field, p: LossParams | None):
        if est.spec.shape != self.spec.shape:
            raise GridError("estimate grid does not match the problem grid")
        r0 = self.stencil.apply(est.values) - self.obs.value
        terms = [(0, r0, 1.0)]
        if p is None or (p.lambda1 == 0 and p.lambda2 == 0):
            return terms
        if not self.has_derivatives:
            warnings.warn("no valid derivative pairs; using the plain observation loss", RuntimeWarning, stacklevel=3)
            return terms
        norm = self.norm
        # offsets cancel in differences, so only the scale of each order matters
        r1 = self.d1.apply(r0)
        if p.lambda1 > 0:
            terms.append((1, r1, p.lambda1 / norm.d1.std**2))
        if p.lambda2 > 0 and len(self.d2):
            terms.append((2, self.d2.apply(r1), p.lambda2 / norm.d2.std**2))
        return terms

    def loss(self, est: Field, p: LossParams | None = None) -> float:
        return float(sum(w * np.mean(r**2) for _, r, w in self._terms(est, p)))

    def loss_and_grad(self, est: Field, p: LossParams | None = None) -> tuple[float, np.ndarray]:
        terms = self._terms(est, p)
        total = 0.0
        g_obs = np.zeros(len(self.obs))
        for order, r, w in terms:
            total += w * np.mean(r**2)
            g = 2.0 * w * r / r.size
            if order == 2:
                g = self.d2.transpose(g)
            if order >= 1:
                g = self.d1.transpose(g)
            g_obs += g
        return float(total), self.stencil.adjoint(g_obs).reshape(self.spec.shape)


def loss_unsup(obs: TrackSet, est: Field) -> float:
    return TrackProblem(obs, est.spec).loss(est)


def loss_unsup_reg(obs: TrackSet, est: Field, p: LossParams = LossParams(), norm: DerivNorm | None = None) -> float:
    return TrackProblem(obs, est.spec, norm).loss(est, p)


def grad_loss(
    obs,
    est: Field,
    which_loss: str = "unsup",
    p: LossParams = LossParams(),
    norm: DerivNorm | None = None,
) -> Field:
    """Gradient of the selected loss with respect to every cell of ``est``.

    For ``which_loss="sup"`` pass the truth Field as ``obs``.
    """
    if which_loss == "sup":
        _check_same(obs, est)
        g = 2.0 * (est.values - obs.values) / est.values.size
    elif which_loss in ("unsup", "unsup_reg"):
        prob = TrackProblem(obs, est.spec, norm)
        g = prob.loss_and_grad(est, p if which_loss == "unsup_reg" else None)[1]
    else:
        raise ValueError(f"unknown loss {which_loss!r}; expected one of {LOSS_KINDS}")
    return Field(est.spec, g, est.units)
