"""Online reduced-order evaluation and error reporting.

Two surrogates share the POD basis produced offline. The network
surrogate iterates the trained time stepper in coefficient space; its
per-step cost depends only on the layer widths, never on the mesh. The
Galerkin surrogate projects the spatial operator onto the basis and
integrates the reduced linear system with the same scheme and fine step
as the full-order solver. For affinely decomposed operators the
projection is precomputed blockwise; the reassembly route projects a
freshly assembled operator per parameter and is the only option for the
nonaffine benchmark. Both routes feed one reduced stepping helper, so
they agree to rounding on affine problems.

Error metrics compare trajectories in the mass-weighted norm. Times
where the reference vanishes have no relative error; these entries are
NaN and flagged in the validity mask rather than silently dropped.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CompatibilityError, ConfigError, SolverError
from .fom import FomProblem, ProblemFamily
from .linalg import CsrMatrix, lu_factor
from .net import TrainedModel, coefficient_rollout
from .pod import PodBasis

__all__ = [
    "ErrorReport",
    "GalerkinResult",
    "RolloutResult",
    "coefficient_errors",
    "galerkin_affine",
    "galerkin_reassembled",
    "peclet_numbers",
    "reconstruct",
    "relative_l2_error",
    "rollout",
    "saved_times",
    "write_error_svg",
    "write_errors_csv",
    "write_mean_csv",
    "write_summary_csv",
]


def saved_times(problem: FomProblem):
    """Times of the saved steps, matching the full-order solver."""
    kept = np.concatenate(
        [[0], np.arange(problem.save_every, problem.n_steps + 1,
                        problem.save_every)])
    return kept * problem.dt


@dataclass
class RolloutResult:
    coeffs: np.ndarray
    seconds: float


def rollout(model: TrainedModel, mu, n_steps, size_log=None) -> RolloutResult:
    """Iterate the trained stepper from the zero coefficient state.

    mu is a raw parameter vector (or a batch of them); normalization is
    applied with the scaling stored in the model. The wall-clock time of
    the iteration loop is reported so callers can profile the online
    stage. Raises SolverError with the step index if the iteration
    diverges.
    """
    mu_norm = model.normalization.normalize(np.asarray(mu, dtype=np.float64))
    start = time.perf_counter()
    coeffs = coefficient_rollout(model.params, mu_norm, n_steps,
                                 size_log=size_log)
    return RolloutResult(coeffs=coeffs, seconds=time.perf_counter() - start)


def reconstruct(basis: PodBasis, u0, coeffs):
    """Full-order states u0 + W c for one or many coefficient vectors."""
    u0 = np.asarray(u0, dtype=np.float64)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if u0.shape != (basis.n_h,):
        raise CompatibilityError(
            f"reconstruct: initial state has {u0.shape} entries, basis "
            f"expects ({basis.n_h},)")
    if coeffs.shape[-1] != basis.n_rb:
        raise CompatibilityError(
            f"reconstruct: {coeffs.shape[-1]} coefficients for a basis "
            f"of size {basis.n_rb}")
    return u0 + coeffs @ basis.w.T


@dataclass
class GalerkinResult:
    times: np.ndarray
    coeffs: np.ndarray
    seconds: float


def _check_pair(family: ProblemFamily, basis: PodBasis, problem: FomProblem):
    if (family.problem_id != problem.problem_id
            or family.mesh != problem.mesh):
        raise CompatibilityError("problem family does not match the problem")
    if basis.n_h != family.n_free:
        raise CompatibilityError(
            f"basis has {basis.n_h} rows but the discretization has "
            f"{family.n_free} free values")


def _reduced_trajectory(a_red, source, forcing, problem: FomProblem):
    """Integrate dc/dt = -a_red c + source + forcing(t) from c = 0.

    Uses the problem's scheme and fine step; every save_every-th state
    is kept, like the full-order solver.
    """
    n = a_red.shape[0]
    eye = np.eye(n)
    dt = problem.dt
    if problem.integrator == "crank-nicolson":
        lhs = eye + 0.5 * dt * a_red
        rhs_mat = eye - 0.5 * dt * a_red
        t_offset = 0.5 * dt
    else:
        lhs = eye + dt * a_red
        rhs_mat = eye
        t_offset = dt
    factor = lu_factor(lhs)
    c = np.zeros(n)
    saved = np.empty((problem.n_saved, n))
    saved[0] = c
    pos = 1
    start = time.perf_counter()
    for k in range(problem.n_steps):
        rhs = rhs_mat @ c + dt * source
        if forcing is not None:
            rhs = rhs + dt * forcing(k * dt + t_offset)
        c = factor.solve(rhs)
        if not np.all(np.isfinite(c)):
            raise SolverError(f"reduced step {k + 1} produced a non-finite "
                              "state")
        if (k + 1) % problem.save_every == 0:
            saved[pos] = c
            pos += 1
    seconds = time.perf_counter() - start
    return GalerkinResult(times=saved_times(problem), coeffs=saved,
                          seconds=seconds)


def galerkin_affine(family: ProblemFamily, basis: PodBasis,
                    problem: FomProblem) -> GalerkinResult:
    """Reduced Galerkin solve using the affine operator decomposition.

    The projected blocks W^T A_j W and the initial-condition sources
    -W^T A_j u0 are formed termwise, then combined with the parameter
    coefficients. Refuses problems without an affine decomposition.
    """
    _check_pair(family, basis, problem)
    w = basis.w
    a_red = np.zeros((basis.n_rb, basis.n_rb))
    source = np.zeros(basis.n_rb)
    for theta, mat in family.affine_terms():
        coeff = float(theta(problem.mu))
        a_red += coeff * (w.T @ mat.matmat(w))
        source -= coeff * (w.T @ mat.matvec(family.u0))
    return _reduced_trajectory(a_red, source, None, problem)


def galerkin_reassembled(family: ProblemFamily, basis: PodBasis,
                         problem: FomProblem) -> GalerkinResult:
    """Reduced Galerkin solve that assembles the full operator per mu.

    Projects a freshly assembled spatial operator and, when present, the
    time-dependent load. Works for every benchmark but touches
    full-order arrays for each parameter, so its cost grows with the
    mesh; the affine route avoids that where it applies.
    """
    _check_pair(family, basis, problem)
    w = basis.w
    k_tot = family.spatial_operator(problem.mu)
    a_red = w.T @ k_tot.matmat(w)
    source = -(w.T @ k_tot.matvec(family.u0))
    forcing = family.forcing(problem.mu)
    forcing_red = None
    if forcing is not None:
        forcing_red = lambda t: w.T @ forcing(t)
    return _reduced_trajectory(a_red, source, forcing_red, problem)


# ---------------------------------------------------------------------------
# error metrics


def relative_l2_error(mass: CsrMatrix, reference, approx):
    """Per-time relative errors in the mass-weighted norm.

    reference, approx : (n_times, n_free) state trajectories.

    Returns (errors, valid). Where the reference norm vanishes the
    relative error is undefined: the entry is NaN and valid is False.
    """
    reference = np.asarray(reference, dtype=np.float64)
    approx = np.asarray(approx, dtype=np.float64)
    if reference.shape != approx.shape:
        raise CompatibilityError(
            f"relative_l2_error: shapes {reference.shape} and "
            f"{approx.shape} differ")
    diff = reference - approx
    num = np.sqrt(np.maximum(
        np.sum(diff * mass.matmat(diff.T).T, axis=1), 0.0))
    den = np.sqrt(np.maximum(
        np.sum(reference * mass.matmat(reference.T).T, axis=1), 0.0))
    valid = den > 0.0
    errors = np.full(reference.shape[0], np.nan)
    errors[valid] = num[valid] / den[valid]
    return errors, valid


def coefficient_errors(predicted, reference):
    """Coefficient error traces scaled by each mode's peak amplitude.

    Entry (k, i) is |predicted - reference| for mode i at time k,
    divided by max_t |reference_i|. Modes that stay identically zero
    give NaN columns.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if predicted.shape != reference.shape:
        raise CompatibilityError(
            f"coefficient_errors: shapes {predicted.shape} and "
            f"{reference.shape} differ")
    peak = np.abs(reference).max(axis=0)
    out = np.full(reference.shape, np.nan)
    ok = peak > 0.0
    out[:, ok] = np.abs(predicted[:, ok] - reference[:, ok]) / peak[ok]
    return out


def peclet_numbers(params, length=2.0):
    """Advective Peclet number |velocity| * length / diffusivity."""
    params = np.atleast_2d(np.asarray(params, dtype=np.float64))
    if params.shape[1] != 2:
        raise ConfigError("peclet_numbers expects (velocity, diffusivity) "
                          "parameter pairs")
    return np.abs(params[:, 0]) * length / params[:, 1]


def _nan_mean(values, axis):
    finite = np.isfinite(values)
    count = finite.sum(axis=axis)
    total = np.where(finite, values, 0.0).sum(axis=axis)
    return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def _nan_max(values, axis):
    finite = np.isfinite(values)
    masked = np.where(finite, values, -np.inf)
    out = masked.max(axis=axis)
    return np.where(np.isfinite(out), out, np.nan)


def _nan_std(values, axis):
    mean = _nan_mean(values, axis)
    finite = np.isfinite(values)
    count = finite.sum(axis=axis)
    dev = np.where(finite, values - np.expand_dims(mean, axis), 0.0)
    var = (dev * dev).sum(axis=axis) / np.maximum(count, 1)
    return np.where(count > 0, np.sqrt(var), np.nan)


@dataclass
class ErrorReport:
    """Relative errors of one surrogate over a set of test parameters.

    errors[i, k] is the relative error for parameter i at saved time k;
    NaN marks times where the reference trajectory vanishes.
    """

    label: str
    times: np.ndarray
    params: np.ndarray
    errors: np.ndarray
    peclet: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.params = np.atleast_2d(np.asarray(self.params, dtype=np.float64))
        self.errors = np.atleast_2d(np.asarray(self.errors, dtype=np.float64))
        if self.errors.shape != (self.params.shape[0], self.times.size):
            raise CompatibilityError(
                f"ErrorReport: errors shaped {self.errors.shape} do not "
                f"match {self.params.shape[0]} parameters and "
                f"{self.times.size} times")
        if self.peclet is not None:
            self.peclet = np.asarray(self.peclet, dtype=np.float64)
            if self.peclet.shape != (self.params.shape[0],):
                raise CompatibilityError("ErrorReport: peclet length is off")

    @property
    def n_test(self):
        return self.params.shape[0]

    def mean_over_params(self):
        """Mean error at each time, ignoring undefined entries."""
        return _nan_mean(self.errors, axis=0)

    def final_errors(self):
        return self.errors[:, -1]

    def summary(self):
        final = self.final_errors()
        return {
            "label": self.label,
            "n_test": int(self.n_test),
            "mean_final": float(_nan_mean(final, axis=0)),
            "max_final": float(_nan_max(final, axis=0)),
            "mean_overall": float(_nan_mean(self.errors.ravel(), axis=0)),
            "max_overall": float(_nan_max(self.errors.ravel(), axis=0)),
        }


# ---------------------------------------------------------------------------
# report files


def _fmt(x):
    return repr(float(x))


def write_errors_csv(report: ErrorReport, path):
    """Per-time errors, one column per test parameter."""
    header = "time," + ",".join(f"p{i:03d}" for i in range(report.n_test))
    lines = [header]
    for k, t in enumerate(report.times):
        row = [_fmt(t)] + [_fmt(e) for e in report.errors[:, k]]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_summary_csv(report: ErrorReport, path):
    """One row per test parameter with its mean and peak error."""
    p = report.params.shape[1]
    header = ["param"] + [f"mu_{j}" for j in range(p)]
    header += ["mean_error", "max_error"]
    if report.peclet is not None:
        header.append("peclet")
    lines = [",".join(header)]
    means = _nan_mean(report.errors, axis=1)
    maxes = _nan_max(report.errors, axis=1)
    for i in range(report.n_test):
        row = [str(i)] + [_fmt(v) for v in report.params[i]]
        row += [_fmt(means[i]), _fmt(maxes[i])]
        if report.peclet is not None:
            row.append(_fmt(report.peclet[i]))
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_mean_csv(report: ErrorReport, path):
    """Mean and spread of the error across parameters at each time."""
    lines = ["time,mean_error,std_error"]
    means = _nan_mean(report.errors, axis=0)
    stds = _nan_std(report.errors, axis=0)
    for k, t in enumerate(report.times):
        lines.append(",".join([_fmt(t), _fmt(means[k]), _fmt(stds[k])]))
    Path(path).write_text("\n".join(lines) + "\n")


_SVG_W, _SVG_H = 640, 400
_SVG_BOX = (70, 20, 620, 360)  # left, top, right, bottom


def _svg_polyline(points, style):
    coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    return f'<polyline fill="none" {style} points="{coords}"/>'


def write_error_svg(report: ErrorReport, path):
    """Hand-rolled SVG of the error history on a log scale.

    Per-parameter curves are drawn faint with the mean on top.
    Non-finite and nonpositive values are skipped, so curves can break
    where the error is undefined. Output bytes are deterministic.
    """
    left, top, right, bottom = _SVG_BOX
    finite = report.errors[np.isfinite(report.errors)]
    positive = finite[finite > 0.0]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
    ]
    if positive.size == 0:
        parts.append(f'<text x="{left}" y="{(top + bottom) / 2:.2f}" '
                     f'font-size="14">no positive errors to plot</text>')
        parts.append("</svg>")
        Path(path).write_text("\n".join(parts) + "\n")
        return
    ylo = float(np.floor(np.log10(positive.min())))
    yhi = float(np.ceil(np.log10(positive.max())))
    if yhi <= ylo:
        yhi = ylo + 1.0
    t0, t1 = float(report.times[0]), float(report.times[-1])
    if t1 <= t0:
        t1 = t0 + 1.0

    def to_xy(t, e):
        x = left + (t - t0) / (t1 - t0) * (right - left)
        y = bottom - (np.log10(e) - ylo) / (yhi - ylo) * (bottom - top)
        return x, y

    parts.append(f'<rect x="{left}" y="{top}" width="{right - left}" '
                 f'height="{bottom - top}" fill="none" stroke="#444"/>')
    decade = int(ylo)
    while decade <= yhi:
        _, y = to_xy(t0, 10.0 ** decade)
        parts.append(f'<line x1="{left}" y1="{y:.2f}" x2="{right}" '
                     f'y2="{y:.2f}" stroke="#ddd"/>')
        parts.append(f'<text x="{left - 6}" y="{y + 4:.2f}" font-size="11" '
                     f'text-anchor="end">1e{decade}</text>')
        decade += 1
    for frac in (0.0, 0.5, 1.0):
        t = t0 + frac * (t1 - t0)
        x, _ = to_xy(t, 10.0 ** ylo)
        parts.append(f'<text x="{x:.2f}" y="{bottom + 16}" font-size="11" '
                     f'text-anchor="middle">{t:.3g}</text>')
    for i in range(report.n_test):
        pts = [to_xy(t, e) for t, e in zip(report.times, report.errors[i])
               if np.isfinite(e) and e > 0.0]
        if len(pts) > 1:
            parts.append(_svg_polyline(
                pts, 'stroke="#9ab" stroke-width="0.6" stroke-opacity="0.6"'))
    mean_curve = report.mean_over_params()
    pts = [to_xy(t, e) for t, e in zip(report.times, mean_curve)
           if np.isfinite(e) and e > 0.0]
    if len(pts) > 1:
        parts.append(_svg_polyline(pts, 'stroke="#c22" stroke-width="2"'))
    parts.append(f'<text x="{left}" y="{top - 6}" font-size="13">'
                 f'{report.label}: relative error over time</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
