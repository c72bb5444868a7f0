"""Full-order parabolic solver and snapshot generation.

Three benchmark problems are built in:

- "advdiff-1d": advection-diffusion on (0, 2) with homogeneous Dirichlet
  conditions; mu = (advection speed, diffusivity).
- "advdiff-2d": advection-diffusion on the unit square with natural
  boundary conditions, fixed diffusivity 0.5 and advection speed 2 at
  angle mu_1.
- "nonaffine-2d": diffusion-reaction on the unit square, Dirichlet
  conditions, reaction weight 1/dist(x, mu) and a time-periodic source
  driven by the same weight.

Trajectories are integrated with Crank-Nicolson or backward Euler. The
system matrix is assembled and LU-factored once per parameter; every
step is one sparse multiply plus one back-substitution. The solver
stores deviations from the initial state, which is what the reduction
stages consume.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArchiveError, CompatibilityError, ConfigError, SolverError
from .fem import (
    Mesh1D,
    TriMesh2D,
    assemble_advection,
    assemble_mass,
    assemble_stiffness,
    assemble_weighted_load,
    assemble_weighted_mass,
    dirichlet,
    interpolate,
    natural,
)
from .linalg import CsrMatrix, csr_add_scaled, lu_factor

__all__ = [
    "FomProblem",
    "ProblemFamily",
    "ImplicitStepper",
    "SnapshotSet",
    "default_mesh",
    "generate_snapshots",
    "read_snapshots",
    "run_fom",
    "write_snapshots",
]

PROBLEM_IDS = ("advdiff-1d", "advdiff-2d", "nonaffine-2d")

_SNAP_MAGIC = b"RBSNAP01"


@dataclass(frozen=True)
class FomProblem:
    """One full-order run: a benchmark id, a parameter and time settings."""

    problem_id: str
    mu: tuple
    mesh: object
    integrator: str
    dt: float
    n_steps: int
    save_every: int

    def __post_init__(self):
        if self.problem_id not in PROBLEM_IDS:
            raise ConfigError(f"unknown problem id {self.problem_id!r}")
        if self.integrator not in ("crank-nicolson", "backward-euler"):
            raise ConfigError(f"unknown integrator {self.integrator!r}")
        if self.dt <= 0.0 or self.n_steps < 1 or self.save_every < 1:
            raise ConfigError("dt, n_steps and save_every must be positive")
        object.__setattr__(self, "mu", tuple(float(v) for v in self.mu))
        n_mu = {"advdiff-1d": 2, "advdiff-2d": 1, "nonaffine-2d": 2}
        if len(self.mu) != n_mu[self.problem_id]:
            raise ConfigError(
                f"{self.problem_id} expects {n_mu[self.problem_id]} parameter "
                f"components, got {len(self.mu)}")

    @property
    def n_saved(self):
        return 1 + self.n_steps // self.save_every


def default_mesh(problem_id):
    """The benchmark discretization for a problem id."""
    if problem_id == "advdiff-1d":
        return Mesh1D(0.0, 2.0, 101)
    if problem_id in ("advdiff-2d", "nonaffine-2d"):
        return TriMesh2D(32)
    raise ConfigError(f"unknown problem id {problem_id!r}")


class ProblemFamily:
    """Parameter-independent discretization of one benchmark.

    Assembles the operators that do not depend on mu once, so snapshot
    loops over many parameters only pay for the mu-dependent pieces.
    """

    def __init__(self, problem_id, mesh):
        if problem_id not in PROBLEM_IDS:
            raise ConfigError(f"unknown problem id {problem_id!r}")
        if problem_id == "advdiff-1d" and not isinstance(mesh, Mesh1D):
            raise ConfigError("advdiff-1d needs an interval mesh")
        if problem_id != "advdiff-1d" and not isinstance(mesh, TriMesh2D):
            raise ConfigError(f"{problem_id} needs a triangulated mesh")
        self.problem_id = problem_id
        self.mesh = mesh
        if problem_id == "advdiff-2d":
            self.boundary = natural(mesh)
        else:
            self.boundary = dirichlet(mesh)
        self.mass = assemble_mass(mesh, self.boundary)
        self._stiffness = assemble_stiffness(mesh, self.boundary)
        if problem_id == "advdiff-1d":
            self._advection = assemble_advection(mesh, self.boundary, 1.0)
        elif problem_id == "advdiff-2d":
            self._adv_x = assemble_advection(mesh, self.boundary, (1.0, 0.0))
            self._adv_y = assemble_advection(mesh, self.boundary, (0.0, 1.0))
        self.u0 = self.boundary.restrict(interpolate(mesh, self._ic()))

    def _ic(self):
        if self.problem_id == "advdiff-1d":
            return lambda x: x * (2.0 - x) * np.exp(2.0 * x)
        if self.problem_id == "advdiff-2d":
            return lambda x, y: np.exp(-10.0 * (x**2 + y**2))
        return lambda x, y: np.zeros_like(x)

    @property
    def n_free(self):
        return self.boundary.n_free

    def affine_terms(self):
        """(coefficient(mu), matrix) pairs with sum = spatial operator.

        Only the two advection-diffusion benchmarks admit this form.
        """
        if self.problem_id == "advdiff-1d":
            return [(lambda mu: mu[1], self._stiffness),
                    (lambda mu: mu[0], self._advection)]
        if self.problem_id == "advdiff-2d":
            return [(lambda mu: 0.5, self._stiffness),
                    (lambda mu: 2.0 * np.cos(mu[0]), self._adv_x),
                    (lambda mu: 2.0 * np.sin(mu[0]), self._adv_y)]
        raise ConfigError(
            f"{self.problem_id} has no affine operator decomposition")

    def spatial_operator(self, mu) -> CsrMatrix:
        """Assembled spatial operator for one parameter value."""
        mu = tuple(float(v) for v in mu)
        if self.problem_id == "advdiff-1d":
            if mu[1] <= 0.0:
                raise ConfigError(f"advdiff-1d needs positive diffusivity, got {mu[1]}")
            return csr_add_scaled([(mu[1], self._stiffness),
                                   (mu[0], self._advection)])
        if self.problem_id == "advdiff-2d":
            return csr_add_scaled([
                (0.5, self._stiffness),
                (2.0 * np.cos(mu[0]), self._adv_x),
                (2.0 * np.sin(mu[0]), self._adv_y)])
        weighted = assemble_weighted_mass(self.mesh, self.boundary, mu)
        return csr_add_scaled([(1.0, self._stiffness), (1.0, weighted)])

    def forcing(self, mu):
        """Time-dependent source term over free DOFs, or None."""
        if self.problem_id != "nonaffine-2d":
            return None
        load = assemble_weighted_load(self.mesh, self.boundary, mu)
        return lambda t: np.sin(2.0 * np.pi * t) * load


class ImplicitStepper:
    """One-step integrator with the system matrix factored up front.

    Crank-Nicolson:
        (M + dt/2 K) u_next = (M - dt/2 K) u + dt f(t + dt/2)
    Backward Euler:
        (M + dt K) u_next = M u + dt f(t + dt)
    """

    def __init__(self, mass: CsrMatrix, k_tot: CsrMatrix, dt, scheme,
                 forcing=None):
        if scheme not in ("crank-nicolson", "backward-euler"):
            raise ConfigError(f"unknown integrator {scheme!r}")
        self.dt = float(dt)
        self.scheme = scheme
        self.forcing = forcing
        if scheme == "crank-nicolson":
            lhs = csr_add_scaled([(1.0, mass), (0.5 * self.dt, k_tot)])
            self.rhs_mat = csr_add_scaled([(1.0, mass), (-0.5 * self.dt, k_tot)])
            self.t_offset = 0.5 * self.dt
        else:
            lhs = csr_add_scaled([(1.0, mass), (self.dt, k_tot)])
            self.rhs_mat = mass
            self.t_offset = self.dt
        self.factor = lu_factor(lhs.to_dense())

    def step(self, u, t):
        """Advance one step from state u at time t."""
        rhs = self.rhs_mat.matvec(u)
        if self.forcing is not None:
            rhs = rhs + self.dt * self.forcing(t + self.t_offset)
        return self.factor.solve(rhs)


def run_fom(problem: FomProblem, family: ProblemFamily | None = None):
    """Integrate one trajectory and return (times, states) at saved steps.

    states[0] is the initial condition; afterwards every save_every-th
    step is kept. Raises SolverError with the step index if a step fails
    or produces a non-finite state.
    """
    if family is None:
        family = ProblemFamily(problem.problem_id, problem.mesh)
    elif (family.problem_id != problem.problem_id
          or family.mesh != problem.mesh):
        raise CompatibilityError("problem family does not match the problem")
    k_tot = family.spatial_operator(problem.mu)
    stepper = ImplicitStepper(family.mass, k_tot, problem.dt,
                              problem.integrator,
                              forcing=family.forcing(problem.mu))
    u = family.u0.copy()
    times = [0.0]
    states = [u.copy()]
    for k in range(problem.n_steps):
        try:
            u = stepper.step(u, k * problem.dt)
        except Exception as exc:
            raise SolverError(f"step {k + 1} failed: {exc}") from exc
        if not np.all(np.isfinite(u)):
            raise SolverError(f"step {k + 1} produced a non-finite state")
        if (k + 1) % problem.save_every == 0:
            times.append((k + 1) * problem.dt)
            states.append(u.copy())
    return np.array(times), np.array(states)


@dataclass(frozen=True)
class SnapshotSet:
    """Deviation snapshots for a batch of parameters.

    params : (n_param, p) parameter values
    initial : (n_param, n_h) initial state per parameter
    deviations : (n_param, n_saved, n_h) states minus the initial state;
        the slice at the first saved step is exactly zero.
    """

    params: np.ndarray
    initial: np.ndarray
    deviations: np.ndarray

    def __post_init__(self):
        params = np.atleast_2d(np.asarray(self.params, dtype=np.float64))
        initial = np.asarray(self.initial, dtype=np.float64)
        deviations = np.asarray(self.deviations, dtype=np.float64)
        if deviations.ndim != 3:
            raise ValueError("SnapshotSet: deviations must be 3-D")
        n_param = deviations.shape[0]
        if params.shape[0] != n_param or initial.shape != (
                n_param, deviations.shape[2]):
            raise ValueError("SnapshotSet: inconsistent array shapes")
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "initial", initial)
        object.__setattr__(self, "deviations", deviations)

    @property
    def n_param(self):
        return self.deviations.shape[0]

    @property
    def n_saved(self):
        return self.deviations.shape[1]

    @property
    def n_h(self):
        return self.deviations.shape[2]


def generate_snapshots(problems, threads=1):
    """Run the full-order model for a batch of problems.

    All problems must share the benchmark id, mesh and time settings.

    Returns
    -------
    (SnapshotSet, timings)
        timings[i] is the wall time in seconds spent on parameter i.
        Results are stored in parameter order regardless of thread
        scheduling, so the output is deterministic.
    """
    problems = list(problems)
    if not problems:
        raise ConfigError("generate_snapshots: empty problem list")
    head = problems[0]
    for p in problems[1:]:
        if (p.problem_id, p.mesh, p.integrator, p.dt, p.n_steps,
                p.save_every) != (head.problem_id, head.mesh, head.integrator,
                                  head.dt, head.n_steps, head.save_every):
            raise ConfigError(
                "generate_snapshots: problems must share mesh and "
                "time-stepping settings")
    family = ProblemFamily(head.problem_id, head.mesh)
    n_param = len(problems)
    n_saved = head.n_saved
    n_h = family.n_free
    params = np.array([p.mu for p in problems], dtype=np.float64)
    initial = np.empty((n_param, n_h))
    deviations = np.empty((n_param, n_saved, n_h))
    timings = np.zeros(n_param)

    def worker(i):
        tic = time.perf_counter()
        _, states = run_fom(problems[i], family)
        initial[i] = states[0]
        deviations[i] = states - states[0]
        timings[i] = time.perf_counter() - tic

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(worker, range(n_param)))
    else:
        for i in range(n_param):
            worker(i)
    return SnapshotSet(params, initial, deviations), timings


def _xor_fold(payload: bytes):
    arr = np.frombuffer(payload, dtype="<u8")
    return np.uint64(np.bitwise_xor.reduce(arr))


def write_snapshots(snapshots: SnapshotSet, path):
    """Write the binary snapshot archive.

    Layout: magic "RBSNAP01"; four little-endian u64 dims (n_param,
    n_saved, n_h, p); the parameter, initial-state and deviation blocks
    as little-endian f64 in C order; a u64 trailer holding the XOR-fold
    of the payload (everything between magic and trailer).
    """
    dims = np.array([snapshots.n_param, snapshots.n_saved, snapshots.n_h,
                     snapshots.params.shape[1]], dtype="<u8")
    payload = (dims.tobytes()
               + snapshots.params.astype("<f8").tobytes()
               + snapshots.initial.astype("<f8").tobytes()
               + snapshots.deviations.astype("<f8").tobytes())
    checksum = _xor_fold(payload)
    with open(path, "wb") as fh:
        fh.write(_SNAP_MAGIC)
        fh.write(payload)
        fh.write(np.array([checksum], dtype="<u8").tobytes())


def read_snapshots(path) -> SnapshotSet:
    """Read and validate a snapshot archive written by write_snapshots."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ArchiveError(f"{path}: unreadable snapshot archive: {exc}") from exc
    if len(raw) < 8 + 32 + 8:
        raise ArchiveError(f"{path}: truncated snapshot archive")
    if raw[:8] != _SNAP_MAGIC:
        raise ArchiveError(f"{path}: bad magic {raw[:8]!r}")
    n_param, n_saved, n_h, p = np.frombuffer(raw[8:40], dtype="<u8")
    expected = 8 + 32 + 8 * (n_param * p + n_param * n_h
                             + n_param * n_saved * n_h) + 8
    if len(raw) != expected:
        raise ArchiveError(
            f"{path}: size {len(raw)} does not match header (expected {expected})")
    payload = raw[8:-8]
    stored = np.frombuffer(raw[-8:], dtype="<u8")[0]
    if _xor_fold(payload) != stored:
        raise ArchiveError(f"{path}: checksum mismatch")
    off = 32
    params = np.frombuffer(payload, dtype="<f8", count=n_param * p,
                           offset=off).reshape(n_param, p)
    off += 8 * n_param * p
    initial = np.frombuffer(payload, dtype="<f8", count=n_param * n_h,
                            offset=off).reshape(n_param, n_h)
    off += 8 * n_param * n_h
    deviations = np.frombuffer(
        payload, dtype="<f8", count=n_param * n_saved * n_h,
        offset=off).reshape(n_param, n_saved, n_h)
    return SnapshotSet(params.copy(), initial.copy(), deviations.copy())
