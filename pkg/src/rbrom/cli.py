"""Command-line pipeline: snapshots, basis, training, evaluation.

The stages communicate through files in one output directory:

    rbrom fom      --config c.json --out run/    -> snapshots.bin
    rbrom pod      --config c.json --out run/    -> basis.bin, coeffs.json
    rbrom train    --config c.json --out run/    -> model.json
    rbrom eval     --config c.json --out run/    -> reports/*_net.csv
    rbrom baseline --config c.json --out run/    -> reports/*_galerkin.csv

Configs are strict JSON: unknown keys anywhere are rejected, and
settings that contradict each other (lookahead too long for the saved
trajectory, integrator not matching the benchmark, wrong parameter
count) fail before any computation starts. Exit codes sort failures:
2 configuration, 3 solver, 4 archive, 5 training, 6 artifact mismatch.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ArchiveError,
    CompatibilityError,
    ConfigError,
    SolverError,
    TrainingError,
)
from .fem import Mesh1D, TriMesh2D
from .fom import (
    FomProblem,
    ProblemFamily,
    generate_snapshots,
    read_snapshots,
    write_snapshots,
)
from .linalg import cholesky
from .net import TrainConfig, load_model, make_spec, save_model, train
from .pod import (
    build_targets,
    read_basis,
    read_dataset,
    two_stage_pod,
    write_basis,
    write_dataset,
)
from .rom import (
    ErrorReport,
    galerkin_affine,
    galerkin_reassembled,
    peclet_numbers,
    reconstruct,
    relative_l2_error,
    rollout,
    saved_times,
    write_error_svg,
    write_errors_csv,
    write_mean_csv,
    write_summary_csv,
)
from .sampling import (
    GridAxis,
    grid_sample,
    lhs_sample,
    normalization_from_grid,
)

_PARAM_COUNTS = {"advdiff-1d": 2, "advdiff-2d": 1, "nonaffine-2d": 2}
_INTEGRATORS = {"advdiff-1d": "crank-nicolson",
                "advdiff-2d": "backward-euler",
                "nonaffine-2d": "backward-euler"}

SNAPSHOT_FILE = "snapshots.bin"
BASIS_FILE = "basis.bin"
DATASET_FILE = "coeffs.json"
MODEL_FILE = "model.json"
REPORT_DIR = "reports"


def _check_keys(obj, where, required, optional=()):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(obj) - set(required) - set(optional))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    missing = sorted(set(required) - set(obj))
    if missing:
        raise ConfigError(f"{where}: missing key(s) {', '.join(missing)}")


def _as_int(value, where, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{where}: must be at least {minimum}")
    return value


def _as_float(value, where, positive=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    value = float(value)
    if positive and value <= 0.0:
        raise ConfigError(f"{where}: must be positive")
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description, one benchmark end to end."""

    problem_id: str
    mesh: object
    integrator: str
    dt: float
    n_steps: int
    save_every: int
    train_axes: tuple
    eps_time: float
    eps_param: float
    net_widths: tuple
    net_hidden_layers: int
    net_contraction: int
    train_m: int
    train_epochs: int
    train_iters_per_epoch: int
    train_restarts: int
    train_seed: int
    train_patience: int | None
    test_kind: str
    test_n: int
    test_seed: int
    test_domain: tuple
    test_transforms: tuple

    @property
    def n_saved_steps(self):
        return self.n_steps // self.save_every

    def make_problem(self, mu) -> FomProblem:
        return FomProblem(problem_id=self.problem_id, mu=tuple(mu),
                          mesh=self.mesh, integrator=self.integrator,
                          dt=self.dt, n_steps=self.n_steps,
                          save_every=self.save_every)

    def train_parameters(self):
        return grid_sample(self.train_axes)

    def normalization(self):
        return normalization_from_grid(self.train_axes)

    def test_parameters(self):
        if self.test_kind == "grid":
            axes = [GridAxis(tr, lo, hi, self.test_n)
                    for tr, (lo, hi) in zip(self.test_transforms,
                                            self.test_domain)]
            return grid_sample(axes)
        return lhs_sample(self.test_domain, self.test_n, self.test_seed,
                          transforms=self.test_transforms)

    def resolve_spec(self, n_rb):
        return make_spec(n_rb, len(self.train_axes), self.net_widths,
                         self.net_hidden_layers, self.net_contraction)


def _parse_mesh(problem_id, rec):
    if problem_id == "advdiff-1d":
        _check_keys(rec, "mesh", ["n_el"])
        return Mesh1D(0.0, 2.0, _as_int(rec["n_el"], "mesh.n_el", 2))
    _check_keys(rec, "mesh", ["nx"])
    return TriMesh2D(_as_int(rec["nx"], "mesh.nx", 2))


def _parse_axis(rec, where):
    _check_keys(rec, where, ["transform", "lo", "hi", "count"])
    return GridAxis(transform=rec["transform"],
                    lo=_as_float(rec["lo"], f"{where}.lo"),
                    hi=_as_float(rec["hi"], f"{where}.hi"),
                    count=_as_int(rec["count"], f"{where}.count", 1))


def load_config(path) -> ExperimentConfig:
    """Read and validate an experiment configuration file."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: config is not valid JSON: {exc}") from exc
    _check_keys(raw, "config",
                ["problem", "integrator", "dt", "n_steps", "save_every",
                 "train_params", "pod", "net", "train", "test_params"],
                optional=["mesh"])
    problem_id = raw["problem"]
    if problem_id not in _PARAM_COUNTS:
        raise ConfigError(f"config.problem: unknown benchmark {problem_id!r}")
    n_param = _PARAM_COUNTS[problem_id]

    integrator = raw["integrator"]
    if integrator != _INTEGRATORS[problem_id]:
        raise ConfigError(
            f"config.integrator: {problem_id} is defined with "
            f"{_INTEGRATORS[problem_id]}, got {integrator!r}")
    dt = _as_float(raw["dt"], "config.dt", positive=True)
    n_steps = _as_int(raw["n_steps"], "config.n_steps", 1)
    save_every = _as_int(raw["save_every"], "config.save_every", 1)
    if n_steps % save_every != 0:
        raise ConfigError("config.save_every must divide n_steps")

    if "mesh" in raw:
        mesh = _parse_mesh(problem_id, raw["mesh"])
    else:
        from .fom import default_mesh

        mesh = default_mesh(problem_id)

    tp = raw["train_params"]
    _check_keys(tp, "train_params", ["kind", "axes"])
    if tp["kind"] != "grid":
        raise ConfigError("train_params.kind: only 'grid' is supported, "
                          "training needs the grid axes for normalization")
    if not isinstance(tp["axes"], list) or len(tp["axes"]) != n_param:
        raise ConfigError(
            f"train_params.axes: {problem_id} has {n_param} parameter(s)")
    train_axes = tuple(_parse_axis(a, f"train_params.axes[{i}]")
                       for i, a in enumerate(tp["axes"]))

    pod_rec = raw["pod"]
    _check_keys(pod_rec, "pod", ["eps_time", "eps_param"])
    eps_time = _as_float(pod_rec["eps_time"], "pod.eps_time", positive=True)
    eps_param = _as_float(pod_rec["eps_param"], "pod.eps_param", positive=True)

    net_rec = raw["net"]
    _check_keys(net_rec, "net", ["widths", "hidden_layers"],
                optional=["contraction_index"])
    widths = net_rec["widths"]
    if (not isinstance(widths, list) or not widths
            or not all(isinstance(w, int) and w >= 1 for w in widths)):
        raise ConfigError("net.widths: expected a list of positive integers")
    hidden_layers = _as_int(net_rec["hidden_layers"], "net.hidden_layers", 1)
    contraction = _as_int(net_rec.get("contraction_index", 0),
                          "net.contraction_index", 0)
    if contraction >= len(widths):
        raise ConfigError("net.contraction_index: no such block")

    train_rec = raw["train"]
    _check_keys(train_rec, "train", ["m", "epochs", "restarts", "seed"],
                optional=["patience", "iters_per_epoch"])
    train_m = _as_int(train_rec["m"], "train.m", 1)
    if 4 * train_m > n_steps // save_every:
        raise ConfigError(
            f"train.m: lookahead {train_m} needs at least {4 * train_m} "
            f"saved transitions, trajectory has {n_steps // save_every}")
    epochs = _as_int(train_rec["epochs"], "train.epochs", 1)
    iters_per_epoch = _as_int(train_rec.get("iters_per_epoch", 1),
                              "train.iters_per_epoch", 1)
    restarts = _as_int(train_rec["restarts"], "train.restarts", 1)
    seed = _as_int(train_rec["seed"], "train.seed")
    patience = train_rec.get("patience")
    if patience is not None:
        patience = _as_int(patience, "train.patience", 1)

    test_rec = raw["test_params"]
    _check_keys(test_rec, "test_params", ["kind", "n", "domain"],
                optional=["seed", "transforms"])
    kind = test_rec["kind"]
    if kind not in ("lhs", "grid"):
        raise ConfigError("test_params.kind: expected 'lhs' or 'grid'")
    test_n = _as_int(test_rec["n"], "test_params.n", 1)
    test_seed = _as_int(test_rec.get("seed", 0), "test_params.seed")
    domain = test_rec["domain"]
    if (not isinstance(domain, list) or len(domain) != n_param
            or not all(isinstance(b, list) and len(b) == 2 for b in domain)):
        raise ConfigError(
            f"test_params.domain: expected {n_param} [lo, hi] pair(s)")
    test_domain = tuple(
        (_as_float(b[0], f"test_params.domain[{i}]"),
         _as_float(b[1], f"test_params.domain[{i}]"))
        for i, b in enumerate(domain))
    transforms = test_rec.get("transforms")
    if transforms is None:
        transforms = ["identity"] * n_param
    if not isinstance(transforms, list) or len(transforms) != n_param:
        raise ConfigError(
            f"test_params.transforms: expected {n_param} name(s)")

    config = ExperimentConfig(
        problem_id=problem_id, mesh=mesh, integrator=integrator, dt=dt,
        n_steps=n_steps, save_every=save_every, train_axes=train_axes,
        eps_time=eps_time, eps_param=eps_param,
        net_widths=tuple(widths), net_hidden_layers=hidden_layers,
        net_contraction=contraction, train_m=train_m, train_epochs=epochs,
        train_iters_per_epoch=iters_per_epoch,
        train_restarts=restarts, train_seed=seed, train_patience=patience,
        test_kind=kind, test_n=test_n, test_seed=test_seed,
        test_domain=test_domain, test_transforms=tuple(transforms))
    # Trip axis validation (bad transform names, inverted bounds) now.
    config.normalization()
    config.test_parameters()
    return config


# ---------------------------------------------------------------------------
# pipeline stages


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _threads(args):
    n = getattr(args, "threads", 1)
    if n < 1:
        raise ConfigError("--threads must be at least 1")
    return n


def cmd_fom(args):
    config = load_config(args.config)
    out = _out_dir(args)
    params = config.train_parameters()
    problems = [config.make_problem(mu) for mu in params]
    snaps, timings = generate_snapshots(problems, threads=_threads(args))
    write_snapshots(snaps, out / SNAPSHOT_FILE)
    print(f"wrote {out / SNAPSHOT_FILE}: {snaps.n_param} trajectories, "
          f"{snaps.n_saved} saved states of size {snaps.n_h}")
    print(f"solver time: {timings.sum():.2f}s total, "
          f"{timings.max():.2f}s slowest trajectory")


def cmd_pod(args):
    config = load_config(args.config)
    out = _out_dir(args)
    snaps = read_snapshots(out / SNAPSHOT_FILE)
    family = ProblemFamily(config.problem_id, config.mesh)
    if snaps.n_h != family.n_free:
        raise CompatibilityError(
            f"snapshots hold states of size {snaps.n_h}, config mesh has "
            f"{family.n_free} free values")
    factor = cholesky(family.mass.to_dense())
    basis = two_stage_pod(snaps, config.eps_time, config.eps_param, factor)
    write_basis(basis, out / BASIS_FILE)
    dataset = build_targets(basis, family.mass, snaps,
                            normalization=config.normalization())
    write_dataset(dataset, out / DATASET_FILE)
    lead = ", ".join(f"{s:.3e}" for s in basis.sigma[:4])
    print(f"wrote {out / BASIS_FILE}: {basis.n_rb} modes "
          f"(leading energies {lead})")
    print(f"wrote {out / DATASET_FILE}: targets for {dataset.n_param} "
          f"parameters, {dataset.n_saved} steps")


def cmd_train(args):
    config = load_config(args.config)
    out = _out_dir(args)
    dataset = read_dataset(out / DATASET_FILE)
    spec = config.resolve_spec(dataset.n_rb)
    seed = config.train_seed if args.seed is None else args.seed
    train_config = TrainConfig(m=config.train_m,
                               max_epochs=config.train_epochs,
                               iters_per_epoch=config.train_iters_per_epoch,
                               restarts=config.train_restarts, seed=seed,
                               patience=config.train_patience)
    model = train(dataset, spec, train_config, threads=_threads(args))
    save_model(model, out / MODEL_FILE)
    meta = model.metadata
    print(f"wrote {out / MODEL_FILE}: restart {meta['chosen_restart']} "
          f"of {meta['restarts']}, loss {meta['final_loss']:.3e}, "
          f"validation {meta['validation']:.3e}")


def _surrogate_inputs(config, out):
    basis = read_basis(out / BASIS_FILE)
    family = ProblemFamily(config.problem_id, config.mesh)
    if basis.n_h != family.n_free:
        raise CompatibilityError(
            f"basis rows ({basis.n_h}) do not match the config mesh "
            f"({family.n_free} free values)")
    test_params = config.test_parameters()
    problems = [config.make_problem(mu) for mu in test_params]
    return basis, family, test_params, problems


def _truth_states(problems, threads):
    snaps, _ = generate_snapshots(problems, threads=threads)
    return snaps.initial[:, None, :] + snaps.deviations


def _write_reports(report, out, svg):
    rep_dir = out / REPORT_DIR
    rep_dir.mkdir(parents=True, exist_ok=True)
    write_errors_csv(report, rep_dir / f"errors_{report.label}.csv")
    write_summary_csv(report, rep_dir / f"summary_{report.label}.csv")
    write_mean_csv(report, rep_dir / f"mean_{report.label}.csv")
    if svg:
        write_error_svg(report, rep_dir / f"errors_{report.label}.svg")
    summary = report.summary()
    print(f"{report.label}: mean final error {summary['mean_final']:.3e}, "
          f"max final {summary['max_final']:.3e} over "
          f"{summary['n_test']} test parameters")
    print(f"reports in {rep_dir}")


def cmd_eval(args):
    config = load_config(args.config)
    out = _out_dir(args)
    basis, family, test_params, problems = _surrogate_inputs(config, out)
    model = load_model(out / MODEL_FILE)
    if model.spec.n_coeff != basis.n_rb:
        raise CompatibilityError(
            f"model expects {model.spec.n_coeff} coefficients, basis has "
            f"{basis.n_rb}")
    truth = _truth_states(problems, _threads(args))
    result = rollout(model, test_params, problems[0].n_saved - 1)
    states = np.stack([reconstruct(basis, family.u0, result.coeffs[i])
                       for i in range(len(problems))])
    errors = np.empty((len(problems), problems[0].n_saved))
    for i in range(len(problems)):
        errors[i], _ = relative_l2_error(family.mass, truth[i], states[i])
    peclet = (peclet_numbers(test_params)
              if config.problem_id == "advdiff-1d" else None)
    report = ErrorReport(label="net", times=saved_times(problems[0]),
                         params=test_params, errors=errors, peclet=peclet)
    print(f"network rollout: {result.seconds:.3f}s for "
          f"{len(problems)} trajectories")
    _write_reports(report, out, args.svg)


def cmd_baseline(args):
    config = load_config(args.config)
    out = _out_dir(args)
    basis, family, test_params, problems = _surrogate_inputs(config, out)
    truth = _truth_states(problems, _threads(args))
    solve = (galerkin_reassembled if config.problem_id == "nonaffine-2d"
             else galerkin_affine)
    errors = np.empty((len(problems), problems[0].n_saved))
    for i, prob in enumerate(problems):
        red = solve(family, basis, prob)
        states = reconstruct(basis, family.u0, red.coeffs)
        errors[i], _ = relative_l2_error(family.mass, truth[i], states)
    peclet = (peclet_numbers(test_params)
              if config.problem_id == "advdiff-1d" else None)
    report = ErrorReport(label="galerkin", times=saved_times(problems[0]),
                         params=test_params, errors=errors, peclet=peclet)
    _write_reports(report, out, args.svg)


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rbrom",
        description="Reduced-basis surrogates for parabolic benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, threads=False, seed=False, svg=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True,
                       help="experiment configuration JSON")
        p.add_argument("--out", default=".",
                       help="artifact directory (default: current)")
        if threads:
            p.add_argument("--threads", type=int, default=1,
                           help="worker threads")
        if seed:
            p.add_argument("--seed", type=int, default=None,
                           help="override the training seed")
        if svg:
            p.add_argument("--svg", action="store_true",
                           help="also write an SVG error plot")
        p.set_defaults(func=fn)

    add("fom", cmd_fom, "integrate full-order training trajectories",
        threads=True)
    add("pod", cmd_pod, "build the reduced basis and coefficient targets")
    add("train", cmd_train, "fit the network time stepper",
        threads=True, seed=True)
    add("eval", cmd_eval, "score the network surrogate on test parameters",
        threads=True, svg=True)
    add("baseline", cmd_baseline,
        "score the Galerkin surrogate on test parameters",
        threads=True, svg=True)
    return parser


_EXIT_CODES = (
    (ConfigError, 2),
    (SolverError, 3),
    (ArchiveError, 4),
    (TrainingError, 5),
    (CompatibilityError, 6),
)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except tuple(cls for cls, _ in _EXIT_CODES) as exc:
        for cls, code in _EXIT_CODES:
            if isinstance(exc, cls):
                print(f"error: {exc}", file=sys.stderr)
                return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
