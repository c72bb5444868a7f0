import numpy as np
import pytest
from scipy.linalg import eigh

from rbrom.errors import ArchiveError, ConfigError
from rbrom.fem import Mesh1D, TriMesh2D, assemble_mass, assemble_stiffness, \
    dirichlet, l2_norm
from rbrom.fom import (
    FomProblem,
    ImplicitStepper,
    ProblemFamily,
    SnapshotSet,
    default_mesh,
    generate_snapshots,
    read_snapshots,
    run_fom,
    write_snapshots,
)
from rbrom.linalg import CsrMatrix


def scalar_csr(value):
    return CsrMatrix.from_dense(np.array([[value]]))


def small_problem(mu=(-1.0, 0.5), n_steps=10, save_every=2, dt=0.01,
                  integrator="crank-nicolson"):
    return FomProblem("advdiff-1d", mu, Mesh1D(0.0, 2.0, 12), integrator,
                      dt, n_steps, save_every)


class TestFomProblem:
    def test_validation(self):
        with pytest.raises(ConfigError, match="problem id"):
            FomProblem("heat-3d", (1.0,), Mesh1D(0, 1, 2), "backward-euler",
                       0.1, 2, 1)
        with pytest.raises(ConfigError, match="integrator"):
            small_problem(integrator="forward-euler")
        with pytest.raises(ConfigError, match="components"):
            FomProblem("advdiff-2d", (1.0, 2.0), TriMesh2D(2),
                       "backward-euler", 0.1, 2, 1)
        with pytest.raises(ConfigError):
            small_problem(dt=-0.1)

    def test_saved_count(self):
        assert small_problem(n_steps=10, save_every=2).n_saved == 6
        assert small_problem(n_steps=10, save_every=3).n_saved == 4


class TestImplicitStepper:
    def test_scalar_crank_nicolson(self):
        theta, dt, u0 = 2.0, 0.1, 3.0
        stepper = ImplicitStepper(scalar_csr(1.0), scalar_csr(theta), dt,
                                  "crank-nicolson")
        u1 = stepper.step(np.array([u0]), 0.0)
        assert np.isclose(u1[0], (1.0 - dt * theta / 2) / (1.0 + dt * theta / 2) * u0)

    def test_scalar_backward_euler(self):
        theta, dt, u0 = 2.0, 0.1, 3.0
        stepper = ImplicitStepper(scalar_csr(1.0), scalar_csr(theta), dt,
                                  "backward-euler")
        u1 = stepper.step(np.array([u0]), 0.0)
        assert np.isclose(u1[0], u0 / (1.0 + dt * theta))

    def test_forcing_evaluation_times(self):
        seen = []

        def forcing(t):
            seen.append(t)
            return np.array([1.0])

        dt = 0.2
        cn = ImplicitStepper(scalar_csr(1.0), scalar_csr(0.0), dt,
                             "crank-nicolson", forcing=forcing)
        cn.step(np.array([0.0]), 1.0)
        be = ImplicitStepper(scalar_csr(1.0), scalar_csr(0.0), dt,
                             "backward-euler", forcing=forcing)
        be.step(np.array([0.0]), 1.0)
        assert np.allclose(seen, [1.1, 1.2])

    def test_forced_scalar_value(self):
        # (1 + dt/2 k) u1 = (1 - dt/2 k) u0 + dt * c
        stepper = ImplicitStepper(scalar_csr(1.0), scalar_csr(1.0), 0.5,
                                  "crank-nicolson",
                                  forcing=lambda t: np.array([2.0]))
        u1 = stepper.step(np.array([1.0]), 0.0)
        assert np.isclose(u1[0], (0.75 * 1.0 + 0.5 * 2.0) / 1.25)

    def test_zero_state_stays_zero_without_forcing(self):
        stepper = ImplicitStepper(scalar_csr(2.0), scalar_csr(1.0), 0.1,
                                  "backward-euler")
        u = np.zeros(1)
        for _ in range(5):
            u = stepper.step(u, 0.0)
        assert np.all(u == 0.0)


class TestRunFom:
    def test_save_bookkeeping(self):
        problem = small_problem(n_steps=10, save_every=3, dt=0.01)
        times, states = run_fom(problem)
        assert times.shape == (4,)
        assert np.allclose(times, [0.0, 0.03, 0.06, 0.09])
        family = ProblemFamily(problem.problem_id, problem.mesh)
        assert np.array_equal(states[0], family.u0)

    def test_initial_state_matches_interpolant(self):
        problem = small_problem()
        family = ProblemFamily(problem.problem_id, problem.mesh)
        x = problem.mesh.nodes()[1:-1]
        assert np.allclose(family.u0, x * (2.0 - x) * np.exp(2.0 * x))

    def test_norm_nonincreasing_backward_euler(self):
        problem = small_problem(integrator="backward-euler", n_steps=50,
                                save_every=1, dt=0.02)
        _, states = run_fom(problem)
        family = ProblemFamily(problem.problem_id, problem.mesh)
        norms = [l2_norm(family.mass, s) for s in states]
        diffs = np.diff(norms)
        assert np.all(diffs <= 1e-12 * norms[0])

    def test_2d_benchmarks_run(self):
        for pid, mu in (("advdiff-2d", (0.7,)), ("nonaffine-2d", (-0.5, -0.2))):
            problem = FomProblem(pid, mu, TriMesh2D(4), "backward-euler",
                                 0.05, 4, 2)
            times, states = run_fom(problem)
            assert states.shape[0] == 3
            assert np.all(np.isfinite(states))

    def test_nonaffine_source_is_periodic_load(self):
        family = ProblemFamily("nonaffine-2d", TriMesh2D(3))
        forcing = family.forcing((-0.5, -0.5))
        assert np.allclose(forcing(0.25), -forcing(0.75))
        scale = np.abs(forcing(0.25)).max()
        assert np.abs(forcing(0.5)).max() < 1e-15 * scale

    def test_family_mismatch_rejected(self):
        problem = small_problem()
        family = ProblemFamily("advdiff-1d", Mesh1D(0.0, 2.0, 20))
        from rbrom.errors import CompatibilityError
        with pytest.raises(CompatibilityError):
            run_fom(problem, family)


class TestTemporalConvergence:
    @staticmethod
    def _single_mode_setup():
        mesh = Mesh1D(0.0, 1.0, 12)
        bc = dirichlet(mesh)
        mass = assemble_mass(mesh, bc)
        stiff = assemble_stiffness(mesh, bc)
        lam, vecs = eigh(stiff.to_dense(), mass.to_dense())
        v = vecs[:, 0]
        v = v / l2_norm(mass, v)
        return mass, stiff, float(lam[0]), v

    def _errors(self, scheme, steps_list, horizon=0.2):
        mass, stiff, lam, v = self._single_mode_setup()
        errors = []
        for n in steps_list:
            dt = horizon / n
            stepper = ImplicitStepper(mass, stiff, dt, scheme)
            u = v.copy()
            for k in range(n):
                u = stepper.step(u, k * dt)
            exact = np.exp(-lam * horizon) * v
            errors.append(l2_norm(mass, u - exact))
        return np.array(errors)

    def test_crank_nicolson_second_order(self):
        steps = (8, 16, 32, 64)
        errors = self._errors("crank-nicolson", steps)
        slope = np.polyfit(np.log(1.0 / np.array(steps)), np.log(errors), 1)[0]
        assert slope >= 1.9

    def test_backward_euler_first_order(self):
        steps = (8, 16, 32, 64)
        errors = self._errors("backward-euler", steps)
        slope = np.polyfit(np.log(1.0 / np.array(steps)), np.log(errors), 1)[0]
        assert slope >= 0.9


class TestSnapshots:
    @staticmethod
    def _batch(threads=1):
        problems = [small_problem(mu=(m1, m2))
                    for m1 in (-1.5, -0.5) for m2 in (0.3, 0.8)]
        return generate_snapshots(problems, threads=threads)

    def test_shapes_and_zero_first_deviation(self):
        snaps, timings = self._batch()
        assert snaps.params.shape == (4, 2)
        assert snaps.deviations.shape == (4, 6, 11)
        assert np.all(snaps.deviations[:, 0, :] == 0.0)
        assert timings.shape == (4,) and np.all(timings > 0.0)

    def test_thread_count_does_not_change_results(self):
        a, _ = self._batch(threads=1)
        b, _ = self._batch(threads=3)
        assert a.deviations.tobytes() == b.deviations.tobytes()
        assert a.initial.tobytes() == b.initial.tobytes()

    def test_mixed_settings_rejected(self):
        problems = [small_problem(), small_problem(dt=0.02)]
        with pytest.raises(ConfigError, match="share"):
            generate_snapshots(problems)

    def test_default_meshes(self):
        assert default_mesh("advdiff-1d").n_el == 101
        assert default_mesh("advdiff-2d").nx == 32


class TestSnapshotArchive:
    def test_roundtrip_is_byte_exact(self, tmp_path):
        snaps, _ = TestSnapshots._batch()
        path = tmp_path / "snaps.bin"
        write_snapshots(snaps, path)
        loaded = read_snapshots(path)
        assert np.array_equal(loaded.params, snaps.params)
        assert loaded.initial.tobytes() == snaps.initial.tobytes()
        assert loaded.deviations.tobytes() == snaps.deviations.tobytes()
        # Writing again must reproduce the identical file.
        path2 = tmp_path / "snaps2.bin"
        write_snapshots(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_corrupt_payload_detected(self, tmp_path):
        snaps, _ = TestSnapshots._batch()
        path = tmp_path / "snaps.bin"
        write_snapshots(snaps, path)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ArchiveError, match="checksum"):
            read_snapshots(path)

    def test_truncation_detected(self, tmp_path):
        snaps, _ = TestSnapshots._batch()
        path = tmp_path / "snaps.bin"
        write_snapshots(snaps, path)
        path.write_bytes(path.read_bytes()[:-20])
        with pytest.raises(ArchiveError, match="size|truncated"):
            read_snapshots(path)

    def test_bad_magic_detected(self, tmp_path):
        path = tmp_path / "nonsense.bin"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
        with pytest.raises(ArchiveError, match="magic"):
            read_snapshots(path)

    def test_inconsistent_shapes_rejected(self):
        with pytest.raises(ValueError):
            SnapshotSet(np.zeros((2, 1)), np.zeros((3, 4)), np.zeros((2, 5, 4)))
