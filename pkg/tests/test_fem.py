import numpy as np
import pytest

from rbrom.errors import SolverError
from rbrom.fem import (
    Mesh1D,
    TriMesh2D,
    assemble_advection,
    assemble_mass,
    assemble_stiffness,
    assemble_weighted_load_fn,
    assemble_weighted_mass,
    assemble_weighted_mass_fn,
    assemble_weighted_load,
    dirichlet,
    interpolate,
    inverse_distance_weight,
    l2_norm,
    natural,
)
from rbrom.linalg import solve_spd

# Degree-2 exact interior rule on the reference triangle, different points
# from the production mid-edge rule so the cross-check is independent.
_REF_QP = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
_REF_W = np.full(3, 1 / 6)


def naive_local_matrices(p0, p1, p2, velocity):
    """Reference element matrices via mapped quadrature on one triangle."""
    jac = np.column_stack([p1 - p0, p2 - p0])
    detj = np.linalg.det(jac)
    grads_ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    grads = grads_ref @ np.linalg.inv(jac)
    mass = np.zeros((3, 3))
    stiff = detj * (grads @ grads.T) * 0.5
    adv = np.zeros((3, 3))
    vdotg = grads @ np.asarray(velocity)
    for (xi, eta), w in zip(_REF_QP, _REF_W):
        shape = np.array([1.0 - xi - eta, xi, eta])
        mass += w * detj * np.outer(shape, shape)
        adv += w * detj * np.outer(shape, vdotg)
    return mass, stiff, adv


def naive_assemble(mesh, velocity):
    n = mesh.n_nodes
    xy = mesh.nodes()
    mass = np.zeros((n, n))
    stiff = np.zeros((n, n))
    adv = np.zeros((n, n))
    for tri in mesh.triangles():
        me, ke, ce = naive_local_matrices(xy[tri[0]], xy[tri[1]], xy[tri[2]],
                                          velocity)
        for a in range(3):
            for b in range(3):
                mass[tri[a], tri[b]] += me[a, b]
                stiff[tri[a], tri[b]] += ke[a, b]
                adv[tri[a], tri[b]] += ce[a, b]
    return mass, stiff, adv


class TestMeshes:
    def test_interval_mesh(self):
        mesh = Mesh1D(0.0, 2.0, 4)
        assert mesh.h == 0.5
        assert np.allclose(mesh.nodes(), [0.0, 0.5, 1.0, 1.5, 2.0])
        assert np.array_equal(mesh.boundary_nodes(), [0, 4])

    def test_interval_mesh_validation(self):
        with pytest.raises(ValueError):
            Mesh1D(0.0, 1.0, 0)
        with pytest.raises(ValueError):
            Mesh1D(1.0, 1.0, 3)

    def test_benchmark_triangulation_counts(self):
        mesh = TriMesh2D(32)
        assert mesh.n_nodes == 1089
        assert mesh.n_tri == 2048
        assert mesh.boundary_nodes().size == 128
        assert dirichlet(mesh).n_free == 961

    def test_triangle_orientation_and_area(self):
        mesh = TriMesh2D(3)
        xy = mesh.nodes()
        total = 0.0
        for tri in mesh.triangles():
            p0, p1, p2 = xy[tri]
            d1, d2 = p1 - p0, p2 - p0
            area2 = d1[0] * d2[1] - d1[1] * d2[0]
            assert area2 > 0
            total += area2 / 2
        assert np.isclose(total, 1.0)

    def test_degenerate_element_rejected(self):
        class Collapsed(TriMesh2D):
            def nodes(self):
                out = super().nodes()
                out[3] = out[0]
                return out

        with pytest.raises(SolverError, match="degenerate"):
            assemble_mass(Collapsed(2), natural(Collapsed(2)))


class TestAssembly1D:
    def test_mass_single_free_node(self):
        mesh = Mesh1D(0.0, 1.0, 2)
        m = assemble_mass(mesh, dirichlet(mesh))
        assert np.allclose(m.to_dense(), [[1.0 / 3.0]])

    def test_mass_full_matrix(self):
        mesh = Mesh1D(0.0, 1.0, 2)
        m = assemble_mass(mesh, natural(mesh)).to_dense()
        h = 0.5
        expected = h / 6.0 * np.array([[2.0, 1.0, 0.0],
                                       [1.0, 4.0, 1.0],
                                       [0.0, 1.0, 2.0]])
        assert np.allclose(m, expected)

    def test_mass_total_is_domain_measure(self):
        mesh = Mesh1D(-1.0, 3.0, 17)
        m = assemble_mass(mesh, natural(mesh))
        assert np.isclose(m.to_dense().sum(), 4.0)

    def test_stiffness_single_free_node(self):
        mesh = Mesh1D(0.0, 1.0, 2)
        k = assemble_stiffness(mesh, dirichlet(mesh))
        assert np.allclose(k.to_dense(), [[4.0]])

    def test_stiffness_constant_in_kernel(self):
        mesh = Mesh1D(0.0, 2.0, 9)
        k = assemble_stiffness(mesh, natural(mesh), diffusion=0.7)
        assert np.abs(k.matvec(np.ones(mesh.n_nodes))).max() < 1e-13

    def test_advection_interior_row_is_central_difference(self):
        mesh = Mesh1D(0.0, 1.0, 4)
        c = assemble_advection(mesh, natural(mesh), velocity=2.0).to_dense()
        assert np.allclose(c[2], [0.0, -1.0, 0.0, 1.0, 0.0])

    def test_advection_skew_on_free_dofs(self):
        mesh = Mesh1D(0.0, 1.0, 8)
        bc = dirichlet(mesh)
        c = assemble_advection(mesh, bc, velocity=1.3).to_dense()
        assert np.abs(c + c.T).max() < 1e-14

    def test_advection_row_sums_vanish(self):
        mesh = Mesh1D(0.0, 1.0, 5)
        c = assemble_advection(mesh, natural(mesh), velocity=1.0).to_dense()
        assert np.abs(c.sum(axis=1)).max() < 1e-14


class TestAssembly2D:
    def test_against_quadrature_reference(self):
        mesh = TriMesh2D(2)
        bc = natural(mesh)
        velocity = (2.0, 0.7)
        ref_m, ref_k, ref_c = naive_assemble(mesh, velocity)
        assert np.abs(assemble_mass(mesh, bc).to_dense() - ref_m).max() < 1e-13
        assert np.abs(
            assemble_stiffness(mesh, bc).to_dense() - ref_k).max() < 1e-12
        assert np.abs(
            assemble_advection(mesh, bc, velocity).to_dense()
            - ref_c).max() < 1e-13

    def test_mass_total_is_domain_measure(self):
        mesh = TriMesh2D(5)
        m = assemble_mass(mesh, natural(mesh))
        assert np.isclose(m.to_dense().sum(), 1.0)

    def test_stiffness_constant_in_kernel(self):
        mesh = TriMesh2D(4)
        k = assemble_stiffness(mesh, natural(mesh), diffusion=2.0)
        assert np.abs(k.matvec(np.ones(mesh.n_nodes))).max() < 1e-13

    def test_advection_row_sums_vanish(self):
        mesh = TriMesh2D(3)
        c = assemble_advection(mesh, natural(mesh), (1.0, -2.0)).to_dense()
        assert np.abs(c.sum(axis=1)).max() < 1e-13

    def test_dirichlet_elimination_is_principal_submatrix(self):
        mesh = TriMesh2D(3)
        full = assemble_stiffness(mesh, natural(mesh)).to_dense()
        bc = dirichlet(mesh)
        sub = assemble_stiffness(mesh, bc).to_dense()
        assert np.allclose(sub, full[np.ix_(bc.free, bc.free)])


class TestWeightedAssembly:
    def test_weight_value(self):
        assert np.isclose(inverse_distance_weight(0.0, 0.0, (-1.0, -1.0)),
                          1.0 / np.sqrt(2.0))

    def test_weight_domain_validation(self):
        with pytest.raises(ValueError, match="outside"):
            inverse_distance_weight(0.0, 0.0, (0.5, -0.5))

    def test_constant_weight_gives_scaled_mass(self):
        mesh = TriMesh2D(4)
        bc = dirichlet(mesh)
        g = assemble_weighted_mass_fn(mesh, bc, lambda x, y: 3.0 * np.ones_like(x))
        m = assemble_mass(mesh, bc)
        assert np.abs(g.to_dense() - 3.0 * m.to_dense()).max() < 1e-13

    @pytest.mark.parametrize("weight,integral", [
        (lambda x, y: np.ones_like(x), 1.0),
        (lambda x, y: x**2, 1.0 / 3.0),
        (lambda x, y: x * y, 0.25),
        (lambda x, y: (x + y) ** 2, 7.0 / 6.0),
    ])
    def test_quadrature_exact_for_quadratic_weights(self, weight, integral):
        # Partition of unity turns the load-vector sum and the matrix-entry
        # total into plain integrals of the weight; both the coarse and the
        # refined mesh must reproduce the analytic value to round-off.
        for nx in (3, 6):
            mesh = TriMesh2D(nx)
            bc = natural(mesh)
            load = assemble_weighted_load_fn(mesh, bc, weight)
            gmat = assemble_weighted_mass_fn(mesh, bc, weight)
            assert abs(load.sum() - integral) < 1e-12
            assert abs(gmat.to_dense().sum() - integral) < 1e-12

    def test_parametrized_forms_match_fn_forms(self):
        mesh = TriMesh2D(3)
        bc = dirichlet(mesh)
        mu = (-0.3, -0.7)
        g1 = assemble_weighted_mass(mesh, bc, mu).to_dense()
        g2 = assemble_weighted_mass_fn(
            mesh, bc, lambda x, y: inverse_distance_weight(x, y, mu)).to_dense()
        assert np.array_equal(g1, g2)
        l1 = assemble_weighted_load(mesh, bc, mu)
        assert np.all(np.isfinite(l1)) and l1.size == bc.n_free


class TestInterpolationAndNorms:
    def test_interpolate_1d(self):
        mesh = Mesh1D(0.0, 2.0, 4)
        v = interpolate(mesh, lambda x: 3.0 * x)
        assert np.allclose(v, [0.0, 1.5, 3.0, 4.5, 6.0])

    def test_interpolate_2d(self):
        mesh = TriMesh2D(2)
        v = interpolate(mesh, lambda x, y: x + 10.0 * y)
        assert v.size == 9
        assert np.isclose(v[4], 0.5 + 5.0)

    def test_l2_norm_of_constant(self):
        mesh = Mesh1D(0.0, 2.0, 8)
        m = assemble_mass(mesh, natural(mesh))
        assert np.isclose(l2_norm(m, np.ones(mesh.n_nodes)), np.sqrt(2.0))

    def test_l2_norm_linear_exact(self):
        # ||x||_{L2(0,1)} = 1/sqrt(3); x is in the FE space so the discrete
        # norm is exact.
        mesh = Mesh1D(0.0, 1.0, 10)
        m = assemble_mass(mesh, natural(mesh))
        v = interpolate(mesh, lambda x: x)
        assert np.isclose(l2_norm(m, v), 1.0 / np.sqrt(3.0))


def l2_error_gauss_1d(mesh, u_full, exact):
    x = mesh.nodes()
    h = mesh.h
    offsets = (0.5 - np.sqrt(3.0) / 6.0, 0.5 + np.sqrt(3.0) / 6.0)
    err2 = 0.0
    ul, ur = u_full[:-1], u_full[1:]
    xl = x[:-1]
    for g in offsets:
        xq = xl + g * h
        uh = (1.0 - g) * ul + g * ur
        err2 += (h / 2.0) * np.sum((uh - exact(xq)) ** 2)
    return np.sqrt(err2)


class TestConvergence:
    def test_ritz_solution_second_order_1d(self):
        errors = []
        sizes = (8, 16, 32, 64)
        for n in sizes:
            mesh = Mesh1D(0.0, 1.0, n)
            bc = dirichlet(mesh)
            k = assemble_stiffness(mesh, bc)
            m = assemble_mass(mesh, bc)
            f = bc.restrict(interpolate(
                mesh, lambda x: np.pi**2 * np.sin(np.pi * x)))
            u = solve_spd(k.to_dense(), m.matvec(f))
            errors.append(l2_error_gauss_1d(
                mesh, bc.extend(u), lambda x: np.sin(np.pi * x)))
        h = 1.0 / np.array(sizes)
        slope = np.polyfit(np.log(h), np.log(errors), 1)[0]
        assert slope >= 1.9

    def test_ritz_solution_second_order_2d(self):
        errors = []
        sizes = (8, 16, 32)
        for nx in sizes:
            mesh = TriMesh2D(nx)
            bc = dirichlet(mesh)
            k = assemble_stiffness(mesh, bc)
            m = assemble_mass(mesh, bc)
            exact = interpolate(
                mesh, lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y))
            f = bc.restrict(2.0 * np.pi**2 * exact)
            u = solve_spd(k.to_dense(), m.matvec(f))
            errors.append(l2_norm(m, u - bc.restrict(exact)))
        h = 1.0 / np.array(sizes)
        slope = np.polyfit(np.log(h), np.log(errors), 1)[0]
        assert slope >= 1.9
