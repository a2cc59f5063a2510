import numpy as np
import pytest

from diffiso.fields import (PlaneField, SphereField, TorusField,
                            sample_field_to_grid, warp_zero_crossing)
from diffiso.grids import DeformableGrid, ScalarGrid, apply_nonlinear_warp
from diffiso.marching_cubes import (chain_gradient, clamp_displacements,
                                    extract, save_jacobian_triplets)


def single_corner_grid():
    vals = np.ones((2, 2, 2))
    vals[0, 0, 0] = -1.0
    return ScalarGrid(dims=(2, 2, 2), origin=(0, 0, 0), spacing=1.0, values=vals)


class TestForward:
    def test_uniform_positive_empty(self):
        grid = ScalarGrid(dims=(4, 4, 4), origin=(0, 0, 0), spacing=1.0,
                          values=np.ones((4, 4, 4)))
        mesh, jac = extract(grid, 0.0)
        assert mesh.vertex_count == 0
        assert mesh.triangle_count == 0
        assert len(jac) == 0

    def test_single_corner_closed_form(self):
        mesh, jac = extract(single_corner_grid(), 0.0, mode="open")
        assert mesh.triangle_count == 1
        assert mesh.vertex_count == 3
        expected = {(0.5, 0.0, 0.0), (0.0, 0.5, 0.0), (0.0, 0.0, 0.5)}
        got = {tuple(v) for v in mesh.vertices}
        assert got == expected
        # all three vertices at u = 0.5, du/ds_a = du/ds_b = -0.25 where a is
        # the inside corner (the lower node of each crossing edge)
        assert np.allclose(jac.u, 0.5)
        assert np.all(jac.node_a == 0)
        for v in range(3):
            axis = int(np.nonzero(jac.dv_ds_a[v])[0][0])
            assert jac.dv_ds_a[v, axis] == pytest.approx(-0.25)
            assert jac.dv_ds_b[v, axis] == pytest.approx(-0.25)

    def test_sphere_genus0_euler(self, sphere_mesh_32):
        mesh, _ = sphere_mesh_32
        v = mesh.vertex_count
        e = len(mesh.undirected_edges())
        f = mesh.triangle_count
        assert v - e + f == 2
        assert 2 * e == 3 * f

    def test_torus_genus1_euler(self, torus_grid_48):
        mesh, _ = extract(torus_grid_48, 0.0)
        assert mesh.euler_characteristic() == 0
        assert 2 * len(mesh.undirected_edges()) == 3 * mesh.triangle_count

    def test_against_reference_extractor(self, sphere_grid_32):
        """Independent cross-check: vertex positions match scikit-image's
        marching cubes (same linear edge interpolation) one for one."""
        skimage = pytest.importorskip("skimage")
        from scipy.spatial import cKDTree
        ours, _ = extract(sphere_grid_32, 0.0)
        ref_v, ref_f, _, _ = skimage.measure.marching_cubes(
            sphere_grid_32.values, level=0.0, spacing=(1 / 31, 1 / 31, 1 / 31))
        assert len(ref_v) == ours.vertex_count
        dist, _ = cKDTree(ref_v).query(ours.vertices)
        # the reference reports float32 vertices, so agreement is capped near
        # single precision; still orders of magnitude below the cell size
        assert dist.max() < 1e-6

    def test_outward_orientation(self, sphere_mesh_32):
        mesh, _ = sphere_mesh_32
        vol = mesh.signed_volume()
        true_vol = 4 / 3 * np.pi * 0.35**3
        assert vol > 0
        assert vol == pytest.approx(true_vol, rel=0.02)

    def test_consistent_orientation(self, sphere_mesh_32):
        mesh, _ = sphere_mesh_32
        directed = np.concatenate([mesh.triangles[:, [0, 1]],
                                   mesh.triangles[:, [1, 2]],
                                   mesh.triangles[:, [2, 0]]])
        _, counts = np.unique(directed, axis=0, return_counts=True)
        assert np.all(counts == 1)

    def test_weld_unique_per_edge(self, sphere_mesh_32):
        mesh, _ = sphere_mesh_32
        keys = np.unique(mesh.provenance, axis=0)
        assert len(keys) == mesh.vertex_count

    def test_determinism_bitwise(self, sphere_grid_32):
        m1, j1 = extract(sphere_grid_32, 0.0)
        m2, j2 = extract(sphere_grid_32, 0.0)
        assert np.array_equal(m1.vertices, m2.vertices)
        assert np.array_equal(m1.triangles, m2.triangles)
        assert np.array_equal(j1.dv_ds_a, j2.dv_ds_a)
        assert np.array_equal(j1.u, j2.u)

    def test_exact_iso_node_perturbed(self):
        vals = np.ones((3, 3, 3))
        vals[1, 1, 1] = 0.0  # exactly at iso
        grid = ScalarGrid(dims=(3, 3, 3), origin=(0, 0, 0), spacing=1.0,
                          values=vals)
        mesh, _ = extract(grid, 0.0, mode="open")
        assert mesh.metadata["perturbed_nodes"] == 1
        assert mesh.triangle_count == 0  # perturbed to positive side

    def test_closed_mode_forces_boundary(self):
        # negative everywhere: open mode has no surface, closed mode wraps one
        vals = np.full((6, 6, 6), -1.0)
        grid = ScalarGrid(dims=(6, 6, 6), origin=(0, 0, 0), spacing=0.2,
                          values=vals)
        open_mesh, _ = extract(grid, 0.0, mode="open")
        assert open_mesh.triangle_count == 0
        closed_mesh, _ = extract(grid, 0.0, mode="closed")
        assert closed_mesh.triangle_count > 0
        from diffiso.quality import check_watertight
        assert check_watertight(closed_mesh).watertight


class Testdisplacements:
    def test_clamp_zero_unchanged(self, sphere_grid_32):
        grid = DeformableGrid.undisplaced(sphere_grid_32)
        out = clamp_displacements(grid)
        assert np.array_equal(out.displacement, grid.displacement)

    def test_clamp_by_definition(self):
        base = ScalarGrid(dims=(2, 2, 2), origin=(0, 0, 0), spacing=1.0,
                          values=np.ones((2, 2, 2)))
        disp = np.zeros((2, 2, 2, 3))
        disp[0, 0, 0] = (10.0, 0.0, 0.0)
        out = clamp_displacements(base, disp)
        assert out.displacement[0, 0, 0, 0] == pytest.approx(0.5 - 1e-4, abs=0)
        assert np.all(out.displacement[1:] == 0)

    def test_clamp_idempotent_bitwise(self, sphere_grid_32):
        rng = np.random.default_rng(9)
        disp = rng.uniform(-0.49, 0.49, size=sphere_grid_32.dims + (3,)) / 31
        grid = DeformableGrid(base=sphere_grid_32, displacement=disp)
        once = clamp_displacements(grid)
        twice = clamp_displacements(once)
        assert np.array_equal(once.displacement, twice.displacement)

    def test_displaced_extraction_position(self):
        # displace the inside corner: vertex positions follow p_a + u (p_b - p_a)
        base = single_corner_grid()
        disp = np.zeros((2, 2, 2, 3))
        disp[0, 0, 0] = (0.2, 0.1, -0.1)
        mesh, jac = extract(DeformableGrid(base=base, displacement=disp),
                            0.0, mode="open")
        p_a = np.array([0.2, 0.1, -0.1])
        for v in range(3):
            axis, i, j, k = mesh.provenance[v]
            p_b = np.array([i, j, k], dtype=float)
            p_b[axis] += 1.0
            expected = p_a + 0.5 * (p_b - p_a)
            match = np.any([np.allclose(mesh.vertices[m], expected)
                            for m in range(3)])
            assert match


class TestChainGradient:
    def test_zero_cotangent(self, sphere_mesh_32):
        _, jac = sphere_mesh_32
        grad_s, grad_d = chain_gradient(jac, np.zeros((len(jac), 3)))
        assert not grad_s.any()
        assert not grad_d.any()

    def test_single_cube_sparsity(self):
        mesh, jac = extract(single_corner_grid(), 0.0, mode="open")
        dL_dv = np.tile([0.0, 0.0, 1.0], (3, 1))
        grad_s, grad_d = chain_gradient(jac, dL_dv)
        touched = np.argwhere(grad_s != 0)
        expected_nodes = {(0, 0, 0), (0, 0, 1)}  # z-edge nodes see z-pull
        assert {tuple(t) for t in touched} == expected_nodes
        # displacement gradient lands on all four touched corners
        touched_d = {tuple(t[:3]) for t in np.argwhere(grad_d != 0)}
        assert touched_d == {(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)}

    def test_matches_finite_differences(self, sphere_grid_32):
        rng = np.random.default_rng(4)
        mesh, jac = extract(sphere_grid_32, 0.0)
        dL_dv = rng.normal(size=(len(jac), 3))

        def loss(values, disp):
            grid = DeformableGrid(
                base=sphere_grid_32.with_values(values), displacement=disp)
            m, _ = extract(grid, 0.0)
            if m.vertex_count != mesh.vertex_count:
                return None
            return float(np.sum(dL_dv * m.vertices))

        grad_s, grad_d = chain_gradient(jac, dL_dv)
        h = 1e-6 / 31
        nodes = rng.choice(np.unique(np.concatenate([jac.node_a, jac.node_b])),
                           size=24, replace=False)
        disp0 = np.zeros(sphere_grid_32.dims + (3,))
        checked = 0
        for node in nodes:
            idx = np.unravel_index(node, sphere_grid_32.dims)
            vp = sphere_grid_32.values.copy()
            vm = sphere_grid_32.values.copy()
            vp[idx] += h
            vm[idx] -= h
            lp, lm = loss(vp, disp0), loss(vm, disp0)
            if lp is None or lm is None:
                continue  # configuration flip
            fd = (lp - lm) / (2 * h)
            analytic = grad_s[idx]
            assert analytic == pytest.approx(fd, rel=1e-5, abs=1e-8)
            checked += 1
            # displacement component check at the same node
            for axis in range(3):
                dp = disp0.copy()
                dm = disp0.copy()
                dp[idx + (axis,)] += h
                dm[idx + (axis,)] -= h
                lp = loss(sphere_grid_32.values, dp)
                lm = loss(sphere_grid_32.values, dm)
                if lp is None or lm is None:
                    continue
                fd = (lp - lm) / (2 * h)
                assert grad_d[idx + (axis,)] == pytest.approx(fd, rel=1e-5, abs=1e-8)
        assert checked >= 16

    def test_dimension_mismatch(self, sphere_mesh_32):
        _, jac = sphere_mesh_32
        with pytest.raises(ValueError):
            chain_gradient(jac, np.zeros((len(jac) + 1, 3)))


class TestWarpedPlane:
    def test_flat_under_warp(self):
        plane = PlaneField(offset=0.483)
        grid = sample_field_to_grid(plane, (32, 32, 32), (0, 0, 0), 1 / 31)
        warped = apply_nonlinear_warp(grid, 0.1)
        mesh, _ = extract(warped, 0.0, mode="open")
        z = mesh.vertices[:, 2]
        assert mesh.vertex_count == 32 * 32  # one crossing per node column
        assert z.max() - z.min() < 1e-9
        assert np.std(z) < 1e-9

    def test_corrected_iso_recovers_true_plane(self):
        z0 = 0.483
        h = 1 / 31
        plane = PlaneField(offset=z0)
        grid = sample_field_to_grid(plane, (32, 32, 32), (0, 0, 0), h)
        warped = apply_nonlinear_warp(grid, 0.1)
        # corrected threshold: the linear interpolant of the warped values at
        # the true plane, computed in closed form from the two node layers
        k = int(np.floor(z0 / h))
        s_a, s_b = k * h - z0, (k + 1) * h - z0
        f = lambda s: np.exp(s) - 1 - 0.1
        u_true = -s_a / h
        iso_c = f(s_a) + u_true * (f(s_b) - f(s_a))
        mesh, _ = extract(warped, iso_c, mode="open")
        assert np.abs(mesh.vertices[:, 2] - z0).max() < 1e-9


class TestJacobianExport:
    def test_triplet_export(self, tmp_path):
        mesh, jac = extract(single_corner_grid(), 0.0, mode="open")
        path = save_jacobian_triplets(jac, tmp_path / "jac.txt")
        lines = [ln for ln in path.read_text().splitlines()
                 if not ln.startswith("#")]
        # 3 vertices x 3 coords x 4 entries (two scalars, two displacement)
        assert len(lines) == 36
        row, col, value = lines[0].split()
        assert float(value) != 0 or True
        assert int(row) == 0
