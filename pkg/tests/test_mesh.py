import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spderep.mesh import (
    MeshError,
    TriangleMesh,
    assemble_fem,
    build_structured_mesh,
    project,
    read_covariate_csv,
    read_mesh_json,
    write_mesh_json,
)


def right_triangle_mesh():
    return TriangleMesh(
        nodes=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
        triangles=np.array([[0, 1, 2]]),
    )


class TestStructuredMesh:
    def test_unit_square_minimal_split(self):
        mesh = build_structured_mesh((0, 1, 0, 1), 1.0)
        assert mesh.node_count == 4
        assert mesh.triangle_count == 2

    def test_node_count_formula(self):
        # (W/res + 1) * (H/res + 1) for exact division
        mesh = build_structured_mesh((0, 500, 0, 700), 25.0)
        assert mesh.node_count == 21 * 29 == 609

    def test_zero_resolution_rejected(self):
        with pytest.raises(MeshError, match="degenerate mesh"):
            build_structured_mesh((0, 1, 0, 1), 0.0)

    def test_resolution_exceeding_extent_rejected(self):
        with pytest.raises(MeshError, match="degenerate mesh"):
            build_structured_mesh((0, 1, 0, 1), 2.0)

    def test_empty_extent_rejected(self):
        with pytest.raises(MeshError, match="degenerate mesh"):
            build_structured_mesh((0, 0, 0, 1), 0.5)

    @given(
        nx=st.integers(min_value=1, max_value=7),
        ny=st.integers(min_value=1, max_value=7),
    )
    @settings(max_examples=20, deadline=None)
    def test_spacing_below_resolution(self, nx, ny):
        width, height = 10.0 * nx, 10.0 * ny
        mesh = build_structured_mesh((0, width, 0, height), 10.0)
        assert mesh.node_count == (nx + 1) * (ny + 1)
        assert math.isclose(mesh.total_area(), width * height, rel_tol=1e-12)


class TestMeshValidation:
    def test_negative_area_rejected(self):
        with pytest.raises(MeshError, match="signed area"):
            TriangleMesh(
                nodes=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                triangles=np.array([[0, 2, 1]]),  # clockwise
            )

    def test_index_out_of_range(self):
        with pytest.raises(MeshError, match="out of range"):
            TriangleMesh(
                nodes=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                triangles=np.array([[0, 1, 3]]),
            )

    def test_non_conforming_rejected(self):
        # Two triangles traverse the shared edge in the same direction, which
        # can only happen with an orientation/overlap defect.
        with pytest.raises(MeshError, match="edge-conforming"):
            TriangleMesh(
                nodes=np.array(
                    [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.4, 0.4]]
                ),
                triangles=np.array([[0, 1, 2], [0, 1, 3]]),
            )


class TestAssembleFem:
    def test_right_triangle_stiffness_analytic(self):
        fem = assemble_fem(right_triangle_mesh())
        expected = np.array(
            [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]]
        )
        np.testing.assert_allclose(fem.G.toarray(), expected, atol=1e-14)

    def test_right_triangle_lumped_mass(self):
        fem = assemble_fem(right_triangle_mesh())
        np.testing.assert_allclose(fem.C_diag, np.full(3, 1.0 / 6.0), rtol=1e-14)

    def test_stiffness_rows_sum_to_zero(self, small_mesh):
        fem = assemble_fem(small_mesh)
        rowsums = np.asarray(fem.G.sum(axis=1)).ravel()
        assert np.abs(rowsums).max() < 1e-10

    def test_mass_sums_to_total_area(self, small_mesh):
        fem = assemble_fem(small_mesh)
        assert math.isclose(
            fem.C_diag.sum(), small_mesh.total_area(), rel_tol=1e-12
        )

    @given(
        a=st.floats(-3, 3, allow_nan=False),
        b=st.floats(-3, 3, allow_nan=False),
    )
    @settings(max_examples=25, deadline=None)
    def test_dirichlet_energy_of_linear_function(self, small_mesh, a, b):
        # For f(x, y) = a x + b y the energy f^T G f equals |grad f|^2 * area.
        fem = assemble_fem(small_mesh)
        f = a * small_mesh.nodes[:, 0] + b * small_mesh.nodes[:, 1]
        energy = float(f @ (fem.G @ f))
        expected = (a**2 + b**2) * small_mesh.total_area()
        assert abs(energy - expected) <= 1e-10 * max(1.0, abs(expected))

    def test_constant_in_null_space(self, small_mesh):
        fem = assemble_fem(small_mesh)
        const = np.full(small_mesh.node_count, 3.7)
        assert np.abs(fem.G @ const).max() < 1e-10

    def test_permutation_equivariance(self, small_mesh):
        fem = assemble_fem(small_mesh)
        rng = np.random.default_rng(0)
        perm = rng.permutation(small_mesh.node_count)
        inv = np.argsort(perm)
        permuted = TriangleMesh(
            nodes=small_mesh.nodes[perm],
            triangles=inv[small_mesh.triangles],
        )
        fem_p = assemble_fem(permuted)
        np.testing.assert_allclose(
            fem_p.C_diag, fem.C_diag[perm], rtol=1e-12, atol=1e-15
        )
        G_perm = fem.G[np.ix_(perm, perm)].toarray()
        np.testing.assert_allclose(
            fem_p.G.toarray(), G_perm, rtol=1e-12, atol=1e-15
        )


def barycentric_oracle(p1, p2, p3, q):
    """Solve the 2x2 linear system for barycentric coordinates."""
    M = np.column_stack([p2 - p1, p3 - p1])
    l12 = np.linalg.solve(M, q - p1)
    return np.array([1.0 - l12.sum(), l12[0], l12[1]])


class TestProject:
    def test_location_at_node(self, small_mesh):
        proj = project(small_mesh, small_mesh.nodes[[7]])
        row = proj.A.toarray()[0]
        assert row[7] == pytest.approx(1.0, abs=1e-14)
        assert np.count_nonzero(np.abs(row) > 1e-12) == 1

    def test_centroid_weights(self, small_mesh):
        tri = small_mesh.triangles[3]
        centroid = small_mesh.nodes[tri].mean(axis=0)
        proj = project(small_mesh, centroid[None, :])
        row = proj.A.toarray()[0]
        np.testing.assert_allclose(row[tri], [1 / 3] * 3, rtol=1e-12)

    def test_edge_midpoint_weights(self, small_mesh):
        tri = small_mesh.triangles[0]
        mid = small_mesh.nodes[tri[:2]].mean(axis=0)
        proj = project(small_mesh, mid[None, :])
        row = proj.A.toarray()[0]
        np.testing.assert_allclose(sorted(row[tri]), [0.0, 0.5, 0.5], atol=1e-12)

    @given(
        lam=st.tuples(
            st.floats(0.05, 0.9), st.floats(0.05, 0.9), st.floats(0.05, 0.9)
        ),
        tri_idx=st.integers(0, 39),
    )
    @settings(max_examples=25, deadline=None)
    def test_interior_points_match_barycentric_oracle(
        self, small_mesh, lam, tri_idx
    ):
        lam = np.array(lam)
        lam /= lam.sum()
        tri = small_mesh.triangles[tri_idx]
        q = lam @ small_mesh.nodes[tri]
        proj = project(small_mesh, q[None, :])
        assert proj.inside[0]
        row = proj.A.toarray()[0]
        oracle = barycentric_oracle(*small_mesh.nodes[tri], q)
        np.testing.assert_allclose(row[tri], oracle, atol=1e-9)
        assert row.sum() == pytest.approx(1.0, abs=1e-12)

    def test_outside_locations_flagged_not_fatal(self, small_mesh):
        pts = np.array([[50.0, 40.0], [1e4, 1e4]])
        proj = project(small_mesh, pts)
        assert proj.inside.tolist() == [True, False]
        assert proj.outside_records() == [1]
        assert proj.A.toarray()[1].sum() == 0.0

    def test_interpolation_reproduces_linear_functions(self, small_mesh):
        rng = np.random.default_rng(3)
        pts = np.column_stack(
            [rng.uniform(0, 100, 40), rng.uniform(0, 80, 40)]
        )
        proj = project(small_mesh, pts)
        f = lambda xy: 2.0 * xy[:, 0] - 0.5 * xy[:, 1] + 3.0
        interp = proj.interpolate(f(small_mesh.nodes))
        np.testing.assert_allclose(interp, f(pts), rtol=1e-10)


class TestMeshIO:
    def test_json_roundtrip_with_covariate(self, tmp_path, small_mesh):
        cov = np.linspace(0, 1.5, small_mesh.node_count)
        path = tmp_path / "mesh.json"
        write_mesh_json(path, small_mesh, cov)
        mesh2, cov2 = read_mesh_json(path)
        np.testing.assert_array_equal(mesh2.nodes, small_mesh.nodes)
        np.testing.assert_array_equal(mesh2.triangles, small_mesh.triangles)
        np.testing.assert_array_equal(cov2, cov)

    def test_missing_keys_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"nodes": [[0, 0]]}))
        with pytest.raises(MeshError, match="must contain"):
            read_mesh_json(path)

    def test_covariate_csv_line_numbered_errors(self, tmp_path):
        path = tmp_path / "cov.csv"
        path.write_text("node_index,value\n0,0.5\nbad,1.0\n")
        with pytest.raises(ValueError, match=r"cov\.csv:3"):
            read_covariate_csv(path, 4)

    def test_covariate_csv_roundtrip(self, tmp_path):
        path = tmp_path / "cov.csv"
        path.write_text("node_index,value\n" + "".join(
            f"{i},{0.1 * i}\n" for i in range(6)
        ))
        vals = read_covariate_csv(path, 6)
        np.testing.assert_allclose(vals, 0.1 * np.arange(6))
