"""Mesh generation, strain operators, and the file formats."""

import numpy as np
import pytest

from fmopt import fem2d
from fmopt.fem2d import LoadSpec, MeshSpec, build_instance, element_matrices
from fmopt.model import InvalidInstance, MaterialState
from fmopt.oracle import compliances_reference, dense_stiffness_reference
from conftest import random_feasible_blocks


def hand_B_unit_square(xi, eta):
    """Independent transcription: 3x8 strain matrix for the unit 1x1 element.

    Unit square, hx = hy = 1, so physical gradients are 2x the reference
    gradients.  Node order CCW from lower-left; DOFs node-major (x, y).
    """
    dxi = 0.25 * np.array([-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)])
    deta = 0.25 * np.array([-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)])
    gx, gy = 2.0 * dxi, 2.0 * deta
    B = np.zeros((3, 8))
    for a in range(4):
        B[0, 2 * a] = gx[a]
        B[1, 2 * a + 1] = gy[a]
        B[2, 2 * a] = 0.5 * gy[a]
        B[2, 2 * a + 1] = 0.5 * gx[a]
    return B


class TestElementMatrices:
    def test_unit_square_hand_computed(self):
        spec = MeshSpec(nx=1, ny=1, lx=1.0, ly=1.0)
        node_ids, B_local = element_matrices(spec)
        assert node_ids.shape == (1, 4)
        a = 1.0 / np.sqrt(3.0)
        pts = [(-a, -a), (a, -a), (a, a), (-a, a)]
        for ig, (xi, eta) in enumerate(pts):
            np.testing.assert_allclose(B_local[0, ig], hand_B_unit_square(xi, eta), atol=1e-14)

    def test_one_element_left_fixed_dimensions(self, tiny_mesh_instance):
        inst = tiny_mesh_instance
        assert inst.N == 4 and inst.m == 1 and inst.k == 3 and inst.nig == 4
        for el in inst.elements:
            assert el.values.shape == (4, 3, 4)

    def test_gram_form_is_psd(self, rng):
        spec = MeshSpec(nx=3, ny=2, lx=1.5, ly=1.0)
        node_ids, B_local = element_matrices(spec)
        for i in range(node_ids.shape[0]):
            gram = np.einsum("lka,lkb->ab", B_local[i], B_local[i])
            np.testing.assert_allclose(gram, gram.T, atol=1e-14)
            assert np.linalg.eigvalsh(gram)[0] >= -1e-12

    def test_rigid_translation_in_strain_nullspace(self):
        # constant displacement before boundary fixing: derivatives kill it
        spec = MeshSpec(nx=2, ny=1, lx=2.0, ly=1.0)
        node_ids, B_local = element_matrices(spec)
        for direction in (np.array([1.0, 0.0]), np.array([0.0, 1.0])):
            u_local = np.tile(direction, 4)  # same motion at all 4 nodes
            for i in range(node_ids.shape[0]):
                strains = np.einsum("lka,a->lk", B_local[i], u_local)
                np.testing.assert_allclose(strains, 0.0, atol=1e-13)


class TestBuildInstance:
    def test_free_dof_count(self):
        spec = MeshSpec(nx=3, ny=2, lx=3.0, ly=2.0)
        inst = build_instance(spec, 0.3, 3.0, 0.05, 5.0, 8.0)
        free_nodes = (3 + 1) * (2 + 1) - (2 + 1)  # left column fixed
        assert inst.N == 2 * free_nodes
        assert inst.m == 6

    def test_assembled_matches_model_operator(self, rng, small_mesh_instance):
        inst = small_mesh_instance
        blocks = random_feasible_blocks(rng, inst.m, 3, 0.3, 3.0, 0.05)
        A = dense_stiffness_reference(inst, blocks)
        np.testing.assert_allclose(A, A.T, atol=1e-12)
        from fmopt.model import apply_A

        E = MaterialState.from_dense(blocks)
        v = rng.normal(0, 1, inst.N)
        np.testing.assert_allclose(apply_A(inst, E, v), A @ v, atol=1e-12)

    def test_stiffness_positive_definite_after_fixing(self, rng, small_mesh_instance):
        inst = small_mesh_instance
        blocks = random_feasible_blocks(rng, inst.m, 3, 0.3, 3.0, 0.05)
        A = dense_stiffness_reference(inst, blocks)
        assert np.linalg.eigvalsh(A)[0] > 0

    def test_load_on_fixed_edge_rejected(self):
        spec = MeshSpec(nx=2, ny=2, loads=(LoadSpec("left_edge", (0.0, -1.0)),))
        with pytest.raises(InvalidInstance):
            build_instance(spec, 0.3, 3.0, 0.05, 5.0, 8.0)

    def test_load_distribution_sums_to_force(self):
        spec = MeshSpec(nx=2, ny=2, loads=(LoadSpec("right_edge", (0.0, -1.0)),))
        inst = build_instance(spec, 0.3, 3.0, 0.05, 5.0, 8.0)
        assert inst.loads[0].sum() == pytest.approx(-1.0)

    def test_explicit_node_selector(self):
        spec = MeshSpec(nx=2, ny=2, loads=(LoadSpec((8,), (0.0, -1.0)),))
        inst = build_instance(spec, 0.3, 3.0, 0.05, 5.0, 8.0)
        assert np.count_nonzero(inst.loads[0]) == 1


class TestReferenceCompliance:
    def test_matches_dense_lu_oracle(self, rng, tiny_mesh_instance):
        inst = tiny_mesh_instance
        blocks = random_feasible_blocks(rng, 1, 3, 0.3, 3.0, 0.05)
        E = MaterialState.from_dense(blocks)
        got = fem2d.reference_compliance(inst, E)
        ref = compliances_reference(inst, blocks)
        np.testing.assert_allclose(got, ref, rtol=1e-10)

    def test_scaling_inverse_in_material(self, rng, small_mesh_instance):
        inst = small_mesh_instance
        blocks = random_feasible_blocks(rng, inst.m, 3, 0.3, 3.0, 0.05)
        base = fem2d.reference_compliance(inst, MaterialState.from_dense(blocks))
        half = fem2d.reference_compliance(inst, MaterialState.from_dense(0.5 * blocks))
        np.testing.assert_allclose(half, 2.0 * base, rtol=1e-10)

    def test_zero_load_zero_compliance(self, rng):
        spec = MeshSpec(nx=2, ny=2, loads=(LoadSpec("right_edge", (0.0, 0.0)),))
        inst = build_instance(spec, 0.3, 3.0, 0.05, 5.0, 8.0)
        E = MaterialState.from_dense(random_feasible_blocks(rng, inst.m, 3, 0.3, 3.0, 0.05))
        comp = fem2d.reference_compliance(inst, E)
        np.testing.assert_allclose(comp, 0.0, atol=1e-14)


class TestFileFormats:
    def test_instance_roundtrip_bit_exact(self, tmp_path, small_mesh_instance):
        inst = small_mesh_instance
        p1 = tmp_path / "a.fmo"
        p2 = tmp_path / "b.fmo"
        fem2d.write_instance(inst, p1)
        again = fem2d.read_instance(p1)
        fem2d.write_instance(again, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert again.m == inst.m and again.N == inst.N and again.L == inst.L
        np.testing.assert_array_equal(again.loads, inst.loads)
        np.testing.assert_array_equal(again.rho_l, inst.rho_l)
        for a, b in zip(inst.elements, again.elements):
            np.testing.assert_array_equal(a.cols, b.cols)
            np.testing.assert_array_equal(a.values, b.values)
        for name in ("r", "gamma", "eta", "nu"):
            assert getattr(again, name) == getattr(inst, name)

    def test_instance_rejects_wrong_magic(self, tmp_path):
        p = tmp_path / "bad.fmo"
        p.write_text("not-an-instance\n")
        with pytest.raises(InvalidInstance):
            fem2d.read_instance(p)

    def test_state_roundtrip_bit_exact(self, tmp_path, rng):
        state = MaterialState.from_dense(rng.normal(0, 1, (3, 3, 3)))
        p1 = tmp_path / "s1.fmo"
        p2 = tmp_path / "s2.fmo"
        fem2d.write_state(state, p1)
        again = fem2d.read_state(p1)
        fem2d.write_state(again, p2)
        assert p1.read_bytes() == p2.read_bytes()
        np.testing.assert_array_equal(state.dense(), again.dense())

    def test_mesh_spec_validation(self):
        with pytest.raises(InvalidInstance):
            MeshSpec(nx=0, ny=1)
        with pytest.raises(InvalidInstance):
            MeshSpec(nx=1, ny=1, fixed_edge="diagonal")
        with pytest.raises(InvalidInstance):
            MeshSpec(nx=1, ny=1, loads=())
