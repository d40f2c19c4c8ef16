import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headforge.model import (DimensionError, ModelFormatError, evaluate_shape,
                             evaluate_texture, load_model, save_model, synthesize_model)


class TestEvaluateShape:
    def test_zero_coefficients_give_mean_shape(self, model):
        verts = evaluate_shape(model, np.zeros(model.k_id), np.zeros(model.k_exp))
        assert np.array_equal(verts.ravel(), model.mean_shape.astype(np.float64))

    def test_full_scale_dimensions_accepted(self):
        big = synthesize_model(seed=2, n_subdiv=2, k_id=80, k_exp=64, k_tex=80)
        verts = evaluate_shape(big, np.zeros(80), np.zeros(64))
        assert verts.shape == (big.n_vertices, 3)
        tex = evaluate_texture(big, np.zeros(80))
        assert tex.shape == (big.n_vertices, 3)

    def test_wrong_lengths_rejected(self, model):
        with pytest.raises(DimensionError):
            evaluate_shape(model, np.zeros(model.k_id + 1), np.zeros(model.k_exp))
        with pytest.raises(DimensionError):
            evaluate_shape(model, np.zeros(model.k_id), np.zeros(model.k_exp - 1))
        with pytest.raises(DimensionError):
            evaluate_texture(model, np.zeros(model.k_tex + 2))

    def test_unit_vector_extracts_basis_column(self, model):
        # oracle: direct matrix-column extraction
        for j in (0, model.k_id - 1):
            e = np.zeros(model.k_id)
            e[j] = 1.0
            verts = evaluate_shape(model, e, np.zeros(model.k_exp))
            expected = (model.mean_shape.astype(np.float64)
                        + model.basis_id[:, j].astype(np.float64))
            np.testing.assert_allclose(verts.ravel(), expected, atol=1e-12)

    def test_unit_vector_extracts_texture_column(self, model):
        e = np.zeros(model.k_tex)
        e[2] = 1.0
        tex = evaluate_texture(model, e)
        expected = (model.mean_texture.astype(np.float64)
                    + model.basis_tex[:, 2].astype(np.float64))
        np.testing.assert_allclose(tex.ravel(), expected, atol=1e-12)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=15, deadline=None)
    def test_shape_is_affine_in_coefficients(self, data_seed):
        model = synthesize_model(seed=7, n_subdiv=1)
        rng = np.random.default_rng(data_seed)
        a1, a2 = rng.normal(size=(2, model.k_id))
        b = rng.normal(size=model.k_exp)
        lhs = evaluate_shape(model, a1 + a2, b) - evaluate_shape(model, a1, b)
        rhs = (model.basis_id.astype(np.float64) @ a2).reshape(-1, 3)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


class TestSynthesizeModel:
    def test_deterministic(self):
        a = synthesize_model(seed=9, n_subdiv=2)
        b = synthesize_model(seed=9, n_subdiv=2)
        for field in ("mean_shape", "mean_texture", "basis_id", "basis_exp",
                      "basis_tex", "triangles", "landmark_indices"):
            assert np.array_equal(getattr(a, field), getattr(b, field)), field

    def test_icosphere_vertex_count(self):
        # 10 * 4**s + 2 for subdivision level s
        model = synthesize_model(seed=1, n_subdiv=3)
        assert model.n_vertices == 642

    def test_basis_columns_orthonormal(self, model):
        for basis in (model.basis_id, model.basis_exp, model.basis_tex):
            b = basis.astype(np.float64)
            np.testing.assert_allclose(b.T @ b, np.eye(b.shape[1]), atol=1e-6)

    def test_invariants_hold_for_many_seeds(self):
        for seed in range(100):
            model = synthesize_model(seed=seed, n_subdiv=1, k_id=4, k_exp=3, k_tex=4)
            model.validate()

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            synthesize_model(seed=0, n_subdiv=0)
        with pytest.raises(ValueError):
            synthesize_model(seed=0, k_id=0)


class TestModelIO:
    def test_round_trip_bit_exact(self, model, tmp_path):
        path = tmp_path / "m.p3dm"
        save_model(model, path)
        loaded = load_model(path)
        for field in ("mean_shape", "mean_texture", "basis_id", "basis_exp",
                      "basis_tex", "triangles", "landmark_indices",
                      "coeff_scales_id", "coeff_scales_exp", "coeff_scales_tex"):
            assert np.array_equal(getattr(model, field), getattr(loaded, field)), field

    def test_round_trip_many_seeds(self, tmp_path):
        for seed in range(8):
            m = synthesize_model(seed=seed, n_subdiv=1)
            p = tmp_path / f"m{seed}.p3dm"
            save_model(m, p)
            again = load_model(p)
            assert np.array_equal(m.basis_id, again.basis_id)

    def test_corrupt_magic_rejected(self, model, tmp_path):
        path = tmp_path / "m.p3dm"
        save_model(model, path)
        blob = bytearray(path.read_bytes())
        blob[:5] = b"WRONG"
        path.write_bytes(bytes(blob))
        with pytest.raises(ModelFormatError, match="magic"):
            load_model(path)

    def test_inflated_header_rejected(self, model, tmp_path):
        import struct
        path = tmp_path / "m.p3dm"
        save_model(model, path)
        blob = bytearray(path.read_bytes())
        n = struct.unpack_from("<I", blob, 5)[0]
        struct.pack_into("<I", blob, 5, n + 7)
        path.write_bytes(bytes(blob))
        with pytest.raises(ModelFormatError, match="size"):
            load_model(path)

    def test_truncated_file_rejected(self, model, tmp_path):
        path = tmp_path / "m.p3dm"
        save_model(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(ModelFormatError):
            load_model(path)
