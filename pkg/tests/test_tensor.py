import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actsparse import (
    Layout,
    Matrix,
    RngStream,
    load_matrix,
    matmul_dense,
    sample_gaussian,
    sample_laplace,
    save_matrix,
    to_layout,
)
from actsparse.tensor import read_matrix, write_matrix

from conftest import scalar_gemv_f32


def seeded_matrix(seed, n, m, layout=Layout.ROW_MAJOR):
    arr = np.random.default_rng(seed).standard_normal((n, m), dtype=np.float32)
    return arr, Matrix.from_2d(arr, layout)


class TestMatrix:
    def test_data_length_validated(self):
        with pytest.raises(ValueError, match="length"):
            Matrix(2, 3, Layout.ROW_MAJOR, np.zeros(5, dtype=np.float32))

    def test_dtype_validated(self):
        with pytest.raises(ValueError):
            Matrix(2, 2, Layout.ROW_MAJOR, np.zeros(4, dtype=np.float64))

    def test_index_formula_row_major(self):
        arr, w = seeded_matrix(0, 3, 4)
        for i in range(3):
            for j in range(4):
                assert w.data[i * 4 + j] == arr[i, j]
                assert w.at(i, j) == arr[i, j]

    def test_index_formula_col_major(self):
        arr, w = seeded_matrix(0, 3, 4, Layout.COL_MAJOR)
        for i in range(3):
            for j in range(4):
                assert w.data[j * 3 + i] == arr[i, j]
                assert w.at(i, j) == arr[i, j]

    def test_immutable_after_construction(self):
        _, w = seeded_matrix(1, 2, 2)
        with pytest.raises(ValueError):
            w.data[0] = 1.0


class TestLayoutConversion:
    def test_round_trip_bit_exact(self):
        _, w = seeded_matrix(2, 5, 7)
        back = to_layout(to_layout(w, Layout.COL_MAJOR), Layout.ROW_MAJOR)
        assert back.data.tobytes() == w.data.tobytes()

    def test_one_by_one_unchanged(self):
        w = Matrix.from_2d(np.array([[3.5]], dtype=np.float32))
        assert to_layout(w, Layout.COL_MAJOR).data.tobytes() == w.data.tobytes()

    def test_known_2x3_permutation(self):
        # Explicit check against the index formula: col-major flat data of
        # [[1,2,3],[4,5,6]] is column-concatenated.
        w = Matrix.from_2d(np.array([[1, 2, 3], [4, 5, 6]], dtype=np.float32))
        wc = to_layout(w, Layout.COL_MAJOR)
        assert wc.data.tolist() == [1, 4, 2, 5, 3, 6]

    @given(
        n=st.integers(1, 6),
        m=st.integers(1, 6),
        seed=st.integers(0, 2**16),
    )
    @settings(max_examples=50, deadline=None)
    def test_round_trip_property(self, n, m, seed):
        _, w = seeded_matrix(seed, n, m)
        back = to_layout(to_layout(w, Layout.COL_MAJOR), Layout.ROW_MAJOR)
        assert np.array_equal(back.to_2d(), w.to_2d())


class TestMatmulDense:
    def test_identity(self):
        w = Matrix.from_2d(np.eye(2, dtype=np.float32))
        assert matmul_dense([1.0, 2.0], w).tolist() == [1.0, 2.0]

    def test_zero_input(self):
        _, w = seeded_matrix(3, 4, 3)
        assert matmul_dense(np.zeros(3, np.float32), w).tolist() == [0, 0, 0, 0]

    def test_matches_scalar_loop_oracle_exactly(self):
        arr, w = seeded_matrix(7, 8, 8)
        x = np.random.default_rng(8).standard_normal(8, dtype=np.float32)
        assert matmul_dense(x, w).tobytes() == scalar_gemv_f32(x, arr).tobytes()

    @pytest.mark.parametrize("n,m,seed", [(5, 9, 0), (32, 17, 1), (64, 64, 2)])
    def test_layout_invariance_bit_exact(self, n, m, seed):
        arr, w = seeded_matrix(seed, n, m)
        x = np.random.default_rng(seed + 100).standard_normal(m, dtype=np.float32)
        y_row = matmul_dense(x, w)
        y_col = matmul_dense(x, to_layout(w, Layout.COL_MAJOR))
        assert y_row.tobytes() == y_col.tobytes()
        assert y_row.tobytes() == scalar_gemv_f32(x, arr).tobytes()

    def test_dimension_mismatch_reports_shapes(self):
        _, w = seeded_matrix(4, 4, 3)
        with pytest.raises(ValueError, match="4x3"):
            matmul_dense(np.zeros(5, np.float32), w)

    def test_linearity(self):
        arr, w = seeded_matrix(5, 24, 16)
        g = np.random.default_rng(6)
        x = g.standard_normal(16, dtype=np.float32)
        y = g.standard_normal(16, dtype=np.float32)
        lhs = matmul_dense(2.0 * x + 3.0 * y, w)
        rhs = 2.0 * matmul_dense(x, w) + 3.0 * matmul_dense(y, w)
        assert np.allclose(lhs, rhs, rtol=1e-5, atol=1e-6)


class TestRngStream:
    def test_same_seed_identical(self):
        a = sample_gaussian(RngStream(11), 64, 1.0)
        b = sample_gaussian(RngStream(11), 64, 1.0)
        assert a.tobytes() == b.tobytes()

    def test_sigma_scale_equivariance(self):
        a = sample_gaussian(RngStream(12), 256, 1.0)
        b = sample_gaussian(RngStream(12), 256, 2.0)
        assert np.array_equal(b, 2.0 * a)

    def test_draws_advance_the_stream(self):
        rng = RngStream(13)
        a = sample_gaussian(rng, 32, 1.0)
        b = sample_gaussian(rng, 32, 1.0)
        assert not np.array_equal(a, b)

    def test_gaussian_std_at_scale(self):
        # n = 1e6: std of the sample std is ~1/sqrt(2n) ~ 0.0007
        x = sample_gaussian(RngStream(14), 10**6, 1.0)
        assert 0.995 <= float(x.std()) <= 1.005

    def test_laplace_mean_abs(self):
        x = sample_laplace(RngStream(15), 10**6, 1.0)
        assert 0.99 <= float(np.abs(x).mean()) <= 1.01

    def test_laplace_median_near_zero(self):
        x = sample_laplace(RngStream(16), 10**6, 1.0)
        assert abs(float(np.median(x))) <= 0.01

    @pytest.mark.parametrize("bad", [0.0, -1.0])
    def test_nonpositive_scale_rejected(self, bad):
        with pytest.raises(ValueError):
            sample_gaussian(RngStream(0), 4, bad)
        with pytest.raises(ValueError):
            sample_laplace(RngStream(0), 4, bad)

    def test_child_streams_independent_and_deterministic(self):
        root = RngStream(17)
        a = sample_gaussian(root.child(0), 32, 1.0)
        b = sample_gaussian(root.child(1), 32, 1.0)
        a2 = sample_gaussian(RngStream(17).child(0), 32, 1.0)
        assert not np.array_equal(a, b)
        assert a.tobytes() == a2.tobytes()


class TestWeightFile:
    @pytest.mark.parametrize("layout", list(Layout))
    def test_round_trip_bit_exact(self, tmp_path, layout):
        _, w = seeded_matrix(21, 6, 9, layout)
        path = tmp_path / "w.tealw"
        save_matrix(path, w)
        back = load_matrix(path)
        assert (back.rows, back.cols, back.layout) == (w.rows, w.cols, w.layout)
        assert back.data.tobytes() == w.data.tobytes()

    def test_payload_is_logical_row_major(self, tmp_path):
        arr, w = seeded_matrix(22, 3, 4, Layout.COL_MAJOR)
        path = tmp_path / "w.tealw"
        save_matrix(path, w)
        raw = path.read_bytes()
        header, payload = raw.split(b"\n", 1)
        assert header == b"TEALW1 3 4 colmajor"
        assert payload == arr.astype("<f4").tobytes(order="C")

    def test_bad_header_rejected(self):
        with pytest.raises(ValueError, match="header"):
            read_matrix(io.BytesIO(b"NOPE 2 2 rowmajor\n" + b"\x00" * 16))

    def test_truncated_payload_rejected(self):
        buf = io.BytesIO()
        _, w = seeded_matrix(23, 2, 2)
        write_matrix(buf, w)
        data = buf.getvalue()[:-4]
        with pytest.raises(ValueError, match="truncated"):
            read_matrix(io.BytesIO(data))
