import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fqv import paths as P
from fqv.partitions import dyadic_sequence, oscillation, uniform_partition

from conftest import ZeroNormals


def test_brownian_zero_increments_give_zero_path():
    w = P.generate_brownian(1, 1.0, 4, seed=3, rng=ZeroNormals())
    assert np.array_equal(w.values, np.zeros((5, 1)))


def test_brownian_is_byte_reproducible():
    a = P.generate_brownian(2, 1.0, 1024, 11)
    b = P.generate_brownian(2, 1.0, 1024, 11)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.seed == 11
    assert not np.array_equal(a.values, P.generate_brownian(2, 1.0, 1024, 12).values)


def test_brownian_starts_at_zero_with_right_shape():
    w = P.generate_brownian(3, 2.0, 64, 0)
    assert w.values.shape == (65, 3)
    assert np.all(w.values[0] == 0)
    assert w.dt == 2.0 / 64


def test_brownian_full_resolution_qv(bm42):
    # oracle: exact-rounded summation of squared increments
    qv = math.fsum(np.diff(bm42.values[:, 0]) ** 2)
    assert 0.95 <= qv <= 1.05


@pytest.mark.parametrize("M,T", [(1, 1.0), (0, 1.0), (8, 0.0), (8, -1.0)])
def test_brownian_rejects_bad_grid(M, T):
    with pytest.raises(P.ParameterError):
        P.generate_brownian(1, T, M, 0)


def test_correlated_coordinates():
    corr = [[1.0, -1.0], [-1.0, 1.0 + 1e-12]]
    w = P.generate_brownian(2, 1.0, 256, 1, corr=[[1.0, 0.9], [0.9, 1.0]])
    d = np.diff(w.values, axis=0)
    assert np.corrcoef(d.T)[0, 1] > 0.8
    with pytest.raises(P.ParameterError):
        P.generate_brownian(3, 1.0, 256, 1, corr=corr)


def test_fbm_half_is_independent_increments():
    lam = P.fgn_eigenvalues(0.5, 16)
    # circulant row of white noise is (1, 0, ..., 0): flat spectrum
    assert np.allclose(lam, 1.0)
    w = P.generate_fbm(1, 0.5, 1.0, 2 ** 18, 3)
    d = np.diff(w.values[:, 0])
    rho = np.corrcoef(d[:-1], d[1:])[0, 1]
    assert -0.02 <= rho <= 0.02


def test_fbm_covariance_matches_fgn_by_monte_carlo():
    # oracle: empirical covariance of increments over many seeds against the
    # closed-form fGn autocovariance; independent of the FFT synthesis path
    H, M, n = 0.3, 8, 6000
    incs = np.array([np.diff(P.generate_fbm(1, H, float(M), M, s).values[:, 0]) for s in range(n)])
    emp = incs.T @ incs / n
    k = np.abs(np.subtract.outer(np.arange(M), np.arange(M))).astype(float)
    exact = 0.5 * ((k + 1) ** (2 * H) - 2 * k ** (2 * H) + np.abs(k - 1) ** (2 * H))
    assert np.max(np.abs(emp - exact)) < 0.06


def test_fbm_holder_exponent():
    w = P.generate_fbm(1, 0.4, 1.0, 2 ** 18, 7)
    est = P.holder_estimate(w)
    assert 0.3 <= est.exponent <= 0.5


def test_fbm_zero_draws_and_label():
    w = P.generate_fbm(2, 0.7, 1.0, 64, 1, rng=ZeroNormals())
    assert np.array_equal(w.values, np.zeros((65, 2)))
    assert "clipped" not in w.label


@pytest.mark.parametrize("H", [0.05, 0.2, 0.4, 0.5, 0.75, 0.95])
def test_fgn_embedding_is_nonnegative(H):
    assert P.fgn_eigenvalues(H, 1024).min() > -1e-10


def test_fbm_requires_power_of_two():
    with pytest.raises(P.ParameterError):
        P.generate_fbm(1, 0.4, 1.0, 1000, 0)
    with pytest.raises(P.ParameterError):
        P.generate_fbm(1, 1.0, 1.0, 1024, 0)


def test_constant_and_smooth():
    c = P.generate_constant(2, 1.0, 16, 3.0)
    assert np.all(c.values == 3.0)
    s = P.generate_smooth(1, 1.0, 16, {"poly": [0.0, 1.0]})
    assert np.array_equal(s.values[:, 0], np.arange(17) / 16)
    with pytest.raises(P.ParameterError):
        P.generate_smooth(1, 1.0, 16, {"exp": 1})


def test_sine_qv_vanishes_on_dyadic_level_12():
    s = P.generate_smooth(1, 1.0, 2 ** 12, {"sin": [[1.0, 1.0, 0.0]]})
    part = uniform_partition(2 ** 12, 2 ** 12)
    qv = math.fsum(np.diff(s.values[part.indices, 0]) ** 2)
    assert qv < 1e-2


def test_stop_path_examples(line):
    assert P.stop_path(line, 1.0) == line
    z = P.stop_path(line, 0.0)
    assert np.all(z.values == line.values[0])
    h = P.stop_path(line, 0.5)
    assert np.array_equal(h.values[:, 0], np.minimum(line.times, 0.5))
    with pytest.raises(P.ParameterError):
        P.stop_path(line, 1.5)


def test_snapping_ties_round_down():
    assert P.snap_index(0.5 / 8, 1.0, 4) == 0   # 0.25 steps
    assert P.snap_index(1.5 / 4, 1.0, 4) == 1   # tie at 1.5 -> 1
    assert P.snap_index(2.5 / 4, 1.0, 4) == 2
    assert P.snap_index(2.6 / 4, 1.0, 4) == 3


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_stop_path_composes(t1, t2):
    w = P.generate_brownian(1, 1.0, 64, 9)
    assert P.stop_path(P.stop_path(w, t1), t2) == P.stop_path(w, min(t1, t2))


def test_piecewise_constant_examples(line):
    M = line.M
    a = P.piecewise_constant_approx(line, [0, M])
    assert np.all(a.values == line.values[M])
    for cells in (4, 64):
        part = uniform_partition(M, cells)
        approx = P.piecewise_constant_approx(line, part.indices)
        assert np.max(np.abs(approx.values - line.values)) == pytest.approx(1.0 / cells, rel=1e-12)
    with pytest.raises(P.PartitionError):
        P.piecewise_constant_approx(line, [0, 5, 3, M])
    with pytest.raises(P.PartitionError):
        P.piecewise_constant_approx(line, [1, M])


def test_piecewise_constant_bound_by_oscillation(bm42):
    part = dyadic_sequence(bm42.M, 10, 10)[10]
    approx = P.piecewise_constant_approx(bm42, part.indices)
    # oracle: plain loop over cells
    worst = 0.0
    v = bm42.values[:, 0]
    for a, b in zip(part.indices[:-1], part.indices[1:]):
        worst = max(worst, np.max(np.abs(v[a:b] - v[b])))
    sup = np.max(np.abs(approx.values - bm42.values))
    assert sup == worst
    # |w(t) - w(t_{i+1})| <= |w(t) - w(t_i)| + |w(t_{i+1}) - w(t_i)|
    assert sup <= 2 * oscillation(bm42, part)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000), st.lists(st.integers(1, 255), min_size=1, max_size=20, unique=True))
def test_step_approximation_properties(seed, interior):
    w = P.generate_brownian(2, 1.0, 256, seed)
    idx = np.array(sorted({0, 256, *interior}))
    approx = P.piecewise_constant_approx(w, idx)
    from fqv.partitions import Partition
    part = Partition(idx, 256)
    # sup-norm bound and left-neighbour agreement at interior partition points
    assert np.max(np.linalg.norm(approx.values - w.values, axis=1)) <= 2 * oscillation(w, part) + 1e-15
    for k in idx[1:-1]:
        assert np.array_equal(approx.values[k - 1], w.values[k])


def test_holder_estimates(line, bm42):
    e = P.holder_estimate(line)
    assert 0.98 <= e.exponent <= 1.0 + 1e-9
    assert all(a > b for a, b in zip(e.scales_used, e.scales_used[1:]))
    c = P.holder_estimate(P.generate_constant(1, 1.0, 1024))
    assert c.norm_estimate == 0 and c.exponent == 1.0
    b = P.holder_estimate(bm42)
    assert 0.40 <= b.exponent <= 0.55
    assert 0 <= b.r_squared <= 1
    with pytest.raises(P.ParameterError):
        P.holder_estimate(line, (2, 4))


def test_binary_roundtrip(tmp_path):
    w = P.generate_brownian(3, 2.5, 128, 77)
    f = tmp_path / "w.fqvp"
    P.save_path(w, f)
    blob = f.read_bytes()
    assert blob[:4] == b"FQVP"
    back = P.load_path(f)
    assert back == w
    nolabel = P.SampledPath(w.values, 2.5)
    assert P.from_bytes(P.to_bytes(nolabel)).seed is None
    with pytest.raises(ValueError):
        P.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        P.from_bytes(blob[:-8])


def test_csv_roundtrip():
    w = P.generate_brownian(2, 1.0, 32, 4)
    text = P.to_csv(w)
    assert text.splitlines()[0] == "t,x1,x2"
    back = P.from_csv(text, label=w.label, seed=w.seed)
    assert back == w


def test_paths_are_immutable_and_finite():
    w = P.generate_brownian(1, 1.0, 8, 0)
    with pytest.raises(ValueError):
        w.values[0, 0] = 1.0
    with pytest.raises(P.ParameterError):
        P.SampledPath([0.0, np.nan, 1.0])
