import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fqv import calculus as calc
from fqv import functionals as fn
from fqv.partitions import Partition, dyadic_sequence, uniform_partition
from fqv.paths import SampledPath, generate_brownian, generate_constant, generate_fbm, holder_estimate, linear_path

B = fn.BUILTINS


def rel(a, b):
    s = max(abs(a), abs(b))
    return abs(a - b) / s if s else 0.0


def test_qv_linear_path_halves():
    line = linear_path(1.0, 2 ** 10)
    seq = dyadic_sequence(line.M, 4, 8)
    qv = calc.quadratic_variation(line, seq)
    for n in range(4, 9):
        assert qv[n].final[0, 0] == pytest.approx(2.0 ** -n, rel=1e-12)
        assert qv[n].values[0, 0, 0] == 0


def test_qv_polarization_antiparallel():
    w = generate_brownian(1, 1.0, 1024, 3)
    both = SampledPath(np.column_stack([w.values[:, 0], -w.values[:, 0]]), 1.0)
    for part in (uniform_partition(1024, 64), uniform_partition(1024, 1024)):
        Q = calc.qv_step(both, part).values
        assert np.array_equal(Q[:, 0, 1], -Q[:, 0, 0])
        assert np.array_equal(Q[:, 1, 1], Q[:, 0, 0])


def test_qv_reference_path(bm42, ladder):
    q = calc.qv_total(bm42, ladder[16])[0, 0]
    # oracle: exact-rounded direct summation
    direct = math.fsum(np.diff(bm42.values[ladder[16].indices, 0]) ** 2)
    assert q == pytest.approx(direct, rel=1e-12)
    assert abs(q - 1) < 0.05


def test_qv_step_evaluation():
    w = generate_brownian(2, 1.0, 64, 8)
    part = uniform_partition(64, 8)
    qv = calc.qv_step(w, part)
    dw = np.diff(w.values[part.indices], axis=0)
    assert np.allclose(qv.at(0.3), dw[0][:, None] * dw[0][None, :] + dw[1][:, None] * dw[1][None, :])
    assert np.array_equal(qv.at(0.0), np.zeros((2, 2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 4), st.lists(st.integers(1, 255), max_size=40, unique=True))
def test_polarization_identity(seed, dim, interior):
    w = generate_brownian(2, 1.0, 256, seed)
    x, y = w.values[:, 0] * dim, w.values[:, 1]
    part = Partition(np.array(sorted({0, 256, *interior})), 256)
    def qv(z):
        return float(np.sum(np.diff(z[part.indices]) ** 2))
    lhs = qv(x + y) - qv(x) - qv(y)
    assert lhs == pytest.approx(2 * calc.covariation(x, y, part), rel=1e-10, abs=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 4))
def test_qv_increments_are_psd(seed, dim):
    w = generate_brownian(dim, 1.0, 256, seed, corr=None)
    qv = calc.qv_step(w, uniform_partition(256, 32))
    inc = np.diff(qv.values, axis=0)
    assert np.all(np.linalg.eigvalsh(inc).min(axis=1) >= -1e-12)
    assert np.allclose(qv.values, np.transpose(qv.values, (0, 2, 1)))


@pytest.mark.parametrize("variant", ["along_path", "along_approx"])
def test_identity_telescopes(bm_small, variant):
    seq = dyadic_sequence(bm_small.M, 2, 12)
    target = bm_small.values[-1, 0] - bm_small.values[0, 0]
    for n, est in calc.follmer_integral(B["identity"], bm_small, seq, variant).items():
        assert est.value == pytest.approx(target, rel=1e-10, abs=1e-15)


def test_quadratic_identity(bm_small):
    seq = dyadic_sequence(bm_small.M, 2, 12)
    w = bm_small.values[:, 0]
    for n, part in seq:
        s = calc.riemann_sum(B["square"], bm_small, part, "along_path", partial=True).value
        qv = calc.qv_total(bm_small, part)[0, 0]
        assert abs(s + qv + w[0] ** 2 - w[-1] ** 2) <= 1e-10 * max(1.0, w[-1] ** 2)


def test_partial_sums(bm_small):
    part = uniform_partition(bm_small.M, 16)
    est = calc.riemann_sum(B["identity"], bm_small, part, partial=True)
    assert np.allclose(est.partial_sums, bm_small.values[part.indices, 0] - bm_small.values[0, 0])


def test_unknown_variant(bm_small):
    with pytest.raises(fn.ParameterError):
        calc.riemann_sum(B["identity"], bm_small, uniform_partition(bm_small.M, 4), "stratonovich")


def test_approx_history_is_step_path(bm_small):
    part = uniform_partition(bm_small.M, 8)
    hist = calc.approx_history(bm_small, part)
    k = part.indices[3]
    assert np.array_equal(hist[k - 1], bm_small.values[k])


def test_uniqueness_gap_on_reference_path(bm42, ladder):
    for name in ("x_runint", "sin_runint", "runint_x2"):
        a = calc.follmer_integral(B[name], bm42, ladder, "along_approx")
        p = calc.follmer_integral(B[name], bm42, ladder, "along_path")
        gaps = [rel(a[n].value, p[n].value) for n in ladder.ns]
        assert gaps[-1] < 1e-2
        assert gaps[-1] < gaps[2]
    # cylindrical functionals: the integrand ignores history, both sums coincide
    a = calc.follmer_integral(B["square"], bm42, ladder, "along_approx")
    p = calc.follmer_integral(B["square"], bm42, ladder, "along_path")
    assert all(a[n].value == p[n].value for n in ladder.ns)


def test_change_of_variable(bm42, ladder):
    for n, part in ladder:
        assert calc.change_of_variable_residual(B["identity"], bm42, part) <= 1e-15
        assert calc.change_of_variable_residual(B["square"], bm42, part) <= 1e-12
    F = B["cube"]
    res = [calc.change_of_variable_residual(F, bm42, ladder[n]) for n in (8, 12, 16)]
    total = abs(bm42.values[-1, 0] ** 3 - bm42.values[0, 0] ** 3)
    assert res[-1] < res[0]
    assert res[-1] < 1e-2 * (1 + total)


def test_isometry_exact_cases(bm_small):
    seq = dyadic_sequence(bm_small.M, 2, 12)
    for n, lv in calc.isometry_gap(B["identity"], bm_small, seq).items():
        assert lv.lhs == lv.rhs
    for n, lv in calc.isometry_gap(B["constant"], bm_small, seq).items():
        assert lv.lhs == lv.rhs == 0 and lv.rel_gap == 0


def test_isometry_two_routes_agree(bm42, ladder):
    for name in ("square", "x_runint", "cube", "sin_runint"):
        for n in (8, 12, 16):
            lv = calc.isometry_level(B[name], bm42, ladder[n])
            other = calc.isometry_gap_from_remainders(B[name], bm42, ladder[n])
            assert (lv.lhs - lv.rhs) == pytest.approx(other, rel=1e-10, abs=1e-14 * lv.lhs)


def test_isometry_trend_on_reference_path(bm42, ladder):
    iso = calc.isometry_gap(B["square"], bm42, ladder)
    g = [iso[n].rel_gap for n in ladder.ns]
    assert g[-1] < g[-4]
    assert g[-1] < 0.10


def test_remainder_examples():
    line = linear_path(1.0, 2 ** 12)
    s = calc.remainder_samples(B["identity"], line, range(2, 8), count=16)
    assert all(x.value == 0 for x in s)
    assert calc.remainder_exponent_fit(s).degenerate
    s = calc.remainder_samples(B["square"], line, range(2, 8), count=32)
    for x in s:
        assert x.value == pytest.approx(x.scale ** 2, rel=1e-9)
    assert calc.remainder_exponent_fit(s).exponent == pytest.approx(2, abs=0.01)
    with pytest.raises(fn.ParameterError):
        calc.remainder_samples(B["square"], line, [2], count=8)


def test_remainder_exponent_on_fbm():
    w = generate_fbm(1, 0.4, 1.0, 2 ** 18, 7)
    fit = calc.remainder_exponent_fit(calc.remainder_samples(B["square"], w, range(4, 14), count=64))
    assert fit.exponent >= 0.4 * 1.4 - 0.15


def test_expansion_examples(bm42):
    line = linear_path(1.0, 2 ** 12)
    fit = calc.expansion_residual(B["square"], line, range(2, 8), count=16)
    assert fit.degenerate
    s = calc.expansion_samples(B["cube"], line, range(2, 8), count=32)
    for x in s:
        assert x.value == pytest.approx(x.scale ** 3, rel=1e-6)
    assert calc.remainder_exponent_fit(s).exponent == pytest.approx(3, abs=0.01)
    nu = holder_estimate(bm42).exponent
    fit = calc.expansion_residual(B["cube"], bm42, range(4, 16), count=64)
    assert fit.exponent >= 3 * nu ** 2 + nu - 0.2


def test_expansion_time_term():
    # F = t x on w = 1: F(s) - F(t) = s - t is exactly the time integral of DF = 1
    one = generate_constant(1, 1.0, 1024, 1.0)
    fit = calc.expansion_residual(B["tx"], one, range(2, 8), count=16)
    assert fit.degenerate


def test_decomposition_identity_and_running_integral(bm42, ladder):
    d = calc.rough_smooth_decompose(B["identity"], bm42, ladder)
    for n in ladder.ns:
        assert np.all(d[n].phi == 1)
        assert np.all(d[n].smooth == bm42.values[0, 0])
        assert d[n].qv_ratio == 0
        assert d[n].irregular
    d = calc.rough_smooth_decompose(B["runint"], bm42, ladder)
    smooth_qv = [d[n].qv_smooth for n in ladder.ns]
    assert all(np.all(d[n].rough == 0) for n in ladder.ns)
    # oracle: QV of the running integral by direct summation of its increments
    direct = [float(np.sum(np.diff(np.cumsum(np.r_[0, bm42.values[:-1, 0]])[part.indices] * bm42.dt) ** 2))
              for _, part in ladder]
    assert smooth_qv[-1] < 1e-4 and direct[-1] < 1e-4
    assert all(a > b for a, b in zip(smooth_qv, smooth_qv[1:]))


def test_decomposition_reconstructs_path(bm42, ladder):
    for name in ("square", "cube"):
        d = calc.rough_smooth_decompose(B[name], bm42, ladder)[16]
        assert d.qv_ratio < 1e-3
        assert np.max(np.abs(d.target - d.rough - d.smooth)) < 2e-2


def test_decomposition_flags_degenerate_base():
    c = generate_constant(1, 1.0, 256, 0.0)
    seq = dyadic_sequence(256, 2, 6)
    d = calc.rough_smooth_decompose(B["square"], c, seq)
    assert not d[6].irregular
    assert d[6].qv_ratio == 0


def test_ito_mc_trivial_cases():
    mc = calc.ito_isometry_mc(B["identity"], range(60), 10, M=2 ** 10)
    assert mc.mean_rhs == 1.0 and mc.stderr_rhs == 0
    assert abs(mc.mean_lhs - 1) < 3 * mc.stderr_lhs
    mc = calc.ito_isometry_mc(B["constant"], range(60), 10, M=2 ** 10)
    assert mc.mean_lhs == mc.mean_rhs == 0
    with pytest.raises(fn.ParameterError):
        calc.ito_isometry_mc(B["identity"], range(10), 4, M=2 ** 10)


def test_ito_mc_parallel_matches_serial():
    a = calc.ito_isometry_mc(B["square"], range(50), 8, M=2 ** 10)
    b = calc.ito_isometry_mc(B["square"], range(50), 8, M=2 ** 10, workers=4)
    assert a == b


@pytest.mark.slow
def test_ito_mc_is_unbiased_for_square():
    # both sides have expectation E int 4 W^2 dt = 2 for F = w(t)^2
    mc = calc.ito_isometry_mc(B["square"], range(2000), 14, M=2 ** 14, workers=4)
    assert abs(mc.mean_rhs - 2) < 3 * mc.stderr_rhs
    assert abs(mc.mean_lhs - 2) < 3 * mc.stderr_lhs
