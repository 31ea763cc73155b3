import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from relcheck.compare import (Contribution, DivergenceReport, ElementDiff, Mode, checksum,
                              compare_element, compare_global, compare_partial, reassemble,
                              scatter, verdict_report)
from relcheck.errors import BoundsMismatch, MissingRank, OverlapDetected
from relcheck.partition import DistributionSpec
from relcheck.runtime import Runtime


def dist(lo, hi, n, dim=1):
    return DistributionSpec("main.a", dim, lo, hi, n)


def partials(a, d):
    return [Contribution(c.rank, c.bounds, checksum(c.value)) for c in scatter(a, d)]


def test_checksum_zeros():
    assert checksum(np.zeros((5, 3))) == 0.0
    assert checksum([]) == 0.0


def test_checksum_is_exactly_rounded():
    assert checksum([1e16, 1.0, -1e16, 1.0]) == 2.0
    assert checksum(np.array([[1e16, 1.0], [-1e16, 1.0]])) == 2.0


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 60), elements=st.floats(-1e6, 1e6)), st.integers(1, 8))
def test_checksum_additive_within_ulps(a, k):
    k = min(k, a.size)
    d = dist(0, a.size - 1, k)
    total = 0.0
    for c in scatter(a, d):
        total += checksum(c.value)
    g = checksum(a)
    assert abs(total - g) <= 4 * k * np.spacing(max(abs(g), np.abs(a).max(), 1.0))


def test_jacobi_grid_checksum(jacobi):
    rt = Runtime()
    h = rt.launch(jacobi)
    rt.attach(h.pid, "t")
    rt.set_breakpoint(h.pid, "setup_grid", "exit", who="t")
    rt.continue_(h.pid, who="t")
    assert rt.run().kind == "breakpoint"
    phi = rt.read_mem(h.pid, "setup_grid", "phi6", who="t")
    brute = 0.0
    for v in phi.data:
        brute += v
    assert checksum(phi.to_numpy()) == brute == 42.0 * 42.0


def test_global_examples():
    assert compare_global(1764.0, [441.0] * 4, 1e-9).passed
    assert compare_global(0.0, [], 0.0).passed
    tol = 1e-6
    v = compare_global(10.0, [10.0 + 2 * tol], tol)
    assert not v.passed and v.delta == pytest.approx(-2 * tol)


def test_partial_pass_and_fault_injection():
    rng = np.random.default_rng(3)
    a = rng.random((44, 44))
    d = dist(0, 43, 4)
    assert compare_partial(a, partials(a, d), d, 1e-9).passed
    tol = 1e-9
    contribs = scatter(a, d)
    bad = contribs[2].value.copy()
    bad[1, 5] += 10 * tol
    contribs[2] = Contribution(2, contribs[2].bounds, bad)
    v = compare_partial(a, [Contribution(c.rank, c.bounds, checksum(c.value))
                            for c in contribs], d, tol)
    assert not v.passed and v.failing_rank == 2
    assert v.rank_passed == [True, True, False, True]


def test_partial_single_rank_is_global():
    a = np.arange(12.0).reshape(4, 3)
    d = dist(0, 3, 1)
    for shift in (0.0, 1e-3):
        p = compare_partial(a, [Contribution(0, (0, 3), checksum(a) + shift)], d, 1e-6)
        g = compare_global(checksum(a), [checksum(a) + shift], 1e-6)
        assert p.passed == g.passed


def test_partial_missing_rank():
    a = np.zeros((8, 2))
    d = dist(0, 7, 2)
    with pytest.raises(MissingRank):
        compare_partial(a, partials(a, d)[:1], d, 0.0)


def test_element_identical_and_diffs():
    a = np.arange(20.0).reshape(10, 2)
    d = dist(1, 10, 3)
    assert compare_element(a, scatter(a, d), d, 0.0).passed
    contribs = scatter(a, d)
    blk = contribs[1].value.copy()
    blk[0, 1] = -1.0
    blk[2, 0] = -2.0
    contribs[1] = Contribution(1, contribs[1].bounds, blk)
    v = compare_element(a, contribs, d, 0.0)
    lo = d.bounds(1)[0]
    assert [x.index for x in v.diffs] == [(lo, 1), (lo + 2, 0)]
    assert all(x.rank == 1 for x in v.diffs)
    assert v.diffs[0].parallel == -1.0


def test_element_order_independence():
    rng = np.random.default_rng(0)
    a = rng.random((12, 3))
    d = dist(0, 11, 4)
    contribs = scatter(a + (rng.random((12, 3)) > 0.7), d)
    ref = compare_element(a, contribs, d, 0.0)
    for perm in itertools.permutations(contribs):
        v = compare_element(a, list(perm), d, 0.0)
        assert v.diffs == ref.diffs and v.passed == ref.passed


def test_element_bounds_mismatch():
    a = np.zeros((8, 2))
    d = dist(0, 7, 2)
    good = scatter(a, d)
    with pytest.raises(BoundsMismatch):
        compare_element(a, [good[0], Contribution(1, (3, 7), np.zeros((5, 2)))], d, 0.0)
    with pytest.raises(BoundsMismatch):
        compare_element(a, [good[0], Contribution(1, (4, 7), np.zeros((3, 2)))], d, 0.0)


def test_reassemble_examples():
    rng = np.random.default_rng(1)
    a = rng.random(64)
    d = dist(0, 63, 5)
    assert np.array_equal(reassemble(scatter(a, d), d), a)
    one = dist(0, 63, 1)
    assert np.array_equal(reassemble(scatter(a, one), one), a)
    c = scatter(a, d)
    with pytest.raises(OverlapDetected):
        reassemble(c + [c[0]], d)


def test_scatter_gather_exhaustive_small():
    for n in range(1, 13):
        a = np.arange(float(n))
        for k in range(1, n + 1):
            d = dist(2, n + 1, k)
            assert np.array_equal(reassemble(scatter(a, d), d), a)


def test_second_dimension():
    a = np.arange(30.0).reshape(3, 10)
    d = dist(0, 9, 3, dim=2)
    assert np.array_equal(reassemble(scatter(a, d), d), a)
    assert compare_element(a, scatter(a, d), d, 0.0).passed


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 24), st.integers(1, 6), st.data())
def test_mode_discrimination_ordering(n, k, data):
    k = min(k, n)
    d = dist(0, n - 1, k)
    serial = data.draw(arrays(np.float64, (n, 2), elements=st.floats(-4, 4, width=16)))
    noise = data.draw(arrays(np.float64, (n, 2), elements=st.sampled_from([0.0, 0.5, -0.5])))
    par = serial + noise
    tol = data.draw(st.sampled_from([0.0, 0.25, 1.0]))
    # per-rank errors add up, so global at k*tol is implied by partial at tol
    g = compare_global(checksum(serial), [checksum(c.value) for c in scatter(par, d)], k * tol)
    p = compare_partial(serial, partials(par, d), d, tol)
    if not g.passed:
        assert not p.passed
    if not compare_partial(serial, partials(par, d), d, 0.0).passed:
        assert not compare_element(serial, scatter(par, d), d, 0.0).passed
    e0 = compare_element(serial, scatter(par, d), d, 0.0)
    assert e0.passed == np.array_equal(serial, par)


def _report():
    v = compare_element(np.ones((4, 2)), [Contribution(0, (0, 1), np.ones((2, 2))),
                                          Contribution(1, (2, 3), np.array([[1.0, 0.0],
                                                                            [1.0, 1.0]]))],
                        dist(0, 3, 2), 0.0)
    return verdict_report(v, "update", "exit", 1, "phi4", 0.0)


def test_report_round_trip():
    r = _report()
    back = DivergenceReport.from_json(r.to_json())
    assert back == r
    assert json.loads(r.to_json())["diffs"][0]["index"] == [2, 1]


def test_report_message():
    text = _report().message()
    assert "phi4" in text and "exit of update" in text and "phi4(2,1)" in text


def test_report_validation_rejects_within_tolerance():
    r = DivergenceReport("update", "exit", 1, "phi4", "element", 0.5,
                         diffs=[ElementDiff((1, 1), 1.0, 1.1, 0)])
    with pytest.raises(ValueError):
        r.validate()


def test_mode_parse():
    assert Mode.parse("GlobalChecksum") is Mode.GLOBAL
    assert Mode.parse("element-wise") is Mode.ELEMENT
    with pytest.raises(ValueError):
        Mode.parse("crc")
