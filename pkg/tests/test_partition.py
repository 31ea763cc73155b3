from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relcheck.errors import (EmptyRange, InvalidRank, MalformedDatabase, NotParallelizable,
                             UnknownEdgeId)
from relcheck.lang import Do, Exchange, parse, pretty_print
from relcheck.partition import (DistributionSpec, ParallelizationDB, block_bounds,
                                make_distribution, parallelize, read_db, write_db)
from relcheck.runtime import run_parallel, run_serial

GOLDEN = Path(__file__).parent / "golden"


def _flat(body):
    for s in body:
        yield s
        if isinstance(s, Do):
            yield from _flat(s.body)


def exchanges(program):
    return [s for r in program.all_routines for s in _flat(r.body) if isinstance(s, Exchange)]


# -- block_bounds ---------------------------------------------------------------------


def test_block_bounds_examples():
    assert block_bounds(0, 33, 4, 0) == (0, 8)
    # 34 elements over 4 ranks: the two low ranks take the remainder (9, 9, 8, 8)
    assert block_bounds(0, 33, 4, 1) == (9, 17)
    assert block_bounds(0, 33, 4, 3) == (26, 33)
    assert block_bounds(1, 1, 1, 0) == (1, 1)


def test_block_bounds_errors():
    with pytest.raises(InvalidRank):
        block_bounds(0, 9, 4, 4)
    with pytest.raises(EmptyRange):
        block_bounds(5, 4, 1, 0)
    with pytest.raises((InvalidRank, EmptyRange)):
        block_bounds(0, 2, 4, 0)


def test_block_invariants_exhaustive():
    for lo in (-3, 0, 1):
        for n in range(1, 65):
            hi = lo + n - 1
            for nranks in range(1, min(8, n) + 1):
                blocks = [block_bounds(lo, hi, nranks, r) for r in range(nranks)]
                covered = [i for a, b in blocks for i in range(a, b + 1)]
                assert covered == list(range(lo, hi + 1))  # ordered, disjoint, covering
                sizes = [b - a + 1 for a, b in blocks]
                assert max(sizes) - min(sizes) <= 1


def test_distribution_spec_owner_and_round_trip():
    d = DistributionSpec("main.u", 1, 0, 33, 4, ("main.u", "loop.upar"))
    assert d.owner(8) == 0 and d.owner(9) == 1 and d.owner(33) == 3
    assert DistributionSpec.from_dict(d.to_dict()) == d
    assert d.covers("loop", "upar") and not d.covers("loop", "vpar")


# -- transformation -----------------------------------------------------------------


def test_stencil2d_matches_golden(stencil2d):
    spmd, _ = parallelize(stencil2d, make_distribution(stencil2d, "u,v", 1, 4))
    golden = parse((GOLDEN / "stencil2d_spmd.mf").read_text())
    assert spmd == golden


def test_stencil2d_structure(stencil2d):
    spmd, pdb = parallelize(stencil2d, make_distribution(stencil2d, "u,v", 1, 4))
    loop = spmd.routine("loop")
    kinds = [type(s).__name__ for s in loop.body]
    # two scalar sets, clamped init loop, two exchange loops, clamped stencil loop
    assert kinds == ["Assign", "Assign", "Do", "Do", "Do", "Do", "Return"]
    init, right, left, stencil = loop.body[2:6]
    assert [x.direction for x in exchanges(spmd)] == ["right", "left"]
    assert pretty_print(spmd).count("max(") == 2
    assert [x["direction"] for x in pdb.exchanges] == ["right", "left"]
    assert init.lo.fn == "max" and stencil.hi.fn == "min"


def test_independent_loop_needs_no_communication():
    p = parse("program main\n  real a(1:20), b(1:20)\n  integer i\n"
              "  do i = 1, 20\n    a(i) = b(i) + 2\n  end do\nend\n")
    spmd, pdb = parallelize(p, make_distribution(p, "a", 1, 4))
    assert exchanges(spmd) == [] and pdb.exchanges == []
    assert "max(1, cap_bla)" in pretty_print(spmd)


def test_jacobi_dropped_edge_leaves_left_exchange_only(jacobi):
    dist = make_distribution(jacobi, "oldphi4", 1, 4)
    full, _ = parallelize(jacobi, dist)
    assert sorted(x.direction for x in exchanges(full)) == ["left", "right"]
    buggy, pdb = parallelize(jacobi, dist, removed=[12])
    assert [x.direction for x in exchanges(buggy)] == ["left"]
    assert pdb.removed_edges == [12]


def test_removing_an_edge_removes_exactly_its_exchange(jacobi):
    dist = make_distribution(jacobi, "oldphi4", 1, 4)
    _, full = parallelize(jacobi, dist)
    _, less = parallelize(jacobi, dist, removed=[12])
    dropped = [x for x in full.exchanges if x not in less.exchanges]
    assert len(dropped) == 1 and dropped[0]["edges"] == [12]
    assert all(x in full.exchanges for x in less.exchanges)


def test_unknown_edge(jacobi):
    with pytest.raises(UnknownEdgeId):
        parallelize(jacobi, make_distribution(jacobi, "oldphi4", 1, 4), removed=[999])


def test_recurrence_rejected_with_edge():
    p = parse("program main\n  real a(1:20)\n  integer i\n"
              "  do i = 2, 20\n    a(i) = (a(i) + a(i-1)) * 0.5\n  end do\nend\n")
    with pytest.raises(NotParallelizable) as exc:
        parallelize(p, make_distribution(p, "a", 1, 4))
    assert exc.value.edge.kind == "flow" and exc.value.edge.distance == (1,)


# -- database ----------------------------------------------------------------------


def test_db_round_trip(jacobi, tmp_path):
    _, pdb = parallelize(jacobi, make_distribution(jacobi, "oldphi4", 1, 4), removed=[12])
    write_db(pdb, tmp_path / "db.json")
    assert read_db(tmp_path / "db.json") == pdb


def test_empty_db(tmp_path):
    write_db(ParallelizationDB(), tmp_path / "e.json")
    assert read_db(tmp_path / "e.json").distributions == []


def test_truncated_db(jacobi, tmp_path):
    _, pdb = parallelize(jacobi, make_distribution(jacobi, "oldphi4", 1, 4))
    text = pdb.to_json()
    (tmp_path / "t.json").write_text(text[: len(text) // 2])
    with pytest.raises(MalformedDatabase):
        read_db(tmp_path / "t.json")


def test_db_schema_keys(jacobi):
    import json
    _, pdb = parallelize(jacobi, make_distribution(jacobi, "oldphi4", 1, 4))
    doc = json.loads(pdb.to_json())
    assert doc["v"] == 1
    assert {"distributions", "targets", "removed_edges", "bindings"} <= set(doc)


# -- semantic preservation --------------------------------------------------------


def owned(finals, name, dist):
    parts = []
    for r, f in enumerate(finals):
        lo, hi = dist.bounds(r)
        parts.append(f[name][lo - dist.lo:hi - dist.lo + 1])
    return np.concatenate(parts, axis=0)


@pytest.mark.parametrize("nranks", [1, 2, 3, 4, 7])
def test_jacobi_spmd_matches_serial(jacobi, nranks):
    dist = make_distribution(jacobi, "oldphi4", 1, nranks)
    spmd, _ = parallelize(jacobi, dist)
    _, serial = run_serial(jacobi)
    _, finals = run_parallel(spmd, nranks, seed=nranks)
    g = DistributionSpec("main.phi2", 1, 0, 43, nranks)
    assert np.array_equal(owned(finals, "phi2", g), serial["phi2"])


@pytest.mark.parametrize("nranks", [1, 4, 9, 34])
def test_stencil2d_spmd_matches_serial(stencil2d, nranks):
    spmd, _ = parallelize(stencil2d, make_distribution(stencil2d, "u,v", 1, nranks))
    _, serial = run_serial(stencil2d)
    _, finals = run_parallel(spmd, nranks)
    g = DistributionSpec("main.u", 1, 0, 33, nranks)
    for name in ("u", "v"):
        assert np.array_equal(owned(finals, name, g), serial[name])


def _sub(off):
    return "i" if off == 0 else f"i {'+' if off > 0 else '-'} {abs(off)}"


@st.composite
def stencils(draw):
    n = draw(st.integers(6, 16))
    lines = [f"  do i = 1, {n}\n    a(i) = 0.5 * i\n    b(i) = i + 1\n  end do"]
    for _ in range(draw(st.integers(1, 3))):
        c1, c2 = draw(st.integers(-2, 2)), draw(st.integers(-2, 2))
        tgt, src = draw(st.sampled_from([("a", "b"), ("b", "a")]))
        lines.append(f"  do i = 3, {n - 2}\n    {tgt}(i) = {src}({_sub(c1)}) * 0.5 + "
                     f"{src}({_sub(c2)})\n  end do")
    src = (f"program main\n  real a(1:{n}), b(1:{n})\n  integer i\n" + "\n".join(lines)
           + "\nend\n")
    return n, src, draw(st.integers(1, n // 2))


@settings(max_examples=40, deadline=None)
@given(stencils())
def test_semantic_preservation_property(case):
    n, src, nranks = case
    p = parse(src)
    spmd, _ = parallelize(p, make_distribution(p, "a,b", 1, nranks))
    _, serial = run_serial(p)
    _, finals = run_parallel(spmd, nranks, seed=n)
    g = DistributionSpec("main.a", 1, 1, n, nranks)
    for name in ("a", "b"):
        assert np.array_equal(owned(finals, name, g), serial[name])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 30), st.integers(0, 30), st.integers(1, 8))
def test_clamping_never_widens(lo, span, nranks):
    """Each rank's clamped range lies inside the original and the union is the original."""
    hi = lo + span
    glo, ghi = 0, 40
    if nranks > ghi - glo + 1:
        return
    covered = []
    for r in range(nranks):
        bl, bh = block_bounds(glo, ghi, nranks, r)
        covered.extend(range(max(lo, bl), min(hi, bh) + 1))
    assert covered == list(range(lo, min(hi, ghi) + 1))
