import numpy as np
import pytest

from relcheck.errors import LinkFailure, SequenceMismatch
from relcheck.lang import parse
from relcheck.partition import make_distribution, parallelize
from relcheck.probe import InstrumentationServer, format_dist, parse_dist
from relcheck.runtime import Runtime

CALLS = 7
TRANSCRIPT_PROGRAM = f"""\
program main
  real w(1:5), a(1:5)
  integer k
  do k = 1, {CALLS}
    call sub2(w, a, k)
  end do
end

subroutine sub2(x, y, n)
  real x(1:5), y(1:5)
  integer n
  x(1) = x(1) + n
  return
end

subroutine sub1(p, m)
  real p(1:5)
  integer m
  p(2) = p(2) + m
  return
end
"""


def run_to_end(rt):
    while True:
        ev = rt.run()
        if ev.kind == "breakpoint":
            rt.continue_(ev.pid)
        else:
            return ev


def test_server_transcript():
    rt = Runtime()
    h = rt.launch(parse(TRANSCRIPT_PROGRAM), "a.out")
    server = InstrumentationServer(rt)
    replies = server.serve([f"attach a.out {h.pid}", f"createPoint {h.pid} sub2",
                            f"insertCall {h.pid} sub1 2 3"])
    assert all(r.startswith("ok") for r in replies), replies
    # observe sub1 itself: a counter and an argument trace at its entry
    server.serve([f"createPoint {h.pid} sub1 entry", f"insertCall {h.pid} count_calls",
                  f"insertCall {h.pid} trace_args 1 2"])
    server.handle_command(f"continue {h.pid}")
    assert run_to_end(rt).kind == "exited"
    assert rt.stats[("count", h.pid, "sub1", "entry")] == CALLS
    final = rt.final_state(h.pid)
    assert final["a"][1] == sum(range(1, CALLS + 1))  # sub1 added k to a(2) each time
    assert final["w"][1] == 0.0
    assert [args[1] for *_, args in rt.trace] == list(range(1, CALLS + 1))
    assert rt.stats["controller_roundtrips"] == 0


def test_error_responses():
    rt = Runtime()
    h = rt.launch(parse(TRANSCRIPT_PROGRAM), "a.out")
    server = InstrumentationServer(rt)
    assert server.handle_command("createPoint 9 nosuch").startswith("err UnknownRoutine")
    assert server.handle_command("attach a.out 9").startswith("err NoSuchPid")
    assert server.handle_command(f"attach b.out {h.pid}").startswith("err NoSuchPid")
    assert server.handle_command(f"createPoint {h.pid} sub2").startswith("err NotAttached")
    server.handle_command(f"attach a.out {h.pid}")
    assert server.handle_command(f"attach a.out {h.pid}").startswith("err AlreadyAttached")
    server.handle_command(f"createPoint {h.pid} sub2")
    assert server.handle_command(f"insertCall {h.pid} sub1 2 4").startswith("err BadArgPosition")
    assert server.handle_command(f"insertCall {h.pid} sub1 2").startswith("err BadArgPosition")
    assert server.handle_command(f"insertCall {h.pid} sub1 3 2").startswith("err BadArgPosition")
    assert server.handle_command(f"insertCall {h.pid} nope 1").startswith("err UnknownRoutine")
    assert server.handle_command("frobnicate").startswith("err BadCommand")
    assert server.handle_command(f"detach {h.pid}") == f"ok detached {h.pid}"


def test_explicit_point_and_routine_forms():
    rt = Runtime()
    h = rt.launch(parse(TRANSCRIPT_PROGRAM), "a.out")
    server = InstrumentationServer(rt)
    server.handle_command(f"attach a.out {h.pid}")
    p1 = server.handle_command(f"createPoint {h.pid} sub2 entry").split()[2]
    server.handle_command(f"createPoint {h.pid} sub2 exit")
    assert server.handle_command(f"insertCall {h.pid} {p1} count_calls").startswith("ok")
    assert server.handle_command(f"insertCall {h.pid} sub2 count_calls").startswith("ok")
    server.handle_command(f"continue {h.pid}")
    run_to_end(rt)
    assert rt.stats[("count", h.pid, "sub2", "entry")] == CALLS
    assert rt.stats[("count", h.pid, "sub2", "exit")] == CALLS


def test_entry_exit_alternate(jacobi):
    rt = Runtime()
    h = rt.launch(jacobi, "S")
    server = InstrumentationServer(rt)
    server.handle_command(f"attach S {h.pid}")
    for r in ("copyphi", "update"):
        for site in ("entry", "exit"):
            server.handle_command(f"createPoint {h.pid} {r} {site}")
            server.handle_command(f"insertCall {h.pid} trace_args")
    server.handle_command(f"continue {h.pid}")
    run_to_end(rt)
    for r in ("copyphi", "update"):
        sites = [t[2] for t in rt.trace if t[1] == r]
        assert sites == ["entry", "exit"] * 100


@pytest.fixture
def stencil2d_pair(stencil2d):
    spmd, pdb = parallelize(stencil2d, make_distribution(stencil2d, "u,v", 1, 4))
    rt = Runtime(5)
    s = rt.launch(stencil2d, "S")
    hs = rt.spawn_parallel(spmd, 4, None, "P")
    return rt, s, hs, pdb


def _instrument_ranks(rt, hs, mode, peer, pdb):
    server = InstrumentationServer(rt)
    d = format_dist(pdb.distribution_for("loop", "upar"))
    for h in hs:
        server.handle_command(f"attach P {h.pid}")
        server.handle_command(f"createPoint {h.pid} loop exit")
        r = server.handle_command(f"insertCall {h.pid} send_contribution 1 mode={mode} "
                                  f"dist={d} array=upar peer={peer}")
        assert r.startswith("ok"), r
        server.handle_command(f"detach {h.pid}")


def test_send_contribution_messages(stencil2d_pair):
    rt, s, hs, pdb = stencil2d_pair
    _instrument_ranks(rt, hs, "element", s.pid, pdb)
    run_to_end(rt)
    msgs = [m for r in range(4) for m in rt.link(s.pid, r)]
    assert len(msgs) == 4 and sorted(m.rank for m in msgs) == [0, 1, 2, 3]
    first = rt.link(s.pid, 0)[0]
    assert first.contribution.bounds == (0, 8) and first.kind == "block"
    assert first.key == ("loop", "exit", 1, "upar")
    assert first.contribution.value.shape == (9, 34)


def test_zero_array_partial_checksum(stencil2d_pair):
    rt, s, hs, pdb = stencil2d_pair
    # upar has not been touched yet at entry of loop
    server = InstrumentationServer(rt)
    h = hs[0]
    server.handle_command(f"attach P {h.pid}")
    server.handle_command(f"createPoint {h.pid} loop entry")
    d = format_dist(pdb.distribution_for("loop", "upar"))
    server.handle_command(f"insertCall {h.pid} send_contribution 1 mode=global dist={d} "
                         f"peer={s.pid}")
    server.handle_command(f"detach {h.pid}")
    run_to_end(rt)
    (msg,) = rt.link(s.pid, 0)
    assert msg.kind == "checksum" and msg.contribution.value == 0.0


def test_link_failure(stencil2d_pair):
    rt, s, hs, pdb = stencil2d_pair
    _instrument_ranks(rt, hs, "global", 424242, pdb)
    with pytest.raises(LinkFailure):
        run_to_end(rt)


def test_sequence_mismatch(jacobi, tmp_path):
    dist = make_distribution(jacobi, "oldphi4", 1, 2)
    spmd, pdb = parallelize(jacobi, dist)
    rt = Runtime()
    s = rt.launch(jacobi, "S")
    contact = tmp_path / "c"
    hs = rt.spawn_parallel(spmd, 2, contact, "P")
    server = InstrumentationServer(rt)
    d = format_dist(pdb.distribution_for("copyphi", "oldphi5"))
    server.handle_command(f"attach S {s.pid}")
    server.handle_command(f"createPoint {s.pid} copyphi entry")
    server.handle_command(f"insertCall {s.pid} receive_and_compare 1 dist={d} contact={contact}")
    for h in hs:
        server.handle_command(f"attach P {h.pid}")
        server.handle_command(f"createPoint {h.pid} update entry")
        server.handle_command(f"insertCall {h.pid} send_contribution 1 dist={d} peer={s.pid}")
        server.handle_command(f"detach {h.pid}")
    server.handle_command(f"continue {s.pid}")
    with pytest.raises(SequenceMismatch):
        run_to_end(rt)


def test_dist_text_round_trip():
    d = parse_dist("0:43:4:1", "x")
    assert (d.lo, d.hi, d.nranks, d.dim) == (0, 43, 4, 1)
    assert format_dist(d) == "0:43:4:1"
    assert parse_dist("none") is None


def test_print_dumps_values(stencil2d):
    rt = Runtime()
    h = rt.launch(stencil2d, "S")
    server = InstrumentationServer(rt)
    server.handle_command(f"attach S {h.pid}")
    rt.set_breakpoint(h.pid, "loop", "exit", who=server.name)
    server.handle_command(f"continue {h.pid}")
    assert rt.run().kind == "breakpoint"
    values = [float(x) for x in server.handle_command(f"print {h.pid} loop vpar")[3:].split()]
    assert np.array_equal(values, np.ones(34 * 34))
