import numpy as np
import pytest

from relcheck.errors import (AlreadyAttached, Deadlock, NoSuchPid, NotStopped, ResidualMessages,
                             RuntimeFault, UnknownVariable)
from relcheck.lang import parse
from relcheck.partition import make_distribution, parallelize
from relcheck.runtime import Runtime, run_parallel, run_serial


def test_stencil2d_serial_values(stencil2d):
    _, final = run_serial(stencil2d)
    expect_u = np.zeros((34, 34))
    expect_u[1:33, 1:33] = 0.25 * 4  # one stencil pass over v == 1
    assert np.array_equal(final["u"], expect_u)
    assert np.array_equal(final["v"], np.ones((34, 34)))


def test_empty_main():
    _, final = run_serial(parse("program main\nend\n"))
    assert final == {}


def test_out_of_bounds_read():
    p = parse("program main\n  real a(1:4), b(1:4)\n  integer k\n  k = 0\n  b(1) = a(k)\nend\n")
    with pytest.raises(RuntimeFault) as exc:
        run_serial(p)
    assert exc.value.routine == "main" and "outside 1:4" in str(exc.value)


def test_out_of_bounds_in_loop_is_reported_at_loop():
    p = parse("program main\n  real a(1:4)\n  integer i\n  do i = 1, 5\n    a(i) = 1.0\n"
              "  end do\nend\n")
    with pytest.raises(RuntimeFault) as exc:
        run_serial(p)
    assert exc.value.stmt == 1


def test_integer_division_by_zero():
    p = parse("program main\n  integer k, m\n  m = 0\n  k = 3 / m\nend\n")
    with pytest.raises(RuntimeFault):
        run_serial(p)


def test_contact_file_and_pids(tmp_path, stencil2d):
    spmd, _ = parallelize(stencil2d, make_distribution(stencil2d, "u,v", 1, 4))
    rt = Runtime(1)
    contact = tmp_path / "contact"
    hs = rt.spawn_parallel(spmd, 4, contact, "P")
    lines = [ln.split() for ln in contact.read_text().splitlines()]
    assert [int(r) for r, _, _ in lines] == [0, 1, 2, 3]
    assert len({pid for _, pid, _ in lines}) == 4
    assert [int(pid) for _, pid, _ in lines] == [h.pid for h in hs]
    more = rt.spawn_parallel(spmd, 2, None, "Q")
    assert not {h.pid for h in hs} & {h.pid for h in more}


SENDRECV = """\
parallel program main
  real b(0:10)
  integer i
  do i = 1, 10
    b(i) = myrank * 100 + i
  end do
  send(b(10), 1, myrank + 1)
  receive(b(0), 1, myrank - 1)
end
"""


def test_send_receive_boundary_value():
    _, finals = run_parallel(parse(SENDRECV), 2)
    assert finals[1]["b"][0] == 10.0  # rank 0's b(upper)
    assert finals[0]["b"][0] == 0.0  # no left neighbour


def test_single_rank_exchanges_are_noops(stencil2d):
    spmd, _ = parallelize(stencil2d, make_distribution(stencil2d, "u,v", 1, 1))
    _, serial = run_serial(stencil2d)
    _, (only,) = run_parallel(spmd, 1)
    assert np.array_equal(only["u"], serial["u"])


def test_deadlock_names_every_rank():
    p = parse("parallel program main\n  real b(1:2)\n  receive(b(1), 1, 1 - myrank)\nend\n")
    with pytest.raises(Deadlock) as exc:
        run_parallel(p, 2)
    assert "rank 0" in str(exc.value) and "rank 1" in str(exc.value)


def test_residual_messages():
    p = parse("parallel program main\n  real b(1:2)\n  send(b(1), 1, myrank + 1)\nend\n")
    with pytest.raises(ResidualMessages):
        run_parallel(p, 2)


def test_schedule_independence(jacobi):
    spmd, _ = parallelize(jacobi, make_distribution(jacobi, "oldphi4", 1, 3))
    ref = None
    for seed in range(4):
        _, finals = run_parallel(spmd, 3, seed=seed)
        got = [f["phi2"] for f in finals]
        if ref is None:
            ref = got
        assert all(np.array_equal(a, b) for a, b in zip(ref, got))


def test_read_only_probes_are_transparent(jacobi):
    _, plain = run_serial(jacobi)
    probes = {("update", "entry"): [("count_calls", (1,), {}), ("trace_args", (1, 2), {})],
              ("copyphi", "exit"): [("count_calls", (), {})]}
    rt = Runtime()
    _, probed = run_serial(jacobi, probes, rt)
    assert np.array_equal(plain["phi2"], probed["phi2"])
    pid = next(iter(rt.procs))
    assert rt.stats[("count", pid, "update", "entry")] == 100
    assert len(rt.trace) == 100


# -- process control -------------------------------------------------------------


@pytest.fixture
def stopped_rank0(stencil2d):
    spmd, pdb = parallelize(stencil2d, make_distribution(stencil2d, "u,v", 1, 4))
    dist = pdb.distribution_for("loop", "upar")
    rt = Runtime(2)
    hs = rt.spawn_parallel(spmd, 4, None, "P")
    rt.attach(hs[0].pid, "me")
    rt.set_breakpoint(hs[0].pid, "loop", "exit", who="me")
    rt.continue_(hs[0].pid, who="me")
    while True:
        ev = rt.run()
        if ev.kind == "breakpoint":
            break
    return rt, hs, dist


def test_read_rank_local_slice(stopped_rank0, stencil2d):
    rt, hs, dist = stopped_rank0
    (lo, hi), section = rt.read_mem(hs[0].pid, "loop", "upar", who="me",
                                    dist=dist.with_nranks(4))
    assert (lo, hi) == (0, 8)
    _, serial = run_serial(stencil2d)
    assert np.array_equal(section, serial["u"][0:9])


def test_write_then_read(stopped_rank0):
    rt, hs, _ = stopped_rank0
    pid = hs[0].pid
    view = rt.read_mem(pid, "loop", "vpar", who="me")
    new = np.full(view.shape, 2.5)
    rt.write_mem(pid, "loop", "vpar", new, who="me")
    assert np.array_equal(rt.read_mem(pid, "loop", "vpar", who="me").to_numpy(), new)
    rt.write_mem(pid, "loop", "d1", 7, who="me")
    assert rt.read_mem(pid, "loop", "d1", who="me") == 7


def test_unknown_variable(stopped_rank0):
    rt, hs, _ = stopped_rank0
    with pytest.raises(UnknownVariable):
        rt.read_mem(hs[0].pid, "loop", "nosuch", who="me")


def test_read_while_running(stopped_rank0):
    rt, hs, _ = stopped_rank0
    rt.continue_(hs[0].pid, who="me")
    with pytest.raises(NotStopped):
        rt.read_mem(hs[0].pid, "loop", "upar", who="me")


def test_attach_rules(stopped_rank0):
    rt, hs, _ = stopped_rank0
    with pytest.raises(AlreadyAttached):
        rt.attach(hs[0].pid, "other")
    rt.detach(hs[0].pid, "me")
    rt.attach(hs[0].pid, "other")  # re-attach after detach works


def test_terminate_then_no_such_pid(stopped_rank0):
    rt, hs, _ = stopped_rank0
    rt.terminate(hs[0].pid, who="me")
    assert rt.handle(hs[0].pid).state == "exited"
    with pytest.raises(NoSuchPid):
        rt.stop(hs[0].pid)
    with pytest.raises(NoSuchPid):
        rt.attach(hs[0].pid, "me")
