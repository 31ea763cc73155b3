"""Patch a call into a running process through the instrumentation server.

The server takes one command per line. Here it inserts ``sub1(arg2, arg3)`` at
the entry of ``sub2``, then adds a counter on ``sub1`` to show the patch fires on
every call without the controller being involved.

Run:  python demos/03_instrumentation_server.py
"""

from relcheck.lang import parse
from relcheck.probe import InstrumentationServer
from relcheck.runtime import Runtime

PROGRAM = """\
program main
  real w(1:5), a(1:5)
  integer k
  do k = 1, 5
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

rt = Runtime()
h = rt.launch(parse(PROGRAM), "a.out")
server = InstrumentationServer(rt)
script = [f"attach a.out {h.pid}",
          f"createPoint {h.pid} sub2",
          f"insertCall {h.pid} sub1 2 3",
          f"createPoint {h.pid} sub1 entry",
          f"insertCall {h.pid} count_calls",
          "createPoint 9 nosuch",
          f"continue {h.pid}"]
for line, reply in zip(script, server.serve(script)):
    print(f"{line:<34} -> {reply}")

while (ev := rt.run()).kind == "breakpoint":
    rt.continue_(ev.pid)
final = rt.final_state(h.pid)
print("\nsub1 ran", rt.stats[("count", h.pid, "sub1", "entry")], "times")
print("a =", final["a"], "(a(2) accumulated k = 1..5)")
print("controller round trips:", rt.stats["controller_roundtrips"])
