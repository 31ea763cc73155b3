"""Overhead of the instrumentation alternatives on synthetic workloads.

Each workload repeatedly calls a routine ``work(a)`` that sweeps an array.
A checkpoint at entry and exit of ``work`` checksums the array, in one of
four ways:

``none``         no checkpoint at all
``compiled-in``  ``call checkpoint_sum(a)`` written into the source
``patched``      the same call inserted by the instrumentation server
``trap``         a breakpoint; the controller prints the array through the
                 server's text protocol, sums it, and continues the process
"""

from __future__ import annotations

import gc
import math
import statistics
import time
from dataclasses import dataclass, field

from .lang import parse
from .probe import InstrumentationServer
from .runtime.machine import EXITED, Runtime

METHODS = ("none", "compiled-in", "patched", "trap")

# (rows, cols, calls of work, sweeps per call); 204 * 200 = 40800 doubles
WORKLOADS = {
    ("large", "heavy"): (204, 200, 6, 4),
    ("large", "light"): (204, 200, 12, 1),
    ("small", "heavy"): (20, 20, 300, 4),
    ("small", "light"): (20, 20, 600, 1),
}


def workload_source(n1, n2, calls, sweeps, compiled_in=False) -> str:
    probe = "  call checkpoint_sum(a)\n" if compiled_in else ""
    return f"""\
program main
  double precision a({n1}, {n2})
  integer it, i, j
  do j = 1, {n2}
    do i = 1, {n1}
      a(i, j) = i + j
    end do
  end do
  do it = 1, {calls}
    call work(a)
  end do
end

subroutine work(a)
  double precision a({n1}, {n2})
  integer i, j, k
{probe}  do k = 1, {sweeps}
    do j = 1, {n2}
      do i = 1, {n1}
        a(i, j) = a(i, j) * 0.5 + 1.0
      end do
    end do
  end do
{probe}  return
end
"""


def _drive(program, method) -> float:
    rt = Runtime(0)
    h = rt.launch(program, "bench", launcher="bench")
    server = InstrumentationServer(rt)
    if method in ("patched", "trap"):
        server.handle_command(f"attach bench {h.pid}")
        if method == "patched":
            for site in ("entry", "exit"):
                server.handle_command(f"createPoint {h.pid} work {site}")
                server.handle_command(f"insertCall {h.pid} checkpoint_sum 1")
        else:
            rt.set_breakpoint(h.pid, "work", "entry", who=server.name)
            rt.set_breakpoint(h.pid, "work", "exit", who=server.name)
    gc.collect()
    gc.disable()
    try:
        t0 = time.process_time()
        rt.continue_(h.pid, who="bench")
        while True:
            ev = rt.run()
            if ev.kind == "breakpoint":
                text = server.handle_command(f"print {h.pid} work a")
                rt.last_sum = math.fsum(float(x) for x in text[3:].split())
                server.handle_command(f"continue {h.pid}")
                continue
            if ev.kind == "exited" or rt.handle(h.pid).state == EXITED:
                break
        return time.process_time() - t0
    finally:
        gc.enable()


@dataclass
class BenchResult:
    reps: int
    samples: dict = field(default_factory=dict)  # (size, work, method) -> [seconds]

    def median(self, size, work, method) -> float:
        return statistics.median(self.samples[(size, work, method)])

    def cells(self) -> list:
        return list(dict.fromkeys((s, w) for s, w, _ in self.samples))

    def table(self) -> str:
        head = f"{'array':<7}{'work':<7}" + "".join(f"{m:>13}" for m in METHODS)
        lines = [f"median CPU time (s) over {self.reps} samples", head]
        for size, work in self.cells():
            lines.append(f"{size:<7}{work:<7}" +
                         "".join(f"{self.median(size, work, m):>13.4f}" for m in METHODS))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"reps": self.reps,
                "median": {f"{s}/{w}/{m}": self.median(s, w, m)
                           for s, w in self.cells() for m in METHODS},
                "samples": {f"{s}/{w}/{m}": v for (s, w, m), v in self.samples.items()}}


def run_bench(reps: int = 5, workloads=None, inner: int = 3) -> BenchResult:
    """Time every method on every workload; repetitions are interleaved across methods.

    Each sample is the least CPU time of ``inner`` runs, taken in rounds that cycle
    through the methods, which filters out interference on a shared machine.
    """
    workloads = workloads or WORKLOADS
    result = BenchResult(reps)
    programs = {}
    for key, dims in workloads.items():
        plain = parse(workload_source(*dims))
        programs[key] = {"none": plain, "patched": plain, "trap": plain,
                         "compiled-in": parse(workload_source(*dims, compiled_in=True))}
        for m in METHODS:
            _drive(programs[key][m], m)  # warm-up: compile and cache
            result.samples[(*key, m)] = []
    for rep in range(reps):
        order = METHODS[rep % len(METHODS):] + METHODS[:rep % len(METHODS)]
        for key in workloads:
            best = dict.fromkeys(METHODS, float("inf"))
            for _ in range(inner):  # cycle through the methods so slow spells hit all alike
                for m in order:
                    best[m] = min(best[m], _drive(programs[key][m], m))
            for m in METHODS:
                result.samples[(*key, m)].append(best[m])
    return result
