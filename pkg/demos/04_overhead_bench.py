"""Compare what a checkpoint costs when done four different ways.

``none`` runs the workload bare, ``compiled-in`` has the checkpoint call in the
source, ``patched`` inserts the same call at run time, and ``trap`` stops the
process at a breakpoint and pulls the array out over the server's text protocol.

Run:  python demos/04_overhead_bench.py [reps]
"""

import sys

from relcheck.bench import run_bench

reps = int(sys.argv[1]) if len(sys.argv) > 1 else 5
result = run_bench(reps=reps)
print(result.table())
for size, work in result.cells():
    m = {k: result.median(size, work, k) for k in ("compiled-in", "patched", "trap")}
    print(f"{size}/{work}: patched is {m['patched'] / m['compiled-in']:.2f}x compiled-in, "
          f"trap is {m['trap'] / m['patched']:.1f}x patched")
