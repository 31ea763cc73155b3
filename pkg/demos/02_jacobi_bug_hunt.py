"""Find a missing halo exchange in a parallel Jacobi solver.

The parallel version is generated with one dependence edge dropped, which removes
the exchange that fills each rank's right halo row. Relative debugging runs the
serial and parallel programs side by side and stops at the first checkpoint where
the monitored data disagree.

Run:  python demos/02_jacobi_bug_hunt.py
"""

from relcheck.cli import SessionConfig, orchestrate
from relcheck.programs import path

JACOBI = str(path("jacobi.mf"))


def session(**kw):
    return SessionConfig(serial=JACOBI, monitor=["phi7@output"], nranks=4,
                         distribute="oldphi4:1", **kw)


print("== correct parallelization, element-wise at tolerance 0 ==")
ok = orchestrate(session())
print(ok.kind, "-", ok.message)

print("\n== edge 12 removed ==")
bad = orchestrate(session(drop_edges=[12]))
print(bad.kind, "after", bad.checkpoints, "checkpoints")
print(bad.report.message(limit=6))

# The cheaper checksum modes localize the same bug; partial also names a rank.
for mode in ("global", "partial"):
    out = orchestrate(session(drop_edges=[12], mode=mode, tolerance=1e-9))
    r = out.report
    rank = "" if r.failing_rank is None else f", first failing rank {r.failing_rank}"
    print(f"\n{mode}: {r.routine} {r.site} #{r.invocation}, delta {r.delta:.3g}{rank}")

print("\n== orchestration log of the buggy run ==")
for e in bad.log:
    print(e)
