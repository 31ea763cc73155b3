"""Turn a serial stencil into SPMD code and check that it computes the same thing.

Run:  python demos/01_parallelize_stencil.py
"""

import numpy as np

from relcheck.depan import build_defuse, format_edges
from relcheck.lang import parse, pretty_print
from relcheck.partition import DistributionSpec, make_distribution, parallelize
from relcheck.programs import source
from relcheck.runtime import run_parallel, run_serial

serial = parse(source("stencil2d.mf"))
print("== serial source ==")
print(pretty_print(serial))

# Dependence edges decide where halo exchanges are needed.
print("== dependence edges ==")
print(format_edges(build_defuse(serial)))

# Distribute the aligned pair u, v by rows over four ranks.
dist = make_distribution(serial, "u,v", dim=1, nranks=4)
spmd, pdb = parallelize(serial, dist)
print("== SPMD source ==")
print(pretty_print(spmd))
print("exchanges:", [(x["array"], x["direction"]) for x in pdb.exchanges])

# Run both; every rank's owned rows must match the serial result bit for bit.
_, ref = run_serial(serial)
_, finals = run_parallel(spmd, 4, seed=1)
rows = DistributionSpec("main.u", 1, 0, 33, 4)
for name in ("u", "v"):
    owned = np.concatenate([f[name][lo:hi + 1] for f, (lo, hi) in zip(finals, rows.blocks())])
    print(f"{name}: parallel == serial ->", np.array_equal(owned, ref[name]))
