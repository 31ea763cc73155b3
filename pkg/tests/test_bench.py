import json

from relcheck.bench import METHODS, _drive, run_bench, workload_source
from relcheck.lang import parse
from relcheck.runtime import run_serial

TINY = {("small", "light"): (4, 3, 5, 1)}


def test_workload_runs_and_compiled_in_is_transparent():
    _, plain = run_serial(parse(workload_source(4, 3, 5, 2)))
    _, probed = run_serial(parse(workload_source(4, 3, 5, 2, compiled_in=True)))
    assert (plain["a"] == probed["a"]).all()


def test_every_method_completes():
    program = parse(workload_source(4, 3, 5, 1))
    for m in METHODS:
        assert _drive(program, m) >= 0.0


def test_result_shape():
    res = run_bench(reps=2, workloads=TINY, inner=1)
    for m in METHODS:
        assert len(res.samples[("small", "light", m)]) == 2
        assert res.median("small", "light", m) >= 0.0
    assert res.table().splitlines()[2].split()[:2] == ["small", "light"]
    d = json.loads(json.dumps(res.to_dict()))
    assert set(d["median"]) == {f"small/light/{m}" for m in METHODS}
