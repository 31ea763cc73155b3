import json

import pytest

from relcheck.cli import SessionConfig, main, orchestrate, parse_distribute, render_report
from relcheck.compare import DivergenceReport
from relcheck.errors import ConfigError

SERIAL_AB = """\
program main
  real a(1:8)
  call f(a)
  call g(a)
end

subroutine f(x)
  real x(1:8)
  integer i
  do i = 1, 8
    x(i) = 1.0
  end do
  return
end

subroutine g(y)
  real y(1:8)
  integer i
  do i = 1, 8
    y(i) = y(i) + 1.0
  end do
  return
end
"""

PARALLEL_BA = SERIAL_AB.replace("program main", "parallel program main").replace(
    "  call f(a)\n  call g(a)\n", "  call g(a)\n  call f(a)\n")


def cfg(path, **kw):
    base = dict(serial=path, monitor=["phi7@output"], nranks=4, distribute="oldphi4:1")
    base.update(kw)
    return SessionConfig(**base)


def test_correct_run(jacobi_path):
    out = orchestrate(cfg(jacobi_path, mode="partial", tolerance=1e-12))
    assert out.kind == "NoDivergence" and out.checkpoints == 402 and out.exit_code == 0


def test_bug_is_bracketed_to_update(jacobi_path):
    out = orchestrate(cfg(jacobi_path, drop_edges=[12]))
    assert out.kind == "Divergence" and out.exit_code == 1
    r = out.report
    assert (r.routine, r.site, r.invocation) == ("update", "exit", 1)


def test_single_rank_hides_the_bug(jacobi_path):
    out = orchestrate(cfg(jacobi_path, nranks=1, drop_edges=[12]))
    assert out.kind == "NoDivergence" and out.checkpoints == 402


def test_log_shape(jacobi_path):
    out = orchestrate(cfg(jacobi_path, drop_edges=[12]))
    steps = [e["step"] for e in out.log if e["step"] is not None]
    assert steps == list(range(1, 10))
    tail = [e["event"] for e in out.log if e["step"] is None]
    assert tail[:3] == ["instrument", "detach", "continue"]


def test_render_report(jacobi_path, tmp_path):
    out = orchestrate(cfg(jacobi_path, drop_edges=[12], report=str(tmp_path / "r.json")))
    text = render_report(out, tmp_path / "r.json")
    assert "update" in text and "exit" in text and "rank 0" in text
    back = DivergenceReport.from_json((tmp_path / "r.json").read_text())
    assert back == out.report
    assert back.source.endswith("r.spmd.mf") and back.line is not None
    src = (tmp_path / "r.spmd.mf").read_text().splitlines()
    assert src[back.line - 1].startswith("subroutine update")


def test_render_no_divergence(jacobi_path, tmp_path):
    out = orchestrate(cfg(jacobi_path, mode="global", tolerance=1e-12))
    text = render_report(out, tmp_path / "ok.json")
    assert "402" in text and "differences: 0" in text
    assert json.loads((tmp_path / "ok.json").read_text())["checkpoints"] == 402


def test_config_errors(jacobi_path):
    with pytest.raises(ConfigError):
        orchestrate(cfg(jacobi_path, monitor=["phi7"]))
    with pytest.raises(ConfigError):
        orchestrate(cfg(jacobi_path, monitor=["nosuch@output"]))
    with pytest.raises(ConfigError):
        orchestrate(cfg(jacobi_path, nranks=0))
    with pytest.raises(ConfigError):
        orchestrate(cfg(jacobi_path, distribute=None))


def test_parse_distribute():
    assert parse_distribute("u,v:1") == (["u", "v"], 1)
    assert parse_distribute("a:dim2") == (["a"], 2)
    assert parse_distribute("a") == (["a"], 1)
    with pytest.raises(ConfigError):
        parse_distribute(":x")


def write_pair(tmp_path):
    s, p = tmp_path / "s.mf", tmp_path / "p.mf"
    s.write_text(SERIAL_AB)
    p.write_text(PARALLEL_BA)
    return str(s), str(p)


def test_sequence_mismatch_outcome(tmp_path):
    s, p = write_pair(tmp_path)
    out = orchestrate(SessionConfig(s, ["a@main"], 2, parallel=p, distribute="a:1"))
    assert out.kind == "SequenceMismatch" and out.exit_code == 2


def test_main_exit_codes(jacobi_path, tmp_path, capsys):
    base = ["run", "--serial", jacobi_path, "--distribute", "oldphi4:1", "--ranks", "4",
            "--monitor", "phi7@output"]
    assert main(base + ["--drop-edge", "12", "--mode", "element"]) == 1
    assert "differs at exit of update" in capsys.readouterr().out
    s, p = write_pair(tmp_path)
    assert main(["run", "--serial", s, "--parallel", p, "--ranks", "2",
                 "--monitor", "a@main"]) == 2
    assert main(["run", "--serial", str(tmp_path / "missing.mf"), "--distribute", "a",
                 "--monitor", "a@main"]) == 2


def test_run_writes_log(jacobi_path, tmp_path):
    log = tmp_path / "log.jsonl"
    assert main(["run", "--serial", jacobi_path, "--distribute", "oldphi4:1", "--ranks", "2",
                 "--monitor", "phi7@output", "--mode", "global", "--tolerance", "1e-12",
                 "--log", str(log)]) == 0
    events = [json.loads(ln) for ln in log.read_text().splitlines()]
    assert [e["step"] for e in events[:9]] == list(range(1, 10))


def test_analyze_and_parallelize(stencil2d_path, tmp_path, capsys):
    assert main(["analyze", stencil2d_path]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].startswith("e1 flow")
    spmd, db = tmp_path / "p.mf", tmp_path / "db.json"
    assert main(["parallelize", stencil2d_path, "--distribute", "u,v:1", "--ranks", "4",
                 "-o", str(spmd), "--db", str(db)]) == 0
    assert "exchange(" in spmd.read_text()
    assert json.loads(db.read_text())["v"] == 1


def test_parallel_source_with_db(jacobi_path, tmp_path):
    spmd, db = tmp_path / "p.mf", tmp_path / "db.json"
    main(["parallelize", jacobi_path, "--distribute", "oldphi4:1", "--ranks", "3",
          "--drop-edge", "12", "-o", str(spmd), "--db", str(db)])
    out = orchestrate(SessionConfig(jacobi_path, ["phi7@output"], 3, parallel=str(spmd),
                                    db=str(db)))
    assert out.kind == "Divergence" and out.report.source == str(spmd)
