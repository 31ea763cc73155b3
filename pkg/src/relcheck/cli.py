"""Session orchestration and the ``relcheck`` command line.

A session runs the serial reference and its SPMD counterpart side by side,
patches comparison calls into every routine that can modify the monitored
arrays, and stops at the first checkpoint where the two disagree.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .compare import DivergenceReport, Mode
from .depan import build_defuse, format_edges, modifying_routines
from .errors import ConfigError, IoError, RelcheckError, SequenceMismatch, UnknownArray
from .lang import parse, pretty_print
from .partition import (ParallelizationDB, make_distribution, parallelize, read_db,
                        write_db)
from .probe import DIFF_MARKER, InstrumentationServer, format_dist, read_contact
from .runtime.machine import Runtime

SERIAL_LABEL = "S"
PARALLEL_LABEL = "P"


@dataclass
class SessionConfig:
    serial: str
    monitor: list
    nranks: int = 4
    parallel: Optional[str] = None
    distribute: Optional[str] = None  # "arr[,arr...][:dim]"
    drop_edges: list = field(default_factory=list)
    mode: str = "element"
    tolerance: float = 0.0
    relative: bool = False
    db: Optional[str] = None
    report: Optional[str] = None
    seed: int = 0
    contact_timeout: float = 5.0

    def validate(self) -> "SessionConfig":
        if self.nranks < 1:
            raise ConfigError("nranks must be at least 1")
        if not self.monitor:
            raise ConfigError("at least one --monitor array@routine is required")
        for m in self.monitor:
            if m.count("@") != 1 or not all(m.split("@")):
                raise ConfigError(f"monitored variable {m!r} is not of the form array@routine")
        try:
            Mode.parse(self.mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not self.tolerance >= 0:
            raise ConfigError("tolerance must be non-negative")
        if self.parallel is None and self.distribute is None:
            raise ConfigError("give either a parallel source or a distribution to apply")
        return self


@dataclass
class SessionOutcome:
    kind: str  # "NoDivergence" | "Divergence" | "SequenceMismatch"
    checkpoints: int
    report: Optional[DivergenceReport] = None
    message: str = ""
    log: list = field(default_factory=list)
    serial_final: dict = field(default_factory=dict)  # main's arrays after a full run
    rank_finals: list = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return {"NoDivergence": 0, "Divergence": 1}.get(self.kind, 2)


def parse_distribute(text: str) -> tuple:
    """``"u,v:1"`` or ``"u:dim2"`` -> (["u", "v"], dim)."""
    arrays, _, dim = text.partition(":")
    dim = dim.lower().removeprefix("dim") if dim else "1"
    if not arrays or not dim.isdigit():
        raise ConfigError(f"bad distribution {text!r}; expected array[,array]:dimN")
    return [a.strip() for a in arrays.split(",") if a.strip()], int(dim)


def _load(path, what):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {what} source {path}: {exc}") from None
    return text


class _Log:
    def __init__(self, sink=None):
        self.events = []
        self.sink = sink

    def __call__(self, step, event, **fields):
        rec = {"step": step, "event": event, **fields}
        self.events.append(rec)
        if self.sink is not None:
            self.sink.write(json.dumps(rec, sort_keys=True) + "\n")


def prepare(cfg: SessionConfig):
    """Serial program, SPMD program, its text, and the parallelization database."""
    serial = parse(_load(cfg.serial, "serial"))
    if cfg.parallel is not None:
        ptext = _load(cfg.parallel, "parallel")
        spmd = parse(ptext)
        if cfg.db and Path(cfg.db).exists():
            pdb = read_db(cfg.db)
        elif cfg.distribute:
            arrays, dim = parse_distribute(cfg.distribute)
            pdb = ParallelizationDB([make_distribution(serial, arrays, dim, cfg.nranks)], {}, [],
                                    [], [], [])
        else:
            pdb = ParallelizationDB([], {}, [], [], [], [])
        return serial, spmd, ptext, pdb, cfg.parallel
    arrays, dim = parse_distribute(cfg.distribute)
    try:
        dist = make_distribution(serial, arrays, dim, cfg.nranks)
    except UnknownArray as exc:
        raise ConfigError(str(exc)) from None
    spmd, pdb = parallelize(serial, dist, removed=cfg.drop_edges)
    ptext = pretty_print(spmd)
    if cfg.db:
        write_db(pdb, cfg.db)
    where = "<generated>"
    if cfg.report:
        where = str(Path(cfg.report).with_suffix(".spmd.mf"))
        try:
            Path(where).write_text(ptext)
        except OSError as exc:
            raise IoError(f"cannot write {where}: {exc}") from None
    return serial, spmd, ptext, pdb, where


def _header_lines(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*(?:program|subroutine)\s+(\w+)", line, re.I)
        if m:
            out.setdefault(m.group(1).lower(), n)
    return out


def orchestrate(cfg: SessionConfig, log_sink=None) -> SessionOutcome:
    cfg.validate()
    log = _Log(log_sink)
    serial, spmd, ptext, pdb, spmd_path = prepare(cfg)
    db = build_defuse(serial)
    mode = Mode.parse(cfg.mode)

    rt = Runtime(cfg.seed)
    tmp = tempfile.TemporaryDirectory(prefix="relcheck-")
    contact = Path(tmp.name) / "contact"
    try:
        # 1. arm the divergence breakpoint before the serial process runs
        s = rt.launch(serial, SERIAL_LABEL, launcher="orchestrator")
        rt.set_breakpoint(s.pid, DIFF_MARKER, "entry", who="orchestrator")
        log(1, "arm_breakpoint", marker=DIFF_MARKER)
        # 2.
        rt.continue_(s.pid, who="orchestrator")
        log(2, "start_serial", label=SERIAL_LABEL)
        # 3.
        contact.touch()
        rt.spawn_parallel(spmd, cfg.nranks, contact, PARALLEL_LABEL, launcher="orchestrator")
        log(3, "launch_parallel", nranks=cfg.nranks, label=PARALLEL_LABEL)
        # 4.
        deadline = time.monotonic() + cfg.contact_timeout
        while len(read_contact(contact)) < cfg.nranks:
            if time.monotonic() > deadline:
                raise ConfigError("parallel processes never wrote their contact information")
            time.sleep(0.01)
        log(4, "contact_ready", entries=cfg.nranks)
        # 5.
        server = InstrumentationServer(rt)
        log(5, "start_is")
        # 6.
        _ok(server, f"attach {SERIAL_LABEL} {s.pid}")
        log(6, "attach_serial")
        # 7.
        ranks = read_contact(contact)
        requests = [f"attach {PARALLEL_LABEL} {ranks[r]}" for r in sorted(ranks)]
        log(7, "read_contact", ranks=len(ranks))
        # 8.
        for line in requests:
            _ok(server, line)
        log(8, "attach_ranks", ranks=len(requests))
        # 9.
        targets = _targets(db, cfg.monitor)
        log(9, "probe_db", targets=[f"{r}.{f}" for r, f in targets])

        for r, formal in targets:  # serial process first, then the ranks
            pos = serial.routine(r).params.index(formal) + 1
            dist = pdb.distribution_for(r, formal)
            if dist is not None:
                dist = dist.with_nranks(cfg.nranks)
            meta = (f"mode={mode.value} dist={format_dist(dist)} array={formal} "
                    f"tol={cfg.tolerance!r} relative={int(cfg.relative)}")
            for site in ("entry", "exit"):
                _ok(server, f"createPoint {s.pid} {r} {site}")
                _ok(server, f"insertCall {s.pid} receive_and_compare {pos} {meta} "
                            f"contact={contact}")
            for rank in sorted(ranks):
                for site in ("entry", "exit"):
                    _ok(server, f"createPoint {ranks[rank]} {r} {site}")
                    _ok(server, f"insertCall {ranks[rank]} send_contribution {pos} {meta} "
                                f"peer={s.pid}")
        log(None, "instrument", points=2 * len(targets) * (1 + len(ranks)))
        for rank in sorted(ranks):
            _ok(server, f"detach {ranks[rank]}")
        log(None, "detach", ranks=len(ranks))
        _ok(server, f"continue {s.pid}")
        log(None, "continue")

        count = lambda: rt.stats[("checkpoints", s.pid)]  # noqa: E731
        try:
            while True:
                ev = rt.run()
                if ev.kind == "breakpoint" and ev.pid == s.pid and ev.routine == DIFF_MARKER:
                    report = ev.args[0]
                    report.source = spmd_path
                    report.line = _header_lines(ptext).get(report.routine)
                    log(None, "divergence", routine=report.routine, site=report.site,
                        invocation=report.invocation)
                    return SessionOutcome("Divergence", count(), report, report.message(),
                                          log.events)
                if ev.kind == "breakpoint":
                    rt.continue_(ev.pid)
                    continue
                if ev.kind == "exited":
                    break
                raise SequenceMismatch("execution stalled before both sides finished")
            left = {k[1]: len(q) for k, q in rt.links.items() if k[0] == s.pid and q}
            if left:
                raise SequenceMismatch(
                    "parallel ranks sent checkpoints the serial run never reached: " +
                    ", ".join(f"rank {r}: {n}" for r, n in sorted(left.items())))
        except SequenceMismatch as exc:
            log(None, "sequence_mismatch")
            return SessionOutcome("SequenceMismatch", count(), None, exc.message, log.events)
        log(None, "finished", checkpoints=count())
        return SessionOutcome("NoDivergence", count(), None,
                              f"no divergence over {count()} checkpoints", log.events,
                              rt.final_state(s.pid),
                              [rt.final_state(ranks[r]) for r in sorted(ranks)])
    finally:
        rt.terminate_all()
        tmp.cleanup()


def _ok(server, line):
    resp = server.handle_command(line)
    if not resp.startswith("ok"):
        _, code, *rest = resp.split(" ", 2)
        err = RelcheckError(rest[0] if rest else "")
        err.code = code
        raise err
    return resp


def _targets(db, monitors) -> list:
    out = []
    for m in monitors:
        array, scope = m.split("@")
        try:
            found = modifying_routines(db, array, scope)
        except UnknownArray as exc:
            raise ConfigError(str(exc)) from None
        for t in found:
            if t not in out:
                out.append(t)
    return out


def render_report(outcome: SessionOutcome, path=None) -> str:
    """Human-readable summary; ``path`` also receives the structured record."""
    if outcome.kind == "Divergence":
        text = outcome.report.message()
        data = outcome.report.to_json()
    else:
        text = (f"{outcome.kind}: {outcome.message}\n"
                f"  checkpoints compared: {outcome.checkpoints}, differences: 0")
        data = json.dumps({"outcome": outcome.kind, "checkpoints": outcome.checkpoints,
                           "message": outcome.message}, indent=1, sort_keys=True)
    if path is not None:
        try:
            Path(path).write_text(data + "\n")
        except OSError as exc:
            raise IoError(f"cannot write report {path}: {exc}") from None
    return text


# -- command line ----------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="relcheck", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="compare a serial run against its parallel version")
    run.add_argument("--serial", required=True)
    run.add_argument("--parallel")
    run.add_argument("--distribute", help="array[,array]:dimN to parallelize internally")
    run.add_argument("--ranks", type=int, default=4)
    run.add_argument("--drop-edge", type=int, action="append", default=[], metavar="ID")
    run.add_argument("--monitor", action="append", default=[], metavar="ARRAY@ROUTINE")
    run.add_argument("--mode", default="element", choices=["global", "partial", "element"])
    run.add_argument("--tolerance", type=float, default=0.0)
    run.add_argument("--relative", action="store_true")
    run.add_argument("--db")
    run.add_argument("--report")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--log", help="write the orchestration log (JSON lines) here")

    an = sub.add_parser("analyze", help="print dependence edges with their ids")
    an.add_argument("source")

    par = sub.add_parser("parallelize", help="emit SPMD source and a parallelization db")
    par.add_argument("source")
    par.add_argument("--distribute", required=True)
    par.add_argument("--ranks", type=int, default=4)
    par.add_argument("--drop-edge", type=int, action="append", default=[], metavar="ID")
    par.add_argument("-o", "--output")
    par.add_argument("--db")

    b = sub.add_parser("bench", help="time the instrumentation alternatives")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--json")
    return ap


def _run(args) -> int:
    cfg = SessionConfig(args.serial, args.monitor, args.ranks, args.parallel, args.distribute,
                        args.drop_edge, args.mode, args.tolerance, args.relative, args.db,
                        args.report, args.seed)
    sink = open(args.log, "w") if args.log else None
    try:
        outcome = orchestrate(cfg, sink)
    finally:
        if sink:
            sink.close()
    print(render_report(outcome, args.report))
    return outcome.exit_code


def _parallelize(args) -> int:
    p = parse(_load(args.source, "serial"))
    arrays, dim = parse_distribute(args.distribute)
    spmd, pdb = parallelize(p, make_distribution(p, arrays, dim, args.ranks), removed=args.drop_edge)
    text = pretty_print(spmd)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    if args.db:
        write_db(pdb, args.db)
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.cmd == "run":
            return _run(args)
        if args.cmd == "analyze":
            print(format_edges(build_defuse(parse(_load(args.source, "serial")))))
            return 0
        if args.cmd == "parallelize":
            return _parallelize(args)
        from .bench import run_bench
        result = run_bench(reps=args.reps)
        print(result.table())
        if args.json:
            Path(args.json).write_text(json.dumps(result.to_dict(), indent=1))
        return 0
    except RelcheckError as exc:
        print(f"relcheck: {exc.code}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
