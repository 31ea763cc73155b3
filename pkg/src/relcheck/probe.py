"""The instrumentation server and the resident comparison routines.

The server speaks a line protocol (one command per line, one response per
line). A transcript that patches ``sub1(arg2, arg3)`` into the entry of
``sub2`` in process 667::

    attach a.out 667          -> ok attached 667 a.out
    createPoint 667 sub2      -> ok point 1 entry of sub2
    insertCall 667 sub1 2 3   -> ok call 1 sub1(2,3)

``insertCall`` binds formal-parameter positions of the instrumented routine;
trailing ``key=value`` tokens are passed to the inserted routine as metadata.
Once inserted, a call runs on every traversal of its point inside the target
process, with no controller involvement.
"""

from __future__ import annotations

import shlex
import sys
from dataclasses import dataclass, field
from itertools import count
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .compare import (Contribution, Mode, checksum, compare_element, compare_global,
                      compare_partial, verdict_report)
from .errors import (BadArgPosition, BadCommand, LinkFailure, NoSuchPid, RelcheckError,
                     SequenceMismatch, UnknownRoutine)
from .partition import DistributionSpec
from .runtime.machine import EXITED, Block, Process
from .runtime.residents import RESIDENTS, resident

DIFF_MARKER = "__diff_detected"


@dataclass(frozen=True)
class ProbeSpec:
    point: int
    pid: int
    routine: str
    site: str
    fn: Optional[str] = None
    argpos: tuple = ()
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ContributionMessage:
    key: tuple  # (routine, site, invocation, array)
    rank: int
    kind: str  # "checksum" | "block"
    contribution: Contribution


# -- metadata helpers -------------------------------------------------------------


def format_dist(dist: Optional[DistributionSpec]) -> str:
    if dist is None:
        return "none"
    return f"{dist.lo}:{dist.hi}:{dist.nranks}:{dist.dim}"


def parse_dist(text: str, array: str = "?") -> Optional[DistributionSpec]:
    if text in (None, "", "none"):
        return None
    try:
        lo, hi, n, dim = (int(x) for x in text.split(":"))
    except ValueError:
        raise BadCommand(f"bad dist {text!r}; expected lo:hi:nranks:dim") from None
    return DistributionSpec(array, dim, lo, hi, n)


def _settings(ctx) -> dict:
    """Parsed metadata, cached on the inserted call."""
    meta = ctx.meta
    s = meta.get("_parsed")
    if s is None:
        array = meta.get("array", ctx.formals[0] if ctx.formals else "?")
        s = {
            "array": array,
            "mode": Mode.parse(meta.get("mode", "element")),
            "tol": float(meta.get("tol", 0.0)),
            "relative": meta.get("relative", "0") in ("1", "true", "yes"),
            "dist": parse_dist(meta.get("dist", "none"), array),
            "peer": int(meta["peer"]) if "peer" in meta else None,
            "contact": meta.get("contact"),
        }
        meta["_parsed"] = s
    return s


def _replicated(view) -> DistributionSpec:
    lo, hi = view.dims[0]
    return DistributionSpec("?", 1, lo, hi, 1)


def read_contact(path) -> dict:
    """``{rank: pid}`` from a contact file of ``rank pid label`` lines."""
    out = {}
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if len(parts) >= 2:
            out[int(parts[0])] = int(parts[1])
    return out


# -- residents --------------------------------------------------------------------


@resident("send_contribution")
def send_contribution(ctx, arr):
    """Parallel side: ship this rank's owned block, or its checksum, to the serial peer."""
    if False:
        yield
    s = _settings(ctx)
    rt = ctx.runtime
    peer = s["peer"]
    if peer is None or peer not in rt.procs:
        raise LinkFailure(f"rank {ctx.rank}: no serial peer {peer!r} to send to")
    view = ctx.view(0, arr)
    dist = s["dist"]
    if dist is None:
        if ctx.rank != 0:
            return  # replicated array: rank 0 speaks for all
        dist = _replicated(view)
    lo, hi = dist.bounds(ctx.rank)
    owned = view.section(dist.dim, lo, hi)
    if s["mode"] is Mode.ELEMENT:
        kind, value = "block", owned.copy()
    else:
        kind, value = "checksum", checksum(owned)
    key = (ctx.routine, ctx.site, ctx.invocation, s["array"])
    link = rt.link(peer, ctx.rank)
    if not ctx.meta.get("_linked"):
        ctx.meta["_linked"] = True
        rt.stats["links_established"] += 1
    link.append(ContributionMessage(key, ctx.rank, kind, Contribution(ctx.rank, (lo, hi), value)))


@resident("receive_and_compare")
def receive_and_compare(ctx, arr):
    """Serial side: rendezvous with every rank at this checkpoint and compare."""
    s = _settings(ctx)
    rt = ctx.runtime
    view = ctx.view(0, arr)
    dist = s["dist"]
    senders = range(dist.nranks) if dist is not None else (0,)
    key = (ctx.routine, ctx.site, ctx.invocation, s["array"])
    pids = read_contact(s["contact"]) if s["contact"] else {}
    contribs = []
    for r in senders:
        q = rt.link(ctx.pid, r)
        if not q:
            yield Block(lambda q=q: bool(q), f"checkpoint {_fmt(key)} from rank {r}",
                        _stale_check(rt, pids.get(r), q, r, key))
        msg = q.popleft()
        if msg.key != key:
            raise SequenceMismatch(f"serial is at {_fmt(key)} but rank {r} sent {_fmt(msg.key)}")
        contribs.append(msg.contribution)
    rt.stats[("checkpoints", ctx.pid)] += 1

    serial = view.to_numpy()
    lower = tuple(lo for lo, _ in view.dims)
    mode, tol, rel = s["mode"], s["tol"], s["relative"]
    if dist is None:
        dist = _replicated(view)
    if mode is Mode.GLOBAL:
        v = compare_global(checksum(serial), [c.value for c in contribs], tol, rel)
    elif mode is Mode.PARTIAL:
        v = compare_partial(serial, contribs, dist, tol, lower, rel)
    else:
        v = compare_element(serial, contribs, dist, tol, lower, rel)
    if not v.passed:
        report = verdict_report(v, ctx.routine, ctx.site, ctx.invocation, s["array"], tol)
        rt.stats[("divergences", ctx.pid)] += 1
        yield from ctx.call(DIFF_MARKER, report)


def _fmt(key) -> str:
    routine, site, inv, array = key
    return f"{array} at {site} of {routine} #{inv}"


def _stale_check(rt, pid, q, rank, key):
    if pid is None:
        return None

    def stale():
        p = rt.procs.get(pid)
        if not q and p is not None and p.handle.state == EXITED:
            return SequenceMismatch(f"rank {rank} finished without reaching {_fmt(key)}")
        return None
    return stale


@resident("count_calls")
def count_calls(ctx, *args):
    """Execution counter keyed by (pid, routine, site)."""
    if False:
        yield
    if isinstance(ctx, Process):
        ctx.rt.stats[("count", ctx.handle.pid, ctx._where(), "call")] += 1
    else:
        ctx.runtime.stats[("count", ctx.pid, ctx.routine, ctx.site)] += 1


@resident("trace_args")
def trace_args(ctx, *args):
    """Record the objects bound to the call (arrays by identity, scalars by value)."""
    if False:
        yield
    rt = ctx.runtime
    if not hasattr(rt, "trace"):
        rt.trace = []
    rt.trace.append((ctx.pid, ctx.routine, ctx.site, ctx.invocation, args))


@resident("checkpoint_sum")
def checkpoint_sum(ctx, arr):
    """Snapshot and checksum an array: a checkpoint's local work, minus the peer."""
    if False:
        yield
    rt = ctx.rt if isinstance(ctx, Process) else ctx.runtime
    rt.stats["checkpoint_sums"] += 1
    rt.last_sum = checksum(np.array(arr, dtype=np.float64))


# -- the server -------------------------------------------------------------------


def _is_int(tok: str) -> bool:
    try:
        int(tok)
        return True
    except ValueError:
        return False


class InstrumentationServer:
    """One server instance controls every process of a session."""

    def __init__(self, runtime, name: str = "IS"):
        self.rt = runtime
        self.name = name
        self.points: dict = {}  # id -> ProbeSpec (fn None for bare points)
        self.calls: list = []  # ProbeSpec per inserted call, in insertion order
        self._ids = count(1)
        self._last: dict = {}  # pid -> last point id
        self.transcript: list = []

    def handle_command(self, line: str) -> str:
        try:
            toks = shlex.split(line)
        except ValueError as exc:
            resp = f"err BadCommand {exc}"
        else:
            try:
                resp = "ok " + self._dispatch(toks)
            except RelcheckError as exc:
                resp = f"err {exc.code} {exc.message}"
        self.transcript.append((line, resp))
        return resp

    def serve(self, lines: Iterable[str], out=None) -> list:
        """Answer each non-blank line in turn; ``out`` receives one response per line."""
        responses = []
        for line in lines:
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            r = self.handle_command(line.strip())
            responses.append(r)
            if out is not None:
                out.write(r + "\n")
                out.flush()
        return responses

    def serve_stdio(self):
        return self.serve(sys.stdin, sys.stdout)

    # -- commands -------------------------------------------------------------------

    def _dispatch(self, toks) -> str:
        if not toks:
            raise BadCommand("empty command")
        cmd, args = toks[0], toks[1:]
        fn = {"attach": self._attach, "detach": self._detach, "createPoint": self._create,
              "insertCall": self._insert, "continue": self._continue, "stop": self._stop,
              "print": self._print, "removeCalls": self._remove}.get(cmd)
        if fn is None:
            raise BadCommand(f"unknown command {cmd!r}")
        return fn(args)

    def _pid(self, tok) -> int:
        if not _is_int(tok):
            raise BadCommand(f"expected a pid, got {tok!r}")
        return int(tok)

    def _attach(self, args) -> str:
        if len(args) != 2:
            raise BadCommand("usage: attach <label> <pid>")
        label, pid = args[0], self._pid(args[1])
        h = self.rt.handle(pid)
        if h.label != label:
            raise NoSuchPid(f"pid {pid} runs {h.label}, not {label}")
        self.rt.attach(pid, self.name)
        return f"attached {pid} {label}"

    def _detach(self, args) -> str:
        if len(args) != 1:
            raise BadCommand("usage: detach <pid>")
        pid = self._pid(args[0])
        self.rt.detach(pid, self.name)
        return f"detached {pid}"

    def _create(self, args) -> str:
        if len(args) not in (2, 3) or (len(args) == 3 and args[2] not in ("entry", "exit")):
            raise BadCommand("usage: createPoint <pid> <routine> [entry|exit]")
        pid = self._pid(args[0])
        routine, site = args[1], args[2] if len(args) == 3 else "entry"
        if not any(p.program.routine(routine) is not None for p in self.rt.procs.values()):
            raise UnknownRoutine(f"no routine {routine!r} in any process")
        proc = self.rt._owner(pid, self.name)
        if proc.program.routine(routine) is None:
            raise UnknownRoutine(f"no routine {routine!r} in pid {pid}")
        pt = next(self._ids)
        self.points[pt] = ProbeSpec(pt, pid, routine, site)
        self._last[pid] = pt
        return f"point {pt} {site} of {routine}"

    def _insert(self, args) -> str:
        if len(args) < 2:
            raise BadCommand("usage: insertCall <pid> [<point>|<routine>] <fn> <argpos...>")
        pid = self._pid(args[0])
        proc = self.rt._owner(pid, self.name)
        meta = dict(t.split("=", 1) for t in args[1:] if "=" in t)
        pos = [t for t in args[1:] if "=" not in t]
        if len(pos) == 1 or _is_int(pos[1]):
            if pid not in self._last:
                raise BadCommand(f"no point created in pid {pid}")
            point, fn, argtoks = self._last[pid], pos[0], pos[1:]
        else:
            point, fn, argtoks = self._point_for(pid, pos[0]), pos[1], pos[2:]
        spec = self.points[point]
        routine = proc.program.routine(spec.routine)
        if not all(_is_int(t) for t in argtoks):
            raise BadArgPosition(f"argument positions must be integers: {argtoks}")
        argpos = tuple(int(t) for t in argtoks)
        for k in argpos:
            if not 1 <= k <= len(routine.params):
                raise BadArgPosition(f"{spec.routine} has {len(routine.params)} formal(s); "
                                     f"no position {k}")
        target = proc.program.routine(fn)
        if target is None and fn not in RESIDENTS:
            raise UnknownRoutine(f"no routine or resident {fn!r}")
        if target is not None:
            self._check_binding(proc, spec.routine, routine, target, argpos)
        self.rt.insert_call(pid, spec.routine, spec.site, fn, argpos, meta, point, who=self.name)
        self.calls.append(ProbeSpec(point, pid, spec.routine, spec.site, fn, argpos, dict(meta)))
        return f"call {point} {fn}({','.join(map(str, argpos))})"

    def _point_for(self, pid, tok) -> int:
        if _is_int(tok):
            pt = int(tok)
            if pt not in self.points or self.points[pt].pid != pid:
                raise BadCommand(f"no point {pt} in pid {pid}")
            return pt
        for pt in sorted(self.points, reverse=True):
            if self.points[pt].pid == pid and self.points[pt].routine == tok:
                return pt
        raise UnknownRoutine(f"no point created at {tok!r} in pid {pid}")

    @staticmethod
    def _check_binding(proc, rname, routine, target, argpos):
        if len(target.params) != len(argpos):
            raise BadArgPosition(f"{target.name} takes {len(target.params)} argument(s), "
                                 f"{len(argpos)} bound")
        for k, formal in zip(argpos, target.params):
            a = proc.table.lookup(rname, routine.params[k - 1])
            b = proc.table.lookup(target.name, formal)
            if (a.kind == "array") != (b.kind == "array"):
                raise BadArgPosition(f"position {k} of {rname} is not compatible with "
                                     f"{target.name}'s {formal}")

    def _continue(self, args) -> str:
        pid = self._pid(args[0]) if len(args) == 1 else self._usage("continue <pid>")
        self.rt.continue_(pid, self.name)
        return f"continued {pid}"

    def _stop(self, args) -> str:
        pid = self._pid(args[0]) if len(args) == 1 else self._usage("stop <pid>")
        self.rt.stop(pid, self.name)
        return f"stopped {pid}"

    def _print(self, args) -> str:
        """Debugger-style value dump: a text round trip of the whole variable."""
        if len(args) != 3:
            self._usage("print <pid> <routine> <var>")
        pid = self._pid(args[0])
        v = self.rt.read_mem(pid, args[1], args[2], who=self.name)
        if hasattr(v, "data"):
            return " ".join(map(repr, v.data))
        return repr(v)

    def _remove(self, args) -> str:
        pid = self._pid(args[0]) if len(args) == 1 else self._usage("removeCalls <pid>")
        self.rt.clear_probes(pid, who=self.name)
        self.calls = [c for c in self.calls if c.pid != pid]
        return f"removed calls in {pid}"

    @staticmethod
    def _usage(text):
        raise BadCommand(f"usage: {text}")


def main(argv=None):
    """Serve an empty runtime on stdin; mostly useful for protocol smoke tests."""
    from .runtime.machine import Runtime
    InstrumentationServer(Runtime()).serve_stdio()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
