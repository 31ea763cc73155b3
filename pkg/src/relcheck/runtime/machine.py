"""Processes, the cooperative scheduler, message channels and process control.

Every process (the serial reference or one SPMD rank) is a Python generator
chain. The scheduler resumes one runnable process at a time, picked by a seeded
RNG, until it next yields: at a call, a return, or a blocking receive. A
process is therefore always observed between statements.
"""

from __future__ import annotations

import ctypes
import itertools
import random
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ..errors import (AlreadyAttached, Deadlock, NoSuchPid, NotAttached, NotStopped,
                      ResidualMessages, RuntimeFault, SpawnFailure, TypeCheckError,
                      UnknownVariable)
from ..lang.typecheck import typecheck
from .codegen import array_size, compile_program
from .residents import RESIDENTS

_pids = itertools.count(1000)

CREATED, RUNNING, STOPPED, EXITED = "created", "running", "stopped", "exited"


@dataclass
class ProcessHandle:
    pid: int
    kind: str  # "serial" | "rank"
    rank: Optional[int]
    nranks: int
    label: str
    state: str = CREATED

    def __str__(self):
        who = "serial" if self.kind == "serial" else f"rank {self.rank}/{self.nranks}"
        return f"pid {self.pid} ({who}, {self.label}, {self.state})"


@dataclass
class ArrayView:
    """A program array: flat column-major storage plus declared bounds."""

    data: list
    dims: tuple

    @property
    def shape(self) -> tuple:
        return tuple(hi - lo + 1 for lo, hi in self.dims)

    def to_numpy(self) -> np.ndarray:
        return np.array(self.data, dtype=np.float64).reshape(self.shape, order="F")

    def section(self, dim: int, lo: int, hi: int) -> np.ndarray:
        """Elements whose ``dim`` index lies in ``lo..hi`` (full extent elsewhere)."""
        a = self.to_numpy()
        base = self.dims[dim - 1][0]
        idx = [slice(None)] * a.ndim
        idx[dim - 1] = slice(lo - base, hi - base + 1)
        return a[tuple(idx)]


@dataclass
class Block:
    """Why a process cannot proceed, with a readiness test."""

    ready: Callable[[], bool]
    where: str
    stale: Optional[Callable[[], Optional[Exception]]] = None


@dataclass
class InsertedCall:
    fn: str
    argpos: tuple
    meta: dict
    point: int


@dataclass
class RunEvent:
    kind: str  # "breakpoint" | "exited" | "idle"
    pid: Optional[int] = None
    routine: Optional[str] = None
    site: Optional[str] = None
    args: tuple = ()


@dataclass
class Frame:
    routine: str
    args: tuple
    invocation: int
    gen: object = None
    final: Optional[dict] = None
    line: int = 0


class ProbeContext:
    """What an inserted call sees: its process, the point, and the bound arguments."""

    def __init__(self, proc, frame, site, call: InsertedCall):
        self.process = proc
        self.runtime = proc.rt
        self.routine = frame.routine
        self.site = site
        self.invocation = frame.invocation
        self.meta = call.meta
        self.argpos = call.argpos

    @property
    def formals(self) -> tuple:
        routine = self.process.program.routine(self.routine)
        return tuple(routine.params[k - 1] for k in self.argpos)

    def view(self, i: int, value) -> ArrayView:
        return ArrayView(value, self.process.table.lookup(self.routine, self.formals[i]).dims)

    @property
    def pid(self):
        return self.process.handle.pid

    @property
    def rank(self):
        return self.process.handle.rank

    def call(self, name, *args):
        return self.process.call(name, args, 0)


class Process:
    """Execution context handed to generated code as ``P``."""

    def __init__(self, rt, program, table, funcs, handle, world, launcher):
        self.rt = rt
        self.program = program
        self.table = table
        self.funcs = funcs
        self.handle = handle
        self.world = world
        self.launcher = launcher
        self.controller = None
        self.frames: list = []
        self.block: Optional[Block] = None
        self.points: dict = {}  # (routine, site) -> [InsertedCall]
        self.breakpoints: set = set()
        self.invocations: Counter = Counter()
        self.final_state: dict = {}
        self.in_probe = 0
        self.error: Optional[Exception] = None
        self.myrank = handle.rank if handle.rank is not None else 0
        self.nranks = handle.nranks
        self.gen = self._top()

    # -- generated-code services ------------------------------------------------

    def _top(self):
        if False:
            yield
        yield from self.call(self.program.main.name, (), 0)

    def call(self, name, args, sid):
        fn = self.funcs.get(name)
        if fn is None:
            yield from self._resident(name, args)
            return
        self.invocations[name] += 1
        frame = Frame(name, tuple(args), self.invocations[name])
        self.frames.append(frame)
        yield from self._point(frame, "entry")
        frame.gen = fn(self, *args)
        yield from frame.gen
        yield from self._point(frame, "exit")
        if len(self.frames) == 1:
            self.final_state = self._capture(frame)
        self.frames.pop()
        yield None

    def leave(self, local_vars):
        if self.frames:
            self.frames[-1].final = local_vars

    def _resident(self, name, args):
        fn = RESIDENTS.get(name)
        if fn is None:
            from .. import probe  # noqa: F401  registers the comparison residents
            fn = RESIDENTS.get(name)
        if fn is None:
            raise RuntimeFault(f"call to unknown routine {name!r}", self._where(), None,
                               self.handle.rank)
        frame = Frame(name, tuple(args), 0)
        self.frames.append(frame)
        if (name, "entry") in self.breakpoints:
            yield from self._hit(frame, "entry")
        yield from fn(self, *args)
        self.frames.pop()

    def _point(self, frame, site):
        key = (frame.routine, site)
        if key in self.breakpoints:
            yield from self._hit(frame, site)
        calls = self.points.get(key)
        if calls:
            self.in_probe += 1
            try:
                for c in list(calls):
                    args = tuple(frame.args[k - 1] for k in c.argpos)
                    fn = RESIDENTS.get(c.fn)
                    if fn is None and c.fn in self.funcs:
                        yield from self.call(c.fn, args, 0)
                        continue
                    if fn is None:
                        from .. import probe  # noqa: F401
                        fn = RESIDENTS[c.fn]
                    yield from fn(ProbeContext(self, frame, site, c), *args)
            finally:
                self.in_probe -= 1

    def _hit(self, frame, site):
        self.handle.state = STOPPED
        self.rt._event(RunEvent("breakpoint", self.handle.pid, frame.routine, site, frame.args))
        yield None

    def _where(self):
        return self.frames[-1].routine if self.frames else None

    def oob(self, name, dim, value, lo, hi, sid):
        raise RuntimeFault(f"subscript {dim} of {name} is {value}, outside {lo}:{hi}",
                           self._where(), sid, self.handle.rank)

    def idiv(self, a, b):
        if b == 0:
            raise ZeroDivisionError
        q = abs(a) // abs(b)
        return q if (a >= 0) == (b >= 0) else -q

    def steps(self, lo, hi, st, sid):
        if st == 0:
            raise RuntimeFault("loop step is zero", self._where(), sid, self.handle.rank)
        return range(lo, hi + (1 if st > 0 else -1), st)

    def exit_value(self, lo, hi, st):
        trip = max(0, self.idiv(hi - lo + st, st))
        return lo + trip * st

    def setuppart(self, lo, hi, sid):
        from ..partition import block_bounds
        try:
            return block_bounds(lo, hi, self.nranks, self.myrank)
        except Exception as exc:
            raise RuntimeFault(f"setuppart: {exc}", self._where(), sid, self.handle.rank) from exc

    # -- communication ---------------------------------------------------------------

    def _chan(self, src, dst):
        return self.rt.channel(self.world, src, dst)

    def _flat_range(self, name, start, subs, dims, count, sid):
        for k, (s, (lo, hi)) in enumerate(zip(subs, dims), 1):
            if not lo <= s <= hi:
                self.oob(name, k, s, lo, hi, sid)
        if count < 0 or start + count > array_size(dims):
            raise RuntimeFault(f"{count} element(s) from {name}{tuple(subs)} run past the end "
                               f"of the array", self._where(), sid, self.handle.rank)
        return range(start, start + count)

    def send(self, arr, name, start, subs, dims, count, dest, sid):
        if 0 <= dest < self.nranks and dest != self.myrank:
            rng = self._flat_range(name, start, subs, dims, count, sid)
            self._chan(self.myrank, dest).append([arr[i] for i in rng])
        yield None

    def receive(self, arr, name, start, subs, dims, count, source, sid):
        if 0 <= source < self.nranks and source != self.myrank:
            rng = self._flat_range(name, start, subs, dims, count, sid)
            vals = yield from self._take(source, f"receive from rank {source}", sid)
            if len(vals) != count:
                raise RuntimeFault(f"received {len(vals)} element(s), expected {count}",
                                   self._where(), sid, self.handle.rank)
            for i, v in zip(rng, vals):
                arr[i] = v
        yield None

    def _take(self, src, what, sid):
        q = self._chan(src, self.myrank)
        if not q:
            yield Block(lambda: bool(q), f"{what} in {self._where()} stmt {sid}")
        return q.popleft()

    def _strided(self, name, subs, dims, count, dim, sid):
        """Flat positions of ``count`` elements along ``dim`` starting at ``subs``."""
        out = []
        subs = list(subs)
        strides, stride = [], 1
        for lo, hi in dims:
            strides.append(stride)
            stride *= hi - lo + 1
        for t in range(count):
            pos = 0
            for k, (s, (lo, hi)) in enumerate(zip(subs, dims), 1):
                v = s + t if k == dim else s
                if not lo <= v <= hi:
                    self.oob(name, k, v, lo, hi, sid)
                pos += (v - lo) * strides[k - 1]
            out.append(pos)
        return out

    def exchange(self, arr, name, recv_subs, send_subs, dims, count, direction, dim, sid):
        to, frm = ((self.myrank - 1, self.myrank + 1) if direction == "right"
                   else (self.myrank + 1, self.myrank - 1))
        if 0 <= to < self.nranks:
            idx = self._strided(name, send_subs, dims, count, dim, sid)
            self._chan(self.myrank, to).append([arr[i] for i in idx])
        if 0 <= frm < self.nranks:
            idx = self._strided(name, recv_subs, dims, count, dim, sid)
            vals = yield from self._take(frm, f"exchange {direction} from rank {frm}", sid)
            if len(vals) != count:
                raise RuntimeFault(f"exchange received {len(vals)} element(s), expected {count}",
                                   self._where(), sid, self.handle.rank)
            for i, v in zip(idx, vals):
                arr[i] = v

    # -- inspection ------------------------------------------------------------------

    def _capture(self, frame) -> dict:
        local_vars = frame.final or {}
        out = {}
        for sym in self.table.arrays(frame.routine):
            data = local_vars.get(f"v_{sym.name}")
            if data is not None:
                out[sym.name] = ArrayView(data, sym.dims).to_numpy()
        return out

    def lookup(self, routine, var):
        frame = next((f for f in reversed(self.frames) if f.routine == routine), None)
        if frame is None:
            raise UnknownVariable(f"{routine} is not active in pid {self.handle.pid}")
        sym = self.table.lookup(routine, var)
        if sym is None or sym.kind == "const":
            raise UnknownVariable(f"no variable {var!r} in {routine}")
        return frame, sym


class Runtime:
    """All processes of one debugging session, and the scheduler driving them."""

    def __init__(self, seed: int = 0):
        self.rng = random.Random(seed)
        self.procs: dict = {}
        self.channels: dict = {}
        self.links: dict = {}  # (serial pid, rank) -> deque of contribution messages
        self.events: deque = deque()
        self.stats = Counter()
        self._worlds = itertools.count(1)

    # -- creation ---------------------------------------------------------------------

    def _compile(self, program):
        table = typecheck(program)
        return table, compile_program(program, table)

    def launch(self, program, label: str = "serial", launcher=None) -> ProcessHandle:
        """Create the serial process, stopped before its first statement."""
        if program.parallel:
            raise SpawnFailure("launch expects a serial program; use spawn_parallel")
        table, funcs = self._compile(program)
        h = ProcessHandle(next(_pids), "serial", None, 1, label, STOPPED)
        self.procs[h.pid] = Process(self, program, table, funcs, h, next(self._worlds), launcher)
        return h

    def spawn_parallel(self, program, nranks: int, contact_path=None, label: str = "par",
                       launcher=None) -> list:
        if nranks < 1:
            raise SpawnFailure("nranks must be at least 1")
        try:
            table, funcs = self._compile(program)
        except TypeCheckError as exc:
            raise SpawnFailure(f"cannot load {label}: {exc}") from exc
        world = next(self._worlds)
        handles = []
        for r in range(nranks):
            h = ProcessHandle(next(_pids), "rank", r, nranks, label, RUNNING)
            self.procs[h.pid] = Process(self, program, table, funcs, h, world, launcher)
            handles.append(h)
            if contact_path is not None:
                try:
                    with open(contact_path, "a") as fh:
                        fh.write(f"{r} {h.pid} {label}\n")
                except OSError as exc:
                    raise SpawnFailure(f"cannot write contact file: {exc}") from exc
        return handles

    # -- scheduling -------------------------------------------------------------------

    def channel(self, world, src, dst):
        key = (world, src, dst)
        q = self.channels.get(key)
        if q is None:
            q = self.channels[key] = deque()
        return q

    def _event(self, ev):
        self.events.append(ev)

    def run(self, max_steps: Optional[int] = None) -> RunEvent:
        """Advance running processes until a breakpoint, quiescence or exit of all."""
        steps = 0
        while True:
            if self.events:
                ev = self.events.popleft()
                if ev.kind == "breakpoint":
                    self.stats["controller_roundtrips"] += 1
                return ev
            runnable = [p for p in self.procs.values() if p.handle.state == RUNNING
                        and (p.block is None or p.block.ready())]
            if not runnable:
                return self._quiescent()
            p = runnable[self.rng.randrange(len(runnable))] if len(runnable) > 1 else runnable[0]
            p.block = None
            self._step(p)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                return RunEvent("idle")

    def _step(self, p):
        try:
            req = next(p.gen)
        except StopIteration:
            p.handle.state = EXITED
            self._world_done(p.world)
            return
        except ZeroDivisionError as exc:
            self._fail(p, RuntimeFault("division by zero", p._where(), None, p.handle.rank), exc)
        except RuntimeFault as exc:
            self._fail(p, exc, None)
        except Exception as exc:
            self._fail(p, exc, None)
        if isinstance(req, Block):
            p.block = req

    def _fail(self, p, err, cause):
        p.handle.state = EXITED
        p.error = err
        if cause is not None:
            raise err from cause
        raise err

    def _world_done(self, world):
        members = [p for p in self.procs.values() if p.world == world]
        if any(p.handle.state != EXITED for p in members):
            return
        left = {k: len(q) for k, q in self.channels.items() if k[0] == world and q}
        if left:
            desc = ", ".join(f"{n} from rank {s} to rank {d}" for (_, s, d), n in sorted(left.items()))
            raise ResidualMessages(f"unreceived messages at exit: {desc}")

    def _quiescent(self) -> RunEvent:
        live = [p for p in self.procs.values() if p.handle.state != EXITED]
        if not live:
            return RunEvent("exited")
        blocked = [p for p in live if p.handle.state == RUNNING and p.block is not None]
        for p in blocked:
            if p.block.stale is not None:
                err = p.block.stale()
                if err is not None:
                    raise err
        if any(p.handle.state in (STOPPED, CREATED) for p in live):
            return RunEvent("idle")
        raise Deadlock({_who(p.handle): p.block.where for p in blocked})

    # -- process control ---------------------------------------------------------------

    def proc(self, pid) -> Process:
        p = self.procs.get(pid)
        if p is None or p.handle.state == EXITED:
            raise NoSuchPid(f"no live process {pid}")
        return p

    def handle(self, pid) -> ProcessHandle:
        p = self.procs.get(pid)
        if p is None:
            raise NoSuchPid(f"no process {pid}")
        return p.handle

    def _owner(self, pid, who):
        p = self.proc(pid)
        if who is not None and who not in (p.controller, p.launcher):
            raise NotAttached(f"pid {pid} is not attached by {who!r}")
        return p

    def attach(self, pid, who):
        p = self.proc(pid)
        if p.controller is not None:
            raise AlreadyAttached(f"pid {pid} already attached by {p.controller!r}")
        p.controller = who
        if p.handle.state == RUNNING:
            p.handle.state = STOPPED
            p.resume_on_detach = True
        else:
            p.resume_on_detach = False

    def detach(self, pid, who):
        p = self.proc(pid)
        if p.controller != who:
            raise NotAttached(f"pid {pid} is not attached by {who!r}")
        p.controller = None
        if getattr(p, "resume_on_detach", False) and p.handle.state == STOPPED:
            p.handle.state = RUNNING

    def stop(self, pid, who=None):
        p = self._owner(pid, who)
        if p.handle.state == RUNNING:
            p.handle.state = STOPPED

    def continue_(self, pid, who=None):
        p = self._owner(pid, who)
        if p.handle.state in (STOPPED, CREATED):
            p.handle.state = RUNNING

    def terminate(self, pid, who=None):
        p = self._owner(pid, who)
        p.handle.state = EXITED
        p.gen.close()

    def terminate_all(self):
        for p in self.procs.values():
            if p.handle.state != EXITED:
                p.handle.state = EXITED
                p.gen.close()

    def set_breakpoint(self, pid, routine, site="entry", who=None):
        p = self._owner(pid, who)
        if p.program.routine(routine) is None and routine not in RESIDENTS:
            from ..errors import UnknownRoutine
            raise UnknownRoutine(f"no routine {routine!r} in pid {pid}")
        p.breakpoints.add((routine, site))

    def clear_breakpoint(self, pid, routine, site="entry", who=None):
        self._owner(pid, who).breakpoints.discard((routine, site))

    def read_mem(self, pid, routine, var, who=None, dist=None):
        """Current value of ``var`` in the innermost active frame of ``routine``.

        Arrays come back as an :class:`ArrayView` of the whole local array, or, when
        ``dist`` covers the variable on a rank, as ``(bounds, section)`` of the owned block.
        """
        p = self._owner(pid, who)
        if p.handle.state != STOPPED and not p.in_probe:
            raise NotStopped(f"pid {pid} is {p.handle.state}")
        frame, sym = p.lookup(routine, var)
        value = _frame_value(p, frame, var)
        if sym.kind == "array":
            view = ArrayView(value, sym.dims)
            if dist is not None and p.handle.rank is not None and dist.covers(routine, var):
                lo, hi = dist.with_nranks(p.nranks).bounds(p.handle.rank)
                return (lo, hi), view.section(dist.dim, lo, hi)
            return view
        return value

    def write_mem(self, pid, routine, var, value, who=None):
        p = self._owner(pid, who)
        if p.handle.state != STOPPED and not p.in_probe:
            raise NotStopped(f"pid {pid} is {p.handle.state}")
        frame, sym = p.lookup(routine, var)
        if sym.kind == "array":
            data = _frame_value(p, frame, var)
            flat = np.asarray(value, dtype=np.float64).ravel(order="F").tolist()
            if len(flat) != len(data):
                raise UnknownVariable(f"{var} holds {len(data)} elements, got {len(flat)}")
            data[:] = flat
            return
        v = float(value) if sym.type == "real" else int(value)
        _set_local(p, frame, var, v)

    # -- probes -------------------------------------------------------------------------

    def insert_call(self, pid, routine, site, fn, argpos, meta=None, point=0, who=None):
        p = self._owner(pid, who)
        p.points.setdefault((routine, site), []).append(
            InsertedCall(fn, tuple(argpos), dict(meta or {}), point))

    def clear_probes(self, pid, who=None):
        self._owner(pid, who).points.clear()

    def link(self, serial_pid, rank):
        key = (serial_pid, rank)
        q = self.links.get(key)
        if q is None:
            q = self.links[key] = deque()
        return q

    def final_state(self, pid) -> dict:
        return dict(self.procs[pid].final_state)


def _who(h):
    return f"rank {h.rank} (pid {h.pid})" if h.kind == "rank" else f"serial (pid {h.pid})"


def _frame_value(p, frame, var):
    name = f"v_{var}"
    if frame.final is not None:
        src = frame.final
    elif frame.gen is not None and frame.gen.gi_frame is not None:
        src = frame.gen.gi_frame.f_locals
    else:
        params = p.program.routine(frame.routine).params
        src = {f"v_{n}": a for n, a in zip(params, frame.args)}
    if name not in src:
        raise UnknownVariable(f"{var} has no value yet in {frame.routine}")
    return src[name]


def _set_local(p, frame, var, value):
    name = f"v_{var}"
    if frame.final is not None:
        frame.final[name] = value
        return
    if frame.gen is None or frame.gen.gi_frame is None:
        raise NotStopped(f"{frame.routine} is not executing")
    f = frame.gen.gi_frame
    f.f_locals[name] = value
    ctypes.pythonapi.PyFrame_LocalsToFast(ctypes.py_object(f), ctypes.c_int(0))


# -- convenience entry points -------------------------------------------------------

_default = Runtime()


def run_serial(program, probes: Optional[dict] = None, runtime: Optional[Runtime] = None):
    """Run a serial program to completion; returns ``(handle, final arrays of main)``.

    ``probes`` maps ``(routine, site)`` to a list of ``(fn, argpos, meta)``.
    """
    rt = runtime or Runtime()
    h = rt.launch(program)
    for (routine, site), calls in (probes or {}).items():
        for fn, argpos, meta in calls:
            rt.insert_call(h.pid, routine, site, fn, argpos, meta)
    rt.continue_(h.pid)
    while True:
        ev = rt.run()
        if ev.kind == "exited" or rt.handle(h.pid).state == EXITED:
            break
        if ev.kind == "breakpoint":
            rt.continue_(ev.pid)
        elif ev.kind == "idle":
            break
    return h, rt.final_state(h.pid)


def spawn_parallel(program, nranks: int, contact_path=None, runtime: Optional[Runtime] = None,
                   label: str = "par") -> list:
    rt = runtime or _default
    if contact_path is not None:
        Path(contact_path).touch()
    return rt.spawn_parallel(program, nranks, contact_path, label)


def run_parallel(program, nranks: int, seed: int = 0, probes: Optional[dict] = None):
    """Run an SPMD program to completion; returns ``(handles, [final arrays per rank])``."""
    rt = Runtime(seed)
    hs = rt.spawn_parallel(program, nranks, None)
    for h in hs:
        for (routine, site), calls in (probes or {}).items():
            for fn, argpos, meta in calls:
                rt.insert_call(h.pid, routine, site, fn, argpos, meta)
    while True:
        ev = rt.run()
        if ev.kind == "exited":
            break
        if ev.kind == "breakpoint":
            rt.continue_(ev.pid)
        else:
            break
    return hs, [rt.final_state(h.pid) for h in hs]
