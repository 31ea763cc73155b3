"""Comparison tests between a serial array and its distributed counterpart.

All three tests look at owned elements only; halo copies are never compared.
Tolerances are absolute unless ``relative=True``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import BoundsMismatch, MissingRank, OverlapDetected


class Mode(str, Enum):
    GLOBAL = "global"
    PARTIAL = "partial"
    ELEMENT = "element"

    @classmethod
    def parse(cls, text) -> "Mode":
        if isinstance(text, Mode):
            return text
        aliases = {"global": cls.GLOBAL, "globalchecksum": cls.GLOBAL,
                   "partial": cls.PARTIAL, "partialchecksum": cls.PARTIAL,
                   "element": cls.ELEMENT, "elementwise": cls.ELEMENT}
        key = str(text).lower().replace("-", "").replace("_", "")
        if key not in aliases:
            raise ValueError(f"unknown comparison mode {text!r}")
        return aliases[key]


@dataclass(frozen=True)
class Comparison:
    mode: Mode
    tolerance: float = 0.0
    relative: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        if not self.tolerance >= 0:
            raise ValueError("tolerance must be non-negative")


@dataclass(frozen=True)
class Contribution:
    """One rank's share at one checkpoint: a checksum or the owned block."""

    rank: int
    bounds: tuple  # owned (lower, upper) along the distributed dimension
    value: object  # float for checksum modes, ndarray for element mode


@dataclass(frozen=True)
class ElementDiff:
    index: tuple  # global (declared) subscripts
    serial: float
    parallel: float
    rank: int


@dataclass
class Verdict:
    passed: bool
    mode: Mode
    delta: Optional[float] = None  # checksum difference (serial - parallel)
    failing_rank: Optional[int] = None
    rank_passed: list = field(default_factory=list)
    diffs: list = field(default_factory=list)


def checksum(values) -> float:
    """Correctly rounded sum of the slice, taken in column-major index order.

    Exact rounding makes the result independent of how the elements are
    grouped, so the sum of per-block checksums stays within an ulp or two of
    the whole-array checksum however the blocks fall.
    """
    a = np.asarray(values, dtype=np.float64)
    return math.fsum(a.ravel(order="F").tolist())


def _exceeds(serial, parallel, tol, relative):
    diff = np.abs(np.asarray(serial, dtype=np.float64) - np.asarray(parallel, dtype=np.float64))
    bound = tol * np.abs(serial) if relative else tol
    return ~(diff <= bound)  # NaN differences count as failures


def compare_global(serial_ck: float, partials: Sequence[float], tol: float,
                   relative: bool = False) -> Verdict:
    total = 0.0
    for p in partials:
        total += p
    fail = bool(_exceeds(serial_ck, total, tol, relative))
    return Verdict(not fail, Mode.GLOBAL, delta=serial_ck - total)


def _lower(serial: np.ndarray, dist, lower):
    if lower is not None:
        return tuple(lower)
    base = [0] * serial.ndim
    base[dist.dim - 1] = dist.lo
    return tuple(base)


def _by_rank(contributions, dist) -> list:
    seen = {}
    for c in contributions:
        if c.rank in seen:
            raise OverlapDetected(f"rank {c.rank} contributed twice")
        if not 0 <= c.rank < dist.nranks:
            raise BoundsMismatch(f"contribution from rank {c.rank} outside 0..{dist.nranks - 1}")
        seen[c.rank] = c
    missing = [r for r in range(dist.nranks) if r not in seen]
    if missing:
        raise MissingRank(f"no contribution from rank(s) {', '.join(map(str, missing))}")
    out = []
    for r in range(dist.nranks):
        c = seen[r]
        if tuple(c.bounds) != dist.bounds(r):
            raise BoundsMismatch(f"rank {r} sent bounds {tuple(c.bounds)}, expected "
                                 f"{dist.bounds(r)}")
        out.append(c)
    return out


def _section(serial, dist, lower, lo, hi):
    idx = [slice(None)] * serial.ndim
    b = lower[dist.dim - 1]
    idx[dist.dim - 1] = slice(lo - b, hi - b + 1)
    return serial[tuple(idx)]


def compare_partial(serial: np.ndarray, contributions, dist, tol: float, lower=None,
                    relative: bool = False) -> Verdict:
    """Per-rank checksums against the matching sections of the serial array."""
    serial = np.asarray(serial, dtype=np.float64)
    lower = _lower(serial, dist, lower)
    ranks = _by_rank(contributions, dist)
    results, first, first_delta = [], None, None
    for c in ranks:
        lo, hi = c.bounds
        ck = checksum(_section(serial, dist, lower, lo, hi))
        ok = not bool(_exceeds(ck, float(c.value), tol, relative))
        results.append(ok)
        if not ok and first is None:
            first, first_delta = c.rank, ck - float(c.value)
    return Verdict(first is None, Mode.PARTIAL, delta=first_delta, failing_rank=first,
                   rank_passed=results)


def reassemble(contributions, dist, shape=None) -> np.ndarray:
    """Global array from per-rank owned blocks."""
    ranks = _by_rank(contributions, dist)
    blocks = [np.asarray(c.value, dtype=np.float64) for c in ranks]
    ax = dist.dim - 1
    for c, b in zip(ranks, blocks):
        lo, hi = c.bounds
        if b.ndim <= ax or b.shape[ax] != hi - lo + 1:
            raise BoundsMismatch(f"rank {c.rank} block has shape {b.shape}, bounds {lo}..{hi}")
    out = np.concatenate(blocks, axis=ax)
    if shape is not None and out.shape != tuple(shape):
        raise BoundsMismatch(f"reassembled shape {out.shape} differs from {tuple(shape)}")
    return out


def scatter(array, dist) -> list:
    """Split ``array`` into owned blocks (inverse of :func:`reassemble`)."""
    a = np.asarray(array, dtype=np.float64)
    lower = _lower(a, dist, None)
    return [Contribution(r, (lo, hi), _section(a, dist, lower, lo, hi).copy())
            for r, (lo, hi) in enumerate(dist.blocks())]


def compare_element(serial: np.ndarray, contributions, dist, tol: float, lower=None,
                    relative: bool = False) -> Verdict:
    """Element-by-element test; lists every failing global index in index order."""
    serial = np.asarray(serial, dtype=np.float64)
    lower = _lower(serial, dist, lower)
    par = reassemble(contributions, dist)
    if par.shape != serial.shape:
        raise BoundsMismatch(f"distributed array has shape {par.shape}, serial {serial.shape}")
    bad = _exceeds(serial, par, tol, relative)
    diffs = []
    for pos in sorted(map(tuple, np.argwhere(bad))):
        g = tuple(int(p) + b for p, b in zip(pos, lower))
        diffs.append(ElementDiff(g, float(serial[pos]), float(par[pos]),
                                 dist.owner(g[dist.dim - 1])))
    return Verdict(not diffs, Mode.ELEMENT, failing_rank=diffs[0].rank if diffs else None,
                   diffs=diffs)


# -- reports ------------------------------------------------------------------


@dataclass
class DivergenceReport:
    routine: str
    site: str
    invocation: int
    array: str
    mode: str
    tolerance: float
    delta: Optional[float] = None
    failing_rank: Optional[int] = None
    diffs: list = field(default_factory=list)  # [ElementDiff]
    source: Optional[str] = None
    line: Optional[int] = None

    def __post_init__(self):
        self.diffs = [d if isinstance(d, ElementDiff) else
                      ElementDiff(tuple(d["index"]), d["serial"], d["parallel"], d["rank"])
                      for d in self.diffs]

    def validate(self):
        if self.site not in ("entry", "exit") or self.invocation < 1:
            raise ValueError("malformed checkpoint in report")
        Mode.parse(self.mode)
        if self.mode == Mode.ELEMENT.value:
            if not self.diffs:
                raise ValueError("element-wise report without differences")
            for d in self.diffs:
                if not abs(d.serial - d.parallel) > self.tolerance and d.serial == d.serial:
                    raise ValueError(f"listed index {d.index} is within tolerance")
        elif self.delta is None:
            raise ValueError("checksum report without a delta")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["diffs"] = [{"index": list(x.index), "serial": x.serial, "parallel": x.parallel,
                       "rank": x.rank} for x in self.diffs]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DivergenceReport":
        return cls(**json.loads(text)).validate()

    def message(self, limit: int = 20) -> str:
        head = (f"Value of array {self.array} differs at {self.site} of {self.routine} "
                f"(invocation {self.invocation}); mode {self.mode}, tolerance {self.tolerance:g}")
        lines = [head]
        if self.source:
            lines.append(f"  parallel source: {self.source}" +
                         (f":{self.line}" if self.line else ""))
        if self.mode == Mode.ELEMENT.value:
            lines.append(f"  {len(self.diffs)} element(s) differ:")
            for d in self.diffs[:limit]:
                idx = ",".join(map(str, d.index))
                lines.append(f"    {self.array}({idx})  serial {d.serial!r}  parallel "
                             f"{d.parallel!r}  rank {d.rank}")
            if len(self.diffs) > limit:
                lines.append(f"    ... {len(self.diffs) - limit} more")
        else:
            lines.append(f"  checksum delta {self.delta!r}")
            if self.failing_rank is not None:
                lines.append(f"  first failing rank: {self.failing_rank}")
        return "\n".join(lines)


def verdict_report(v: Verdict, routine, site, invocation, array, tol) -> DivergenceReport:
    return DivergenceReport(routine, site, invocation, array, v.mode.value, tol, v.delta,
                            v.failing_rank, list(v.diffs))
