"""Registry of routines linked into every executable.

A resident is a generator function ``fn(ctx, *args)``. Called from program
source, ``ctx`` is the process; called as an inserted probe, it is a
:class:`~relcheck.runtime.machine.ProbeContext`.
"""

RESIDENTS: dict = {}
RESIDENT_NAMES: set = set()


def resident(name):
    def deco(fn):
        RESIDENTS[name] = fn
        RESIDENT_NAMES.add(name)
        return fn
    return deco


@resident("__diff_detected")
def diff_detected(ctx, *report):
    """Marker only: the orchestrator's breakpoint on it is what stops the process."""
    if False:
        yield
