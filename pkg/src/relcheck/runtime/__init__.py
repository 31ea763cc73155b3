"""Serial and SPMD execution with a process-control surface."""

from .machine import (ArrayView, ProcessHandle, Runtime, RunEvent, run_parallel, run_serial,
                      spawn_parallel)

__all__ = ["ArrayView", "ProcessHandle", "Runtime", "RunEvent", "run_parallel", "run_serial",
           "spawn_parallel"]
