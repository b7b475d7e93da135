"""Client enrollment schedules across the task stream.

A schedule fixes, for every (client, task) cell, one of three states:

  not_enrolled_yet  the client has not joined the federation yet
  active            the client trains and uploads this task
  no_longer_active  the client left; its earlier uploads stay on the server

States only move forward: a client may join once and leave once, never
returning.  Enrollment is constant within a task.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .rng import RngStream

NOT_ENROLLED_YET = 0
ACTIVE = 1
NO_LONGER_ACTIVE = 2

SCHEDULE_KINDS = ("fully_enrolled", "decreasing", "increasing", "scattered")

_STATE_CHARS = {NOT_ENROLLED_YET: "○", ACTIVE: "•", NO_LONGER_ACTIVE: "×"}


@dataclass
class EnrollmentSchedule:
    """Immutable (n_clients, n_tasks) grid of enrollment states."""

    grid: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.int8)
        if self.grid.ndim != 2 or self.grid.size == 0:
            raise ContractViolation("schedule grid must be a nonempty 2-d array")
        validate_schedule(self)
        self.grid.setflags(write=False)

    @property
    def n_clients(self) -> int:
        return self.grid.shape[0]

    @property
    def n_tasks(self) -> int:
        return self.grid.shape[1]

    def state(self, client_id: int, task_id: int) -> int:
        return int(self.grid[client_id, task_id])

    def active_clients(self, task_id: int) -> list:
        return [int(c) for c in np.flatnonzero(self.grid[:, task_id] == ACTIVE)]

    def render(self) -> str:
        """One row per client: active •, not enrolled yet ○, dropped ×."""
        lines = []
        for c in range(self.n_clients):
            cells = "".join(_STATE_CHARS[int(s)] for s in self.grid[c])
            lines.append(f"client {c:3d}  {cells}")
        return "\n".join(lines)


def validate_schedule(schedule: EnrollmentSchedule) -> None:
    """Every row must read (not_enrolled_yet)* (active)+ (no_longer_active)*."""
    grid = schedule.grid
    for c in range(grid.shape[0]):
        row = grid[c]
        active = np.flatnonzero(row == ACTIVE)
        if active.size == 0:
            raise ContractViolation(f"client {c} is never active")
        lo, hi = active[0], active[-1]
        if hi - lo + 1 != active.size:
            raise ContractViolation(f"client {c} has a gap in its active window")
        if not np.all(row[:lo] == NOT_ENROLLED_YET):
            raise ContractViolation(f"client {c} has non-pending state before joining")
        if not np.all(row[hi + 1:] == NO_LONGER_ACTIVE):
            raise ContractViolation(f"client {c} returns after leaving")
    for t in range(grid.shape[1]):
        if not np.any(grid[:, t] == ACTIVE):
            raise ContractViolation(f"task {t} has zero active clients")


def make_schedule(kind: str, n_clients: int, n_tasks: int, rng: RngStream) -> EnrollmentSchedule:
    if kind not in SCHEDULE_KINDS:
        raise ContractViolation(f"unknown schedule kind {kind!r}")
    if n_clients < 1 or n_tasks < 1:
        raise ContractViolation("need at least one client and one task")
    if kind != "fully_enrolled" and n_clients < n_tasks:
        raise ContractViolation(f"{kind} schedules need n_clients >= n_tasks")

    grid = np.full((n_clients, n_tasks), NOT_ENROLLED_YET, dtype=np.int8)
    if kind == "fully_enrolled":
        grid[:] = ACTIVE
        return EnrollmentSchedule(grid)

    rate = -(-n_clients // n_tasks)  # ceil(N / T) joins or drops per boundary

    if kind == "decreasing":
        # all start active; `rate` active clients leave at each boundary,
        # always keeping at least one until the end
        grid[:, 0] = ACTIVE
        dropped: list = []
        for t in range(1, n_tasks):
            still = [c for c in range(n_clients) if c not in dropped]
            n_drop = min(rate, len(still) - 1)
            if n_drop > 0:
                pick = rng.child("drop", t).choice(len(still), n_drop, replace=False)
                dropped.extend(still[i] for i in pick)
            for c in range(n_clients):
                grid[c, t] = NO_LONGER_ACTIVE if c in dropped else ACTIVE
        return EnrollmentSchedule(grid)

    if kind == "increasing":
        # mirror image: start small, `rate` clients join at each boundary
        start = max(1, n_clients - rate * (n_tasks - 1))
        order = rng.child("join").permutation(n_clients)
        joined = list(order[:start])
        cursor = start
        for t in range(n_tasks):
            if t > 0:
                take = min(rate, n_clients - cursor)
                joined.extend(order[cursor:cursor + take])
                cursor += take
            for c in joined:
                grid[c, t] = ACTIVE
        # anyone never used would violate the one-active rule; absorb them
        # into the final task (only possible when rate under-counts)
        for c in order[cursor:]:
            grid[c, n_tasks - 1] = ACTIVE
        return EnrollmentSchedule(grid)

    # scattered: each client is active for exactly one task; a permutation
    # guarantees every task gets one before extras are spread at random
    order = rng.child("scatter").permutation(n_clients)
    assignment = np.empty(n_clients, dtype=np.int64)
    for slot, c in enumerate(order):
        if slot < n_tasks:
            assignment[c] = slot
        else:
            assignment[c] = int(rng.child("scatter_extra", int(c)).integers(0, n_tasks))
    for c in range(n_clients):
        t = assignment[c]
        grid[c, t] = ACTIVE
        grid[c, t + 1:] = NO_LONGER_ACTIVE
    return EnrollmentSchedule(grid)


def apply_schedule(clients: list, schedule: EnrollmentSchedule, task_id: int) -> list:
    """Filter `clients` down to those active for `task_id`.

    Items may be raw ids or objects carrying a client_id attribute.  Clients
    in other states contribute nothing new this task, though records they
    uploaded earlier remain wherever they were stored.
    """
    if not (0 <= task_id < schedule.n_tasks):
        raise ContractViolation(f"task {task_id} outside schedule with {schedule.n_tasks} tasks")
    out = []
    for item in clients:
        cid = getattr(item, "client_id", item)
        if schedule.state(int(cid), task_id) == ACTIVE:
            out.append(item)
    return out
