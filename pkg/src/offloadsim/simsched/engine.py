"""Discrete-event core: resources execute their tasks strictly in program order.

Each resource behaves like a CUDA stream or a dedicated worker thread. A task
starts at the earliest instant when it is at the head of its resource's queue,
the resource is idle, and every dependency has finished. Timestamps are plain
floats with no quantization.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

from offloadsim.simsched.trace import Event, Label, Resource


@dataclass
class Task:
    tid: int
    resource: Resource
    label: Label
    iteration: int
    bucket: Optional[int]
    duration: float
    deps: tuple[int, ...]


class Engine:
    def __init__(self) -> None:
        self.tasks: list[Task] = []

    def add(self, resource: Resource, label: Label, iteration: int, bucket: Optional[int],
            duration: float, deps: Sequence[Optional[int]] = ()) -> int:
        if duration < 0:
            raise ValueError(f"negative duration for {label.value}")
        tid = len(self.tasks)
        clean = tuple(sorted({d for d in deps if d is not None}))
        if any(d >= tid for d in clean):
            raise ValueError("dependencies must refer to earlier tasks")
        self.tasks.append(Task(tid, resource, label, iteration, bucket, float(duration), clean))
        return tid

    def run(self) -> list[Event]:
        tasks = self.tasks
        waiting = [len(t.deps) for t in tasks]
        children: list[list[int]] = [[] for _ in tasks]
        for t in tasks:
            for d in t.deps:
                children[d].append(t.tid)
        queues: dict[Resource, deque[int]] = {}
        for t in tasks:
            queues.setdefault(t.resource, deque()).append(t.tid)
        busy = {r: False for r in queues}
        start = [0.0] * len(tasks)
        end = [0.0] * len(tasks)
        heap: list[tuple[float, int]] = []
        now = 0.0

        def dispatch(res: Resource) -> None:
            q = queues[res]
            if not busy[res] and q and waiting[q[0]] == 0:
                tid = q.popleft()
                busy[res] = True
                start[tid] = now
                heapq.heappush(heap, (now + tasks[tid].duration, tid))

        for res in queues:
            dispatch(res)
        done = 0
        while heap:
            now, tid = heapq.heappop(heap)
            end[tid] = now
            done += 1
            busy[tasks[tid].resource] = False
            for c in children[tid]:
                waiting[c] -= 1
            for res in queues:
                dispatch(res)
        if done != len(tasks):
            stuck = [t for t in tasks if waiting[t.tid] or queues[t.resource] and
                     t.tid in queues[t.resource]]
            raise RuntimeError(f"schedule deadlocked with {len(stuck)} tasks pending")
        return [Event(t.tid, t.resource, t.label, t.iteration, t.bucket, start[t.tid],
                      end[t.tid], t.deps) for t in tasks]
