"""Multiply-accumulate accounting for instrumented forward passes.

``conv2d`` and ``matmul`` report their MAC counts here. Counts are attributed
to the innermost active :func:`scope` (e.g. ``"attention"``) and summed into
every active :class:`MacCounter`.
"""

from __future__ import annotations

import contextlib
import threading
from collections import defaultdict

_local = threading.local()


def _stack(name: str) -> list:
    if not hasattr(_local, name):
        setattr(_local, name, [])
    return getattr(_local, name)


class MacCounter:
    """Per-run accumulator keyed by scope path."""

    def __init__(self):
        self.by_scope: dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()

    def add(self, scope: str, n: int) -> None:
        with self._lock:
            self.by_scope[scope] += n

    @property
    def total(self) -> int:
        return sum(self.by_scope.values())

    def matching(self, fragment: str) -> int:
        """Sum of counts whose scope path contains ``fragment``."""
        return sum(v for k, v in self.by_scope.items() if fragment in k.split("/"))

    def __enter__(self) -> "MacCounter":
        _stack("counters").append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack("counters").remove(self)


@contextlib.contextmanager
def scope(name: str):
    stack = _stack("scopes")
    stack.append(name)
    try:
        yield
    finally:
        stack.pop()


def current_scope() -> str:
    return "/".join(_stack("scopes"))


def record(n: int) -> None:
    counters = _stack("counters")
    if not counters:
        return
    path = current_scope()
    for c in counters:
        c.add(path, int(n))
