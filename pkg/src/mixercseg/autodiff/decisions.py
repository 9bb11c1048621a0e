"""Record and replay of discrete forward-pass choices.

Piecewise operations (ReLU masks, max-pool argmax, channel ranking, the
orientation histogram) make a discrete choice from their input. Finite
difference checks perturb inputs and may flip such a choice, which measures
a jump instead of a derivative. Recording the choices once and replaying them
during the perturbed evaluations differentiates the smooth piece that is
active at the reference point, which is exactly what the analytic gradient
describes.
"""

from __future__ import annotations

import contextlib
from typing import Any, Callable, Iterator, List, Optional

_active: List["DecisionTape"] = []


class DecisionTape:
    def __init__(self) -> None:
        self.items: List[Any] = []
        self.mode = "record"
        self._pos = 0

    def __len__(self) -> int:
        return len(self.items)

    @contextlib.contextmanager
    def replay(self) -> Iterator["DecisionTape"]:
        self.mode = "replay"
        self._pos = 0
        _active.append(self)
        try:
            yield self
        finally:
            _active.pop()
            if self._pos != len(self.items):
                raise RuntimeError(
                    f"replay consumed {self._pos} of {len(self.items)} recorded decisions"
                )

    def _next(self, compute: Callable[[], Any]) -> Any:
        if self.mode == "record":
            value = compute()
            self.items.append(value)
            return value
        if self._pos >= len(self.items):
            raise RuntimeError("replay requested more decisions than were recorded")
        value = self.items[self._pos]
        self._pos += 1
        return value


@contextlib.contextmanager
def record_decisions() -> Iterator[DecisionTape]:
    tape = DecisionTape()
    _active.append(tape)
    try:
        yield tape
    finally:
        _active.pop()


def decide(compute: Callable[[], Any]) -> Any:
    """Evaluate ``compute`` unless a tape in replay mode supplies the value."""
    tape: Optional[DecisionTape] = _active[-1] if _active else None
    if tape is None:
        return compute()
    return tape._next(compute)
