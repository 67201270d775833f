"""Exponential moving average of flattened model parameters.

``new = alpha * current + (1 - alpha) * student``; alpha weights the history.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import EmaError

DEFAULT_ALPHA = 0.999


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    layout_tag: str

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise EmaError("parameter vector contains non-finite entries")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    def __len__(self):
        return len(self.values)

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout_tag == other.layout_tag and np.array_equal(self.values, other.values)

    def to_json(self) -> str:
        return json.dumps({"layout_tag": self.layout_tag, "values": self.values.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "ParamVector":
        d = json.loads(text)
        return cls(np.asarray(d["values"], dtype=np.float64), d["layout_tag"])


@dataclass(frozen=True)
class EmaState:
    alpha: float
    current: ParamVector
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise EmaError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.step < 0:
            raise EmaError("step must be non-negative")


def ema_update(state: EmaState, student: ParamVector) -> EmaState:
    cur = state.current
    if student.layout_tag != cur.layout_tag:
        raise EmaError(f"layout mismatch: {cur.layout_tag!r} vs {student.layout_tag!r}")
    if len(student) != len(cur):
        raise EmaError(f"length mismatch: {len(cur)} vs {len(student)}")
    a = state.alpha
    new = a * cur.values + (1.0 - a) * student.values
    # pin exact endpoints; a*x + 0*y can still differ from x by rounding
    if a == 1.0:
        new = cur.values
    elif a == 0.0:
        new = student.values
    return EmaState(a, ParamVector(new, cur.layout_tag), state.step + 1)
