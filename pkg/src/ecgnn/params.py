"""Parameter containers and initialisers."""
from __future__ import annotations

import dataclasses
import math

import numpy as np

from .numkit import Param


def glorot(rng: np.random.Generator, name: str, shape: tuple[int, ...]) -> Param:
    fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Param(name, rng.uniform(-limit, limit, size=shape))


def zeros(name: str, shape: tuple[int, ...]) -> Param:
    return Param(name, np.zeros(shape))


def ones(name: str, shape: tuple[int, ...]) -> Param:
    return Param(name, np.ones(shape))


class ParamGroup:
    """Mixin for dataclasses whose fields are Params or nested groups."""

    def params(self) -> list[Param]:
        out: list[Param] = []
        for f in dataclasses.fields(self):
            collect_params(getattr(self, f.name), out)
        return out


def collect_params(value, out: list[Param]) -> None:
    """Append every Param reachable from ``value`` to ``out`` in field order."""
    if isinstance(value, Param):
        out.append(value)
    elif isinstance(value, ParamGroup):
        out.extend(value.params())
    elif isinstance(value, dict):
        for k in value:
            collect_params(value[k], out)
    elif isinstance(value, (list, tuple)):
        for v in value:
            collect_params(v, out)
