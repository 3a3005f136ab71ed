"""Parser for the layer shorthand used to declare networks.

Grammar (whitespace-insensitive, case-sensitive)::

    arch   := layer ('-' layer)*
    layer  := 'C' args3 | 'P' args2 | 'F' args1 | 'ReLU' | 'SPP' args1 | 'Stack' args1
    argsN  := '(' int (',' int){N-1} ')'

``Stack(n)`` is shorthand for ``C(n,3,1)-ReLU-C(n,3,1)-ReLU-C(n,3,1)-ReLU``
and is removed by :func:`expand_stacks`.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union


class ArchError(ValueError):
    """Base class for architecture string errors."""


class ArchSyntaxError(ArchError):
    def __init__(self, message: str, position: int):
        super().__init__(f"token {position}: {message}")
        self.position = position


class ArityError(ArchSyntaxError):
    pass


class ShapeUnderflowError(ArchError):
    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class Conv:
    n: int
    k: int
    s: int

    def render(self) -> str:
        return f"C({self.n},{self.k},{self.s})"


@dataclass(frozen=True)
class Pool:
    k: int
    s: int

    def render(self) -> str:
        return f"P({self.k},{self.s})"


@dataclass(frozen=True)
class FC:
    n: int

    def render(self) -> str:
        return f"F({self.n})"


@dataclass(frozen=True)
class ReLU:
    def render(self) -> str:
        return "ReLU"


@dataclass(frozen=True)
class SPP:
    g: int

    def render(self) -> str:
        return f"SPP({self.g})"


@dataclass(frozen=True)
class Stack:
    n: int

    def render(self) -> str:
        return f"Stack({self.n})"


LayerDescriptor = Union[Conv, Pool, FC, ReLU, SPP, Stack]

# name -> (constructor, arity)
_GRAMMAR = {
    "C": (Conv, 3),
    "P": (Pool, 2),
    "F": (FC, 1),
    "ReLU": (ReLU, 0),
    "SPP": (SPP, 1),
    "Stack": (Stack, 1),
}

_TOKEN = re.compile(r"^(?P<name>[A-Za-z]+)(?:\((?P<args>[^()]*)\))?$")


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple
    source: str = ""

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def __eq__(self, other):
        # structural: the source text is not part of identity
        if not isinstance(other, ArchSpec):
            return NotImplemented
        return self.layers == other.layers

    def __hash__(self):
        return hash(self.layers)

    def render(self) -> str:
        return render_arch(self)

    @property
    def expanded(self) -> bool:
        return not any(isinstance(d, Stack) for d in self.layers)


def _split_top_level(text: str) -> list[str]:
    """Split on '-' outside parentheses."""
    parts, depth, current = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "-" and depth == 0:
            parts.append("".join(current))
            current = []
        else:
            current.append(ch)
    parts.append("".join(current))
    return parts


def _parse_int(raw: str, position: int) -> int:
    if not re.fullmatch(r"[+-]?\d+", raw):
        raise ArchSyntaxError(f"expected an integer, got {raw!r}", position)
    value = int(raw, 10)
    if value < 1:
        raise ArchSyntaxError(f"expected a positive integer, got {value}", position)
    return value


def parse_arch(text: str) -> ArchSpec:
    """Parse a shorthand architecture string into an :class:`ArchSpec`.

    Token positions in error messages are 1-based.
    """
    compact = re.sub(r"\s+", "", text)
    if not compact:
        raise ArchSyntaxError("empty architecture string", 1)
    layers = []
    for position, token in enumerate(_split_top_level(compact), start=1):
        if not token:
            raise ArchSyntaxError("empty token", position)
        m = _TOKEN.match(token)
        if m is None:
            raise ArchSyntaxError(f"malformed token {token!r}", position)
        name, args = m.group("name"), m.group("args")
        if name not in _GRAMMAR:
            raise ArchSyntaxError(f"unknown layer {name!r}", position)
        ctor, arity = _GRAMMAR[name]
        values = [] if args is None or args == "" else args.split(",")
        if arity == 0 and args is not None:
            raise ArityError(f"{name} takes no arguments", position)
        if len(values) != arity:
            raise ArityError(f"{name} expects {arity} argument(s), got {len(values)}", position)
        layers.append(ctor(*(_parse_int(v, position) for v in values)))
    return ArchSpec(tuple(layers), text)


def render_arch(spec: ArchSpec) -> str:
    return "-".join(d.render() for d in spec.layers)


def stack_expansion(n: int) -> tuple:
    return (Conv(n, 3, 1), ReLU(), Conv(n, 3, 1), ReLU(), Conv(n, 3, 1), ReLU())


def expand_stacks(spec: ArchSpec) -> ArchSpec:
    layers = []
    for d in spec.layers:
        if isinstance(d, Stack):
            layers.extend(stack_expansion(d.n))
        else:
            layers.append(d)
    return ArchSpec(tuple(layers), spec.source)


def infer_shapes(spec: ArchSpec, input_shape) -> list[tuple]:
    """Static output shape of every descriptor.

    ``input_shape`` is ``(c, H, W)``. Spatial shapes are ``(c, h, w)``, flat
    ones ``(n,)``; the flatten before the first ``F`` is implicit.
    """
    if not spec.expanded:
        raise ArchError("infer_shapes needs an expanded spec (call expand_stacks first)")
    shape = tuple(int(v) for v in input_shape)
    out = []
    for i, d in enumerate(spec.layers):
        where = f"descriptor {i + 1} ({d.render()})"
        if isinstance(d, (Conv, Pool)):
            if len(shape) != 3:
                raise ArchError(f"{where} needs a spatial input, got shape {shape}")
            c, h, w = shape
            h2 = (h - d.k) // d.s + 1 if h >= d.k else 0
            w2 = (w - d.k) // d.s + 1 if w >= d.k else 0
            if h2 < 1 or w2 < 1:
                raise ShapeUnderflowError(
                    f"shape underflow at {where}: input {h}x{w} is smaller than window {d.k}", i)
            shape = (d.n if isinstance(d, Conv) else c, h2, w2)
        elif isinstance(d, SPP):
            if len(shape) != 3:
                raise ArchError(f"{where} needs a spatial input, got shape {shape}")
            c, h, w = shape
            if h < d.g or w < d.g:
                raise ShapeUnderflowError(
                    f"shape underflow at {where}: input {h}x{w} is smaller than grid {d.g}", i)
            shape = (c * d.g * d.g,)
        elif isinstance(d, FC):
            shape = (d.n,)
        elif isinstance(d, ReLU):
            pass
        else:
            raise ArchError(f"unexpected descriptor {d!r}")
        out.append(shape)
    return out


def net_stride(spec: ArchSpec) -> int:
    """Product of conv and pool strides."""
    s = 1
    for d in spec.layers:
        if isinstance(d, (Conv, Pool)):
            s *= d.s
    return s
