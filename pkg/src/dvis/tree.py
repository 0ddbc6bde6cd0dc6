"""Flatten and rebuild nested parameter containers.

Containers are dataclasses, lists, tuples and dicts; leaves are
:class:`~dvis.autodiff.Tensor`. Non-tensor fields (head counts, flags) are
static and carried through unchanged.
"""
from __future__ import annotations

import dataclasses
from typing import Any, Callable, Iterator

from .autodiff import Tensor


def named_leaves(obj: Any, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` in a deterministic order."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield from named_leaves(getattr(obj, f.name), _join(prefix, f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_leaves(item, _join(prefix, str(i)))
    elif isinstance(obj, dict):
        for key in sorted(obj):
            yield from named_leaves(obj[key], _join(prefix, str(key)))


def leaves(obj: Any) -> list[Tensor]:
    return [t for _, t in named_leaves(obj)]


def tree_map(fn: Callable[[Tensor], Tensor], obj: Any) -> Any:
    if isinstance(obj, Tensor):
        return fn(obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        changes = {f.name: tree_map(fn, getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        return dataclasses.replace(obj, **changes)
    if isinstance(obj, list):
        return [tree_map(fn, x) for x in obj]
    if isinstance(obj, tuple):
        return tuple(tree_map(fn, x) for x in obj)
    if isinstance(obj, dict):
        return {k: tree_map(fn, obj[k]) for k in sorted(obj)}
    return obj


def replace_leaves(obj: Any, new: list[Tensor]) -> Any:
    """Rebuild ``obj`` with ``new`` substituted for its leaves, in flatten order."""
    it = iter(new)
    out = tree_map(lambda _: next(it), obj)
    if next(it, None) is not None:
        raise ValueError("more replacement tensors than leaves")
    return out


def count_parameters(obj: Any) -> int:
    return sum(t.data.size for t in leaves(obj))


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name
