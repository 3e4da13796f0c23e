"""Canonical ``key=value`` text for dataclass configs.

One field per line in declaration order. Sequences are comma-separated,
pairs inside a sequence use ``:`` (``1:2,3:4``), booleans are ``true`` /
``false`` and a missing optional value is ``none``. Lines starting with ``#``
and blank lines are ignored.
"""
import dataclasses
import types
import typing


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(":".join(str(v) for v in item) if isinstance(item, (tuple, list)) else _format(item)
                        for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _is_union(tp):
    return typing.get_origin(tp) in (typing.Union, types.UnionType)


def _strip_optional(tp):
    if _is_union(tp):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        optional = len(args) < len(typing.get_args(tp))
        if len(args) == 1:
            return args[0], optional
        return typing.Union[tuple(args)], optional
    return tp, False


def _scalar(tp, text, key):
    try:
        if tp is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {tp.__name__}") from None
    raise ConfigError(f"{key}: unsupported field type {tp!r}")


def _parse(tp, text, key):
    tp, optional = _strip_optional(tp)
    if text.lower() == "none":
        if optional:
            return None
        raise ConfigError(f"{key}: value required")
    if _is_union(tp):
        # int | tuple[int, ...]: a comma means the sequence form
        args = typing.get_args(tp)
        seq = [a for a in args if typing.get_origin(a) is tuple]
        if "," in text and seq:
            return _parse(seq[0], text, key)
        scalar = [a for a in args if a in (int, float, str, bool)]
        return _parse(scalar[0], text, key)
    if typing.get_origin(tp) is tuple:
        args = typing.get_args(tp)
        items = [s.strip() for s in text.split(",")] if text.strip() else []
        if len(args) == 2 and args[1] is Ellipsis:
            inner = args[0]
            if typing.get_origin(inner) is tuple:
                pair_t = typing.get_args(inner)
                out = []
                for item in items:
                    parts = item.split(":")
                    if len(parts) != len(pair_t):
                        raise ConfigError(f"{key}: expected {len(pair_t)} ':'-separated values in {item!r}")
                    out.append(tuple(_scalar(t, p, key) for t, p in zip(pair_t, parts)))
                return tuple(out)
            return tuple(_scalar(inner, s, key) for s in items)
        if len(items) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_scalar(t, s, key) for t, s in zip(args, items))
    return _scalar(tp, text, key)


def dump(cfg):
    """Canonical text for a dataclass instance."""
    return "".join(f"{f.name}={_format(getattr(cfg, f.name))}\n" for f in dataclasses.fields(cfg))


def parse_pairs(text):
    """Parse ``key=value`` lines into an ordered dict of raw strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build(cls, pairs, strict=True):
    """Instantiate dataclass ``cls`` from raw string pairs.

    With ``strict`` unknown keys are an error; otherwise they are ignored.
    """
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(pairs) - names
    if strict and unknown:
        raise ConfigError(f"unknown config keys for {cls.__name__}: {', '.join(sorted(unknown))}")
    kwargs = {k: _parse(hints[k], v, k) for k, v in pairs.items() if k in names}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load(cls, text, strict=True):
    return build(cls, parse_pairs(text), strict=strict)
