"""Minimal Newick reader/writer.

Supports multifurcations, named internal nodes and branch lengths.
Quoted labels and bracket comments are not supported; labels may not
contain the reserved characters ``(),:;`` or whitespace.
"""
from __future__ import annotations

from dataclasses import dataclass, field


class NewickError(ValueError):
    pass


@dataclass
class Clade:
    name: str = ""
    length: float | None = None
    children: list["Clade"] = field(default_factory=list)

    def is_leaf(self) -> bool:
        return not self.children


_RESERVED = set("(),:;[]'\"")


def _scan_label(text: str, i: int) -> tuple[str, int]:
    j = i
    while j < len(text) and text[j] not in _RESERVED and not text[j].isspace():
        j += 1
    return text[i:j], j


def _skip_ws(text: str, i: int) -> int:
    while i < len(text) and text[i].isspace():
        i += 1
    return i


def _parse_clade(text: str, i: int) -> tuple[Clade, int]:
    i = _skip_ws(text, i)
    if i >= len(text):
        raise NewickError("unexpected end of input")
    clade = Clade()
    if text[i] == "(":
        i += 1
        while True:
            child, i = _parse_clade(text, i)
            clade.children.append(child)
            i = _skip_ws(text, i)
            if i >= len(text):
                raise NewickError("unbalanced parentheses")
            if text[i] == ",":
                i += 1
                continue
            if text[i] == ")":
                i += 1
                break
            raise NewickError(f"unexpected character {text[i]!r} at {i}")
        i = _skip_ws(text, i)
    if i < len(text) and text[i] in "'\"[":
        raise NewickError("quoted labels and comments are not supported")
    name, i = _scan_label(text, i)
    clade.name = name
    i = _skip_ws(text, i)
    if i < len(text) and text[i] == ":":
        raw, i = _scan_label(text, _skip_ws(text, i + 1))
        try:
            clade.length = float(raw)
        except ValueError as exc:
            raise NewickError(f"bad branch length {raw!r}") from exc
    return clade, i


def parse_newick(text: str) -> Clade:
    """Parse one Newick string (trailing ';' optional) into a Clade tree."""
    clade, i = _parse_clade(text, 0)
    i = _skip_ws(text, i)
    if i < len(text):
        if text[i] != ";":
            raise NewickError(f"unexpected character {text[i]!r} at {i}")
        i = _skip_ws(text, i + 1)
    if i < len(text):
        raise NewickError("trailing characters after ';'")
    return clade


def write_newick(clade: Clade, with_semicolon: bool = True) -> str:
    def fmt(c: Clade) -> str:
        inner = ""
        if c.children:
            inner = "(" + ",".join(fmt(ch) for ch in c.children) + ")"
        out = inner + c.name
        if c.length is not None:
            out += f":{c.length:.10g}"
        return out

    return fmt(clade) + (";" if with_semicolon else "")
