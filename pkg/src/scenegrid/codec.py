"""Bit-exact codec between metric geometry and quantized coordinate tokens.

Scene coordinates are mapped per axis onto the integer grid [0, 255] with
round-half-up, and surface as ASCII tokens with a single canonical form:

    <loc>cx, cy, cz, w, h, l</loc>    six integers: center then extents
    <gap>v</gap>                      one integer axis distance
    cx, cy, cz                        bare center triple (standalone clause)

The separator is exactly ", " and integers carry no leading zeros, so
emit -> parse and parse -> emit are both identities. ``parse_answer`` scans
free-form text for all three item kinds; it never raises anything but
:class:`ParseError`, which carries the byte offset of the offending input.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box3

__all__ = [
    "GRID_MAX",
    "ParseError",
    "QuantTransform",
    "QuantBox",
    "LocItem",
    "GapItem",
    "CenterItem",
    "AnswerPayload",
    "fit_transform",
    "emit_loc",
    "parse_loc",
    "emit_gap",
    "parse_gap",
    "emit_center",
    "parse_answer",
    "grid_box_to_box3",
]

GRID_MAX = 255

# canonical integer: no leading zeros, at most 3 digits (range-checked after)
_INT_RE = r"(?:0|[1-9]\d{0,2})"
_TRIPLE_RE = re.compile(rf"({_INT_RE}), ({_INT_RE}), ({_INT_RE})")
_MARKER_RE = re.compile(r"</?(?:loc|gap)>")
_CLAUSE_SPLIT_RE = re.compile(r"[.\n;:]")


class ParseError(ValueError):
    """Malformed token text; ``position`` is the character offset."""

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (at position {position})")


def _check_grid_value(v: int, what: str):
    if not 0 <= v <= GRID_MAX:
        raise ValueError(f"{what} must be in [0, {GRID_MAX}], got {v}")


@dataclass(frozen=True)
class QuantBox:
    """Axis-aligned box on the [0, 255] integer grid: center + extents."""

    center: tuple[int, int, int]
    extent: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(int(v) for v in self.center))
        object.__setattr__(self, "extent", tuple(int(v) for v in self.extent))
        for v in self.center:
            _check_grid_value(v, "center component")
        for v in self.extent:
            _check_grid_value(v, "extent component")

    def moved_to(self, center: tuple[int, int, int]) -> "QuantBox":
        return QuantBox(center=center, extent=self.extent)

    def as_list(self) -> list[int]:
        return [*self.center, *self.extent]


def grid_box_to_box3(box: QuantBox) -> Box3:
    """View a quantized box as a float box in grid units (for IoU etc.)."""
    return Box3(center=np.array(box.center, float), extent=np.array(box.extent, float))


@dataclass(frozen=True)
class QuantTransform:
    """Per-axis affine map between metric space and the [0, 255] grid."""

    mins: tuple[float, float, float]
    maxs: tuple[float, float, float]

    def __post_init__(self):
        mins = tuple(float(v) for v in self.mins)
        maxs = tuple(float(v) for v in self.maxs)
        object.__setattr__(self, "mins", mins)
        object.__setattr__(self, "maxs", maxs)
        for axis, (lo, hi) in enumerate(zip(mins, maxs)):
            if not (np.isfinite(lo) and np.isfinite(hi)):
                raise ValueError(f"bounds on axis {axis} must be finite")
            if hi <= lo:
                raise ValueError(f"degenerate bounds on axis {axis}: [{lo}, {hi}]")

    @property
    def spans(self) -> np.ndarray:
        return np.array(self.maxs) - np.array(self.mins)

    def quantize_point(self, xyz) -> tuple[int, int, int]:
        x = np.asarray(xyz, float)
        u = 255.0 * (x - np.array(self.mins)) / self.spans
        q = np.clip(np.floor(u + 0.5), 0, GRID_MAX).astype(int)  # round half up
        return tuple(int(v) for v in q)

    def quantize_extent(self, whl) -> tuple[int, int, int]:
        e = np.asarray(whl, float)
        u = 255.0 * e / self.spans
        q = np.clip(np.floor(u + 0.5), 0, GRID_MAX).astype(int)
        return tuple(int(v) for v in q)

    def quantize_box(self, box: Box3) -> QuantBox:
        return QuantBox(
            center=self.quantize_point(box.center),
            extent=self.quantize_extent(box.extent),
        )

    def dequantize_point(self, u) -> np.ndarray:
        q = np.asarray(u, float)
        return np.array(self.mins) + q / 255.0 * self.spans

    def dequantize_extent(self, u) -> np.ndarray:
        return np.asarray(u, float) / 255.0 * self.spans

    def dequantize_box(self, box: QuantBox) -> Box3:
        return Box3(
            center=self.dequantize_point(box.center),
            extent=self.dequantize_extent(box.extent),
        )


def fit_transform(scene) -> QuantTransform:
    """Fit the grid transform to a scene record's bounds.

    Uses the scene's explicit bounds when present, otherwise the padded
    union of its object boxes (see ``SceneRecord.inferred_bounds``).
    """
    lo, hi = scene.inferred_bounds()
    return QuantTransform(mins=tuple(lo), maxs=tuple(hi))


# --------------------------------------------------------------------------
# token surface forms


def emit_loc(box: QuantBox) -> str:
    c, e = box.center, box.extent
    return f"<loc>{c[0]}, {c[1]}, {c[2]}, {e[0]}, {e[1]}, {e[2]}</loc>"


def emit_gap(v: int) -> str:
    v = int(v)
    _check_grid_value(v, "gap value")
    return f"<gap>{v}</gap>"


def emit_center(center: tuple[int, int, int]) -> str:
    for v in center:
        _check_grid_value(int(v), "center component")
    return f"{int(center[0])}, {int(center[1])}, {int(center[2])}"


def _parse_int_fields(content: str, n: int, offset: int) -> list[int]:
    parts = content.split(", ")
    if len(parts) != n:
        raise ParseError(f"expected {n} integers separated by ', '", offset)
    values = []
    pos = offset
    for part in parts:
        if not re.fullmatch(_INT_RE, part):
            raise ParseError(f"malformed integer {part!r}", pos)
        v = int(part)
        if v > GRID_MAX:
            raise ParseError(f"value {v} out of range [0, {GRID_MAX}]", pos)
        values.append(v)
        pos += len(part) + 2
    return values


def parse_loc(text: str) -> QuantBox:
    """Parse one canonical ``<loc>...</loc>`` token (exact inverse of emit)."""
    if not text.startswith("<loc>"):
        raise ParseError("expected '<loc>'", 0)
    if not text.endswith("</loc>"):
        raise ParseError("unclosed '<loc>' token", len(text))
    content = text[len("<loc>") : -len("</loc>")]
    vals = _parse_int_fields(content, 6, len("<loc>"))
    return QuantBox(center=tuple(vals[:3]), extent=tuple(vals[3:]))


def parse_gap(text: str) -> int:
    """Parse one canonical ``<gap>...</gap>`` token (exact inverse of emit)."""
    if not text.startswith("<gap>"):
        raise ParseError("expected '<gap>'", 0)
    if not text.endswith("</gap>"):
        raise ParseError("unclosed '<gap>' token", len(text))
    content = text[len("<gap>") : -len("</gap>")]
    return _parse_int_fields(content, 1, len("<gap>"))[0]


@dataclass(frozen=True)
class LocItem:
    box: QuantBox
    position: int = 0


@dataclass(frozen=True)
class GapItem:
    value: int
    position: int = 0


@dataclass(frozen=True)
class CenterItem:
    center: tuple[int, int, int]
    position: int = 0


@dataclass
class AnswerPayload:
    """All coordinate items found in an answer text, in source order."""

    items: list = field(default_factory=list)
    residual: str = ""

    @property
    def boxes(self) -> list[QuantBox]:
        return [it.box for it in self.items if isinstance(it, LocItem)]

    @property
    def gaps(self) -> list[int]:
        return [it.value for it in self.items if isinstance(it, GapItem)]

    @property
    def centers(self) -> list[tuple[int, int, int]]:
        return [it.center for it in self.items if isinstance(it, CenterItem)]

    def __len__(self) -> int:
        return len(self.items)


def _scan_tokens(text: str):
    """Yield (kind, start, end, content_start, content) for each token pair.

    Raises ParseError on unpaired, mismatched, or overlapping markers.
    """
    markers = list(_MARKER_RE.finditer(text))
    i = 0
    while i < len(markers):
        m = markers[i]
        tag = m.group(0)
        if tag.startswith("</"):
            raise ParseError(f"unexpected closing token {tag!r}", m.start())
        kind = tag[1:-1]  # "loc" or "gap"
        if i + 1 >= len(markers):
            raise ParseError(f"unclosed token {tag!r}", m.start())
        closer = markers[i + 1]
        if closer.group(0) != f"</{kind}>":
            raise ParseError(
                f"token {tag!r} interrupted by {closer.group(0)!r}", closer.start()
            )
        yield kind, m.start(), closer.end(), m.end(), text[m.end() : closer.start()]
        i += 2


def parse_answer(text: str) -> AnswerPayload:
    """Extract loc boxes, gaps, and bare center triples from answer text.

    Text with no recognizable items yields an empty payload; malformed or
    overlapping tokens raise :class:`ParseError` with a position. A bare
    triple is only recognized when three integers form a whole clause
    (delimited by sentence punctuation), never inside running prose.
    """
    items = []
    spans = []
    for kind, start, end, content_start, content in _scan_tokens(text):
        if kind == "loc":
            vals = _parse_int_fields(content, 6, content_start)
            items.append(LocItem(QuantBox(tuple(vals[:3]), tuple(vals[3:])), start))
        else:
            vals = _parse_int_fields(content, 1, content_start)
            items.append(GapItem(vals[0], start))
        spans.append((start, end))

    # plain-text segments between tokens may hold bare center triples
    residual_parts = []
    seg_start = 0
    for start, end in spans + [(len(text), len(text))]:
        segment = text[seg_start:start]
        residual_parts.append(_extract_triples(segment, seg_start, items))
        seg_start = end

    items.sort(key=lambda it: it.position)
    return AnswerPayload(items=items, residual="".join(residual_parts))


def _extract_triples(segment: str, offset: int, items: list) -> str:
    """Collect standalone-clause triples from a segment; return the leftover."""
    kept = []
    pos = 0
    while pos <= len(segment):
        sep = _CLAUSE_SPLIT_RE.search(segment, pos)
        clause_end = sep.start() if sep else len(segment)
        clause = segment[pos:clause_end]
        stripped = clause.strip()
        m = _TRIPLE_RE.fullmatch(stripped)
        if m and all(int(g) <= GRID_MAX for g in m.groups()):
            triple = tuple(int(g) for g in m.groups())
            items.append(CenterItem(triple, offset + pos + clause.index(stripped)))
        else:
            kept.append(clause)
        if sep is None:
            break
        kept.append(sep.group(0))
        pos = sep.end()
    return "".join(kept)
