"""Parser and serializer for the evidence-anchoring output format.

Grammar (EBNF, whitespace ``ws`` allowed wherever shown)::

    response   = ws anchors ws draft ws answer ws ;
    anchors    = "<Temporal Anchors>" ws [ range { ws ";" ws range } ] ws "</Temporal Anchors>" ;
    range      = time ws "-" ws time ;
    time       = digit digit ":" ( "0" | ... | "5" ) digit ;
    draft      = "<Reasoning Draft>" text "</Reasoning Draft>" ;
    answer     = "<Answer>" text "</Answer>" ;
    text       = { any character except the six section tags } ;

Anything other than whitespace outside the three sections is rejected.
Intervals are half-open ``[start, end)`` in seconds and frame ``i`` covers
``[i / fps, (i + 1) / fps)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

SECTIONS = ("Temporal Anchors", "Reasoning Draft", "Answer")
_TAG = re.compile(r"<(/?)(Temporal Anchors|Reasoning Draft|Answer)>")
_TIME = re.compile(r"(\d{2}):([0-5]\d)", re.ASCII)
_RANGE = re.compile(r"\s*(\S+?)\s*-\s*(\S+)\s*")
_DRAFT_TIME = re.compile(
    r"(?<![\d:])(?P<start>\d{2}:[0-5]\d)(?![\d:])(?:\s*-\s*(?P<end>\d{2}:[0-5]\d)(?![\d:]))?",
    re.ASCII,
)


class ProtocolError(ValueError):
    """Base class for every parse failure."""


class MissingSection(ProtocolError):
    def __init__(self, name: str):
        super().__init__(f"missing section <{name}>")
        self.name = name


class MalformedTimestamp(ProtocolError):
    def __init__(self, raw: str):
        super().__init__(f"malformed time range {raw!r}")
        self.raw = raw


class SectionOrderViolation(ProtocolError):
    pass


class SerializationError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class TimeInterval:
    start_s: float
    end_s: float

    def __post_init__(self):
        if not (math.isfinite(self.start_s) and math.isfinite(self.end_s)):
            raise ValueError("interval bounds must be finite")
        if not 0 <= self.start_s < self.end_s:
            raise ValueError(f"need 0 <= start < end, got ({self.start_s}, {self.end_s})")


def canonical_intervals(intervals) -> tuple[TimeInterval, ...]:
    """Sort by start and merge overlapping (not merely touching) intervals."""
    out: list[list[float]] = []
    for iv in sorted(intervals):
        if out and iv.start_s < out[-1][1]:
            out[-1][1] = max(out[-1][1], iv.end_s)
        else:
            out.append([iv.start_s, iv.end_s])
    return tuple(TimeInterval(s, e) for s, e in out)


def _clean_text(text: str) -> str:
    return " ".join(text.split())


@dataclass(frozen=True)
class CoEResponse:
    anchors: tuple[TimeInterval, ...] = ()
    draft: str = ""
    answer: str = ""
    truncated: bool = field(default=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "anchors", canonical_intervals(self.anchors))
        object.__setattr__(self, "draft", _clean_text(self.draft))
        object.__setattr__(self, "answer", _clean_text(self.answer))
        for text in (self.draft, self.answer):
            if _TAG.search(text):
                raise ValueError(f"section text may not contain protocol tags: {text!r}")


def format_time(seconds: float) -> str:
    if seconds != int(seconds) or seconds < 0:
        raise SerializationError(f"{seconds} is not a whole nonnegative number of seconds")
    s = int(seconds)
    if s >= 3600:
        raise SerializationError(f"{s} s does not fit MM:SS")
    return f"{s // 60:02d}:{s % 60:02d}"


def parse_time(raw: str) -> int:
    m = _TIME.fullmatch(raw)
    if m is None:
        raise MalformedTimestamp(raw)
    return int(m.group(1)) * 60 + int(m.group(2))


def _parse_anchors(body: str) -> list[TimeInterval]:
    if not body.strip():
        return []
    out = []
    for chunk in body.split(";"):
        m = _RANGE.fullmatch(chunk)
        if m is None:
            raise MalformedTimestamp(chunk.strip())
        try:
            start, end = parse_time(m.group(1)), parse_time(m.group(2))
        except MalformedTimestamp:
            raise MalformedTimestamp(chunk.strip()) from None
        if start >= end:
            raise MalformedTimestamp(chunk.strip())
        out.append(TimeInterval(float(start), float(end)))
    return out


def parse_response(text: str) -> CoEResponse:
    tags = [(m.group(2), m.group(1) == "/", m.start(), m.end()) for m in _TAG.finditer(text)]
    names = {name for name, *_ in tags}
    for name in SECTIONS:
        if name not in names:
            raise MissingSection(name)
    expected = [(name, closing) for name in SECTIONS for closing in (False, True)]
    if [(n, c) for n, c, *_ in tags] != expected:
        raise SectionOrderViolation("sections must appear once each, in order: " + ", ".join(SECTIONS))
    bodies = []
    pos = 0
    for i in range(0, 6, 2):
        _, _, open_start, open_end = tags[i]
        _, _, close_start, close_end = tags[i + 1]
        if text[pos:open_start].strip():
            raise SectionOrderViolation(f"unexpected text before <{SECTIONS[i // 2]}>")
        bodies.append(text[open_end:close_start])
        pos = close_end
    if text[pos:].strip():
        raise SectionOrderViolation("unexpected text after </Answer>")
    return CoEResponse(anchors=tuple(_parse_anchors(bodies[0])), draft=bodies[1], answer=bodies[2])


def serialize_response(r: CoEResponse) -> str:
    anchors = "; ".join(f"{format_time(iv.start_s)}-{format_time(iv.end_s)}" for iv in r.anchors)
    parts = [
        f"<Temporal Anchors> {anchors} </Temporal Anchors>" if anchors else "<Temporal Anchors> </Temporal Anchors>",
        f"<Reasoning Draft> {r.draft} </Reasoning Draft>" if r.draft else "<Reasoning Draft> </Reasoning Draft>",
        f"<Answer> {r.answer} </Answer>" if r.answer else "<Answer> </Answer>",
    ]
    return " ".join(parts)


def extract_draft_timestamps(draft: str) -> list[float]:
    """Point timestamps cited in free text, in order; ``MM:SS-MM:SS`` ranges are skipped."""
    out = []
    for m in _DRAFT_TIME.finditer(draft):
        if m.group("end") is None:
            out.append(float(parse_time(m.group("start"))))
    return out


@dataclass(frozen=True)
class FrameSet:
    indices: frozenset
    n_frames: int
    fps: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "indices", frozenset(int(i) for i in self.indices))
        if any(not 0 <= i < self.n_frames for i in self.indices):
            raise ValueError(f"frame indices must lie in [0, {self.n_frames})")

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return iter(sorted(self.indices))

    def sorted(self) -> list[int]:
        return sorted(self.indices)

    def to_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_frames)
        mask[list(self.indices)] = 1.0
        return mask


def _hits(i: int, start: float, end: float, fps: float) -> bool:
    return i / fps < end and (i + 1) / fps > start


def intervals_to_frames(intervals, fps: float, n_frames: int) -> FrameSet:
    """Frames whose span ``[i/fps, (i+1)/fps)`` meets any interval, clipped to the video."""
    if not fps > 0:
        raise ValueError("fps must be positive")
    out = set()
    for iv in intervals:
        lo = max(0, math.floor(iv.start_s * fps) - 1)
        hi = min(n_frames, math.ceil(iv.end_s * fps) + 1)
        out.update(i for i in range(lo, hi) if _hits(i, iv.start_s, iv.end_s, fps))
    return FrameSet(frozenset(out), n_frames, fps)


def point_to_frame(t: float, fps: float, n_frames: int) -> int | None:
    """Frame whose span contains instant ``t``, or None when ``t`` is outside the video."""
    i = math.floor(t * fps)
    # t * fps may round across an integer boundary
    while i / fps > t:
        i -= 1
    while (i + 1) / fps <= t:
        i += 1
    if 0 <= i < n_frames:
        return i
    return None


def points_to_frames(points, fps: float, n_frames: int) -> FrameSet:
    frames = (point_to_frame(t, fps, n_frames) for t in points)
    return FrameSet(frozenset(i for i in frames if i is not None), n_frames, fps)


def frames_to_intervals(frames, fps: float = 1.0) -> tuple[TimeInterval, ...]:
    """Runs of consecutive frames as time ranges (inverse of ``intervals_to_frames`` for fps=1)."""
    idx = sorted(set(frames))
    runs: list[list[int]] = []
    for i in idx:
        if runs and i == runs[-1][1] + 1:
            runs[-1][1] = i
        else:
            runs.append([i, i])
    return tuple(TimeInterval(a / fps, (b + 1) / fps) for a, b in runs)
