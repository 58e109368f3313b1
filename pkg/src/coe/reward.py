"""Composite evidence reward: grounding F1, process IoU and answer match."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .protocol import (
    CoEResponse,
    FrameSet,
    ProtocolError,
    extract_draft_timestamps,
    intervals_to_frames,
    parse_response,
    points_to_frames,
)


@dataclass(frozen=True)
class RewardWeights:
    w_g: float = 0.3
    w_p: float = 0.3
    w_a: float = 0.4

    def __post_init__(self):
        if min(self.w_g, self.w_p, self.w_a) < 0 or self.w_g + self.w_p + self.w_a <= 0:
            raise ValueError("reward weights must be nonnegative with a positive sum")

    @property
    def max_total(self) -> float:
        return self.w_g + self.w_p + self.w_a


@dataclass(frozen=True)
class RewardBreakdown:
    f1_grounding: float
    iou_process: float
    answer_correct: int
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


ZERO_REWARD = RewardBreakdown(0.0, 0.0, 0, 0.0)


@dataclass(frozen=True)
class GroundTruth:
    key_frames: FrameSet
    answer: str


def f1_frames(pred: FrameSet, gt: FrameSet) -> float:
    denom = len(pred) + len(gt)
    if denom == 0:
        return 0.0
    return 2 * len(pred.indices & gt.indices) / denom


def temporal_iou(cited: FrameSet, anchored: FrameSet) -> float:
    union = len(cited.indices | anchored.indices)
    if union == 0:
        return 0.0
    return len(cited.indices & anchored.indices) / union


def answer_indicator(pred_answer: str, gt_answer: str) -> int:
    return int(pred_answer.strip().casefold() == gt_answer.strip().casefold())


def combine(f1: float, iou: float, answer: int, w: RewardWeights) -> RewardBreakdown:
    return RewardBreakdown(f1, iou, answer, w.w_g * f1 + w.w_p * iou + w.w_a * answer)


def composite_reward(
    resp: CoEResponse, gt: GroundTruth, w: RewardWeights | None = None, fps: float | None = None
) -> RewardBreakdown:
    w = w or RewardWeights()
    fps = gt.key_frames.fps if fps is None else fps
    n = gt.key_frames.n_frames
    anchored = intervals_to_frames(resp.anchors, fps, n)
    cited = points_to_frames(extract_draft_timestamps(resp.draft), fps, n)
    return combine(
        f1_frames(anchored, gt.key_frames),
        temporal_iou(cited, anchored),
        answer_indicator(resp.answer, gt.answer),
        w,
    )


def score_text(text: str, gt: GroundTruth, w: RewardWeights | None = None) -> tuple[RewardBreakdown, bool]:
    """Parse and score raw output; protocol violations earn the zero reward.

    Returns the breakdown and whether the text parsed.
    """
    try:
        resp = parse_response(text)
    except ProtocolError:
        return ZERO_REWARD, False
    return composite_reward(resp, gt, w), True
