"""Bjontegaard delta-rate between rate-distortion curves.

Classic cubic-polynomial form: fit log10(rate) as a polynomial in quality
on each curve, integrate the difference analytically over the overlapping
quality interval, convert the mean log offset to a signed percent.
Negative results mean the test curve needs less rate at equal quality.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import EvaluationError


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    quality: float
    metric_id: str = "psnr"
    codec_id: str = "toy-inr"
    alpha: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if not self.bpp > 0:
            raise EvaluationError(f"bpp must be positive, got {self.bpp}")
        if not np.isfinite(self.quality):
            raise EvaluationError(f"quality must be finite, got {self.quality}")

    def to_json(self) -> dict:
        return {
            "bpp": self.bpp,
            "quality": self.quality,
            "metric_id": self.metric_id,
            "codec_id": self.codec_id,
            "alpha": self.alpha,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(obj: dict) -> "RDPoint":
        return RDPoint(**obj)


@dataclass
class RDCurve:
    points: list[RDPoint]
    label: str = ""

    def __post_init__(self):
        if len(self.points) < 3:
            raise EvaluationError(f"curve needs >= 3 points, got {len(self.points)}")
        bpps = [p.bpp for p in self.points]
        if any(b2 <= b1 for b1, b2 in zip(bpps, bpps[1:])):
            raise EvaluationError(f"bpp must be strictly increasing, got {bpps}")
        metric_ids = {p.metric_id for p in self.points}
        codec_ids = {p.codec_id for p in self.points}
        if len(metric_ids) > 1 or len(codec_ids) > 1:
            raise EvaluationError(
                f"curve mixes metrics {metric_ids} or codecs {codec_ids}"
            )

    @property
    def metric_id(self) -> str:
        return self.points[0].metric_id

    @property
    def bpps(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p.quality for p in self.points])

    def to_json(self) -> dict:
        return {"label": self.label, "points": [p.to_json() for p in self.points]}

    @staticmethod
    def from_json(obj: dict) -> "RDCurve":
        return RDCurve(points=[RDPoint.from_json(p) for p in obj["points"]], label=obj["label"])


@dataclass(frozen=True)
class BDResult:
    bd_rate_percent: float
    overlap: tuple[float, float]
    metric_id: str

    def __post_init__(self):
        if not self.overlap[1] > self.overlap[0]:
            raise EvaluationError(f"empty quality overlap {self.overlap}")


def _fit_log_rate(curve: RDCurve) -> np.ndarray:
    q = curve.qualities
    if any(q2 <= q1 for q1, q2 in zip(q, q[1:])):
        raise EvaluationError(
            f"quality not strictly increasing along curve {curve.label!r}: {list(q)}"
        )
    degree = min(3, len(q) - 1)
    return np.polyfit(q, np.log10(curve.bpps), degree)


def bd_rate(anchor: RDCurve, test: RDCurve) -> BDResult:
    """Average percent rate change of ``test`` relative to ``anchor`` at
    equal quality over the curves' overlapping quality range."""
    if anchor.metric_id != test.metric_id:
        raise EvaluationError(
            f"metric mismatch: {anchor.metric_id} vs {test.metric_id}"
        )
    poly_anchor = _fit_log_rate(anchor)
    poly_test = _fit_log_rate(test)

    lo = max(anchor.qualities.min(), test.qualities.min())
    hi = min(anchor.qualities.max(), test.qualities.max())
    if not hi > lo:
        raise EvaluationError(f"empty quality overlap [{lo}, {hi}]")

    int_anchor = np.polyint(poly_anchor)
    int_test = np.polyint(poly_test)
    mean_diff = (
        (np.polyval(int_test, hi) - np.polyval(int_test, lo))
        - (np.polyval(int_anchor, hi) - np.polyval(int_anchor, lo))
    ) / (hi - lo)
    return BDResult(
        bd_rate_percent=float((10.0**mean_diff - 1.0) * 100.0),
        overlap=(float(lo), float(hi)),
        metric_id=anchor.metric_id,
    )
