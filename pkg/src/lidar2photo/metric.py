"""Car-presence score: mean over pairs of detected/ground-truth car counts.

Detection on synthetic imagery is deterministic: a ground-truth car counts as
found when, inside its box, the predicted image holds a connected region of
roughly that car's paint color that fills enough of the box.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .projection import RasterImage
from .scene import SceneMeta, box_iou


class UndefinedScoreError(ValueError):
    """No pair has a ground-truth car, so the mean ratio is undefined."""


@dataclass(frozen=True)
class PairCounts:
    n_p: int
    n_g: int

    def __post_init__(self):
        if self.n_p < 0 or self.n_g < 0:
            raise ValueError("car counts must be non-negative")


@dataclass(frozen=True)
class PairResult:
    pair_id: str
    n_p: int
    n_g: int
    ratio: float | None  # None when n_g == 0 (excluded from the mean)
    black_g: int = 0
    black_p: int = 0


@dataclass(frozen=True)
class EvalReport:
    m: int
    score: float
    pairs: tuple[PairResult, ...] = field(default=())

    @property
    def black_total(self) -> int:
        return sum(p.black_g for p in self.pairs)

    @property
    def black_detected(self) -> int:
        return sum(p.black_p for p in self.pairs)

    def summary(self) -> str:
        line = f"m={self.m} score={self.score:.6f}"
        if self.black_total:
            line += f" black_detected={self.black_detected}/{self.black_total}"
        return line


@dataclass(frozen=True)
class DetectorConfig:
    color_tolerance: float = 0.25
    min_area: int = 6
    iou_threshold: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.color_tolerance <= 1.0:
            raise ValueError("color_tolerance must be in [0, 1]")
        if self.min_area < 1:
            raise ValueError("min_area must be >= 1")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must be in (0, 1]")


def pair_ratio(n_p: int, n_g: int) -> float:
    return min(n_p / n_g, 1.0)


def score(pairs: Sequence[PairCounts], ids: Sequence[str] | None = None) -> EvalReport:
    """Mean of per-pair ``min(n_p / n_g, 1)`` over pairs with ``n_g > 0``."""
    ids = list(ids) if ids is not None else [str(i) for i in range(len(pairs))]
    rows = [PairResult(pid, pc.n_p, pc.n_g, pair_ratio(pc.n_p, pc.n_g) if pc.n_g > 0 else None)
            for pid, pc in zip(ids, pairs)]
    return _report(rows)


def _report(rows: Sequence[PairResult]) -> EvalReport:
    ratios = [r.ratio for r in rows if r.ratio is not None]
    if not ratios:
        raise UndefinedScoreError("every pair has n_g = 0; the score is undefined")
    # fsum is exact, so the result does not depend on pair order
    return EvalReport(len(ratios), math.fsum(ratios) / len(ratios), tuple(rows))


def match_boxes(predicted: RasterImage, meta: SceneMeta, det: DetectorConfig = DetectorConfig()) -> list[bool]:
    """Per ground-truth box: is the car visible in ``predicted``?"""
    if predicted.channels != 3:
        raise ValueError("detection needs an RGB image")
    if (predicted.width, predicted.height) != (meta.width, meta.height):
        raise ValueError(f"predicted image is {predicted.width}x{predicted.height}, "
                         f"ground truth was rendered at {meta.width}x{meta.height}")
    img = predicted.data.astype(np.float64)
    found = []
    for box in meta.boxes:
        u0, v0, u1, v1 = box.bbox
        color = np.asarray(box.color, dtype=np.float64)[:, None, None]
        mask = np.all(np.abs(img[:, v0:v1, u0:u1] - color) <= det.color_tolerance + 1e-9, axis=0)
        labels, n = ndimage.label(mask)
        hit = False
        for k, sl in enumerate(ndimage.find_objects(labels), start=1):
            area = int(np.count_nonzero(labels[sl] == k))
            if area < det.min_area:
                continue
            region = (u0 + sl[1].start, v0 + sl[0].start, u0 + sl[1].stop, v0 + sl[0].stop)
            if box_iou(region, box.bbox) >= det.iou_threshold:
                hit = True
                break
        found.append(hit)
    return found


def detect_cars(predicted: RasterImage, meta: SceneMeta, det: DetectorConfig = DetectorConfig()) -> int:
    """Number of ground-truth cars found in ``predicted`` (0 <= n_p <= n_g)."""
    return sum(match_boxes(predicted, meta, det))


def evaluate_predictions(samples: Iterable[tuple[str, RasterImage, SceneMeta]],
                         det: DetectorConfig = DetectorConfig()) -> EvalReport:
    rows = []
    for pid, pred, meta in samples:
        found = match_boxes(pred, meta, det)
        n_p, n_g = sum(found), meta.n_g
        black_g = sum(b.is_black for b in meta.boxes)
        black_p = sum(f for f, b in zip(found, meta.boxes) if b.is_black)
        rows.append(PairResult(pid, n_p, n_g, pair_ratio(n_p, n_g) if n_g else None, black_g, black_p))
    return _report(rows)


def evaluate_run(checkpoint, samples, det: DetectorConfig = DetectorConfig(),
                 ground_truth: bool = False) -> EvalReport:
    """Predict each test input, detect cars, and score.

    ``samples`` yields ``(pair_id, input_raster, target_image, meta)``.  With
    ``ground_truth=True`` the targets stand in for predictions (upper bound).
    """
    from .pix2pix import predict_many

    samples = list(samples)
    if not samples:
        raise ValueError("no test pairs to evaluate")
    if ground_truth:
        preds = [s[2] for s in samples]
    else:
        preds = predict_many(checkpoint, [s[1] for s in samples])
    return evaluate_predictions(((s[0], p, s[3]) for s, p in zip(samples, preds)), det)


def write_report_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair_id", "n_p", "n_g", "ratio"])
        for r in report.pairs:
            w.writerow([r.pair_id, r.n_p, r.n_g, "" if r.ratio is None else repr(r.ratio)])
        fh.write(f"# {report.summary()}\n")
