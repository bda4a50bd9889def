"""Pixel-level confusion counts and change-detection accuracy metrics."""

from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np

from .raster_io import ChangeMap


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(astuple(self)) < 0:
            raise EvaluationError(f"negative confusion count in {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricReport:
    far: float
    mar: float
    oa: float
    kappa: float

    HEADER = ("FAR", "MAR", "OA", "Kappa")

    def percent_row(self):
        return [f"{100 * v:.2f}" for v in (self.far, self.mar, self.oa, self.kappa)]

    def table(self) -> str:
        cells = self.percent_row()
        widths = [max(len(h), len(c)) for h, c in zip(self.HEADER, cells)]
        head = "  ".join(h.rjust(w) for h, w in zip(self.HEADER, widths))
        row = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        return f"{head}\n{row}"


def confusion(predicted: ChangeMap, reference: ChangeMap) -> Confusion:
    """Pixelwise counts with changed (1) as the positive class."""
    if predicted.shape != reference.shape:
        raise EvaluationError(f"size mismatch: predicted {predicted.shape}, reference {reference.shape}")
    p = predicted.labels.astype(bool)
    r = reference.labels.astype(bool)
    return Confusion(
        tp=int(np.count_nonzero(p & r)),
        fp=int(np.count_nonzero(p & ~r)),
        tn=int(np.count_nonzero(~p & ~r)),
        fn=int(np.count_nonzero(~p & r)),
    )


def metrics(c: Confusion) -> MetricReport:
    """FAR, MAR, OA and Cohen's kappa.

    Empty denominators give FAR = 0, MAR = 0; when the chance agreement is
    1 (both maps single-class and identical) kappa is 1.
    """
    total = c.total
    if total == 0:
        raise EvaluationError("empty confusion matrix")
    far = c.fp / (c.fp + c.tn) if c.fp + c.tn else 0.0
    mar = c.fn / (c.fn + c.tp) if c.fn + c.tp else 0.0
    oa = (c.tp + c.tn) / total
    pre = ((c.tp + c.fn) * (c.tp + c.fp) + (c.tn + c.fp) * (c.tn + c.fn)) / (total * total)
    kappa = 1.0 if pre == 1.0 else (oa - pre) / (1.0 - pre)
    return MetricReport(far, mar, oa, kappa)
