"""Segmentation metrics (DSC, ASD) and per-domain evaluation reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

CSV_COLUMNS = ("method", "unseen_domain", "domain", "dsc", "asd", "seed")


class EmptyMaskError(ValueError):
    """ASD is undefined when either mask has no boundary."""


def binarize(mask, threshold: float = 0.5) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    if arr.dtype.kind in "iu":
        return arr > 0
    return arr >= threshold


def dsc(pred_mask, true_mask) -> float:
    """Dice similarity coefficient in percent; two empty masks score 100."""
    p, g = binarize(pred_mask), binarize(true_mask)
    if p.shape != g.shape:
        raise ValueError(f"dsc: shapes {p.shape} and {g.shape} differ")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * int(np.logical_and(p, g).sum()) / total


def boundary(mask) -> np.ndarray:
    """Coordinates (row, col) of foreground pixels with a 4-neighbour outside
    the foreground; pixels on the image border always count."""
    m = binarize(mask)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return np.argwhere(m & ~interior)


def asd(pred_mask, true_mask) -> float:
    """Average surface distance in pixels: the mean of the two directed average
    nearest-boundary Euclidean distances, computed over all boundary pairs."""
    p, g = binarize(pred_mask), binarize(true_mask)
    if p.shape != g.shape:
        raise ValueError(f"asd: shapes {p.shape} and {g.shape} differ")
    bp, bg = boundary(p), boundary(g)
    if len(bp) == 0 or len(bg) == 0:
        raise EmptyMaskError("asd: empty mask")
    diff = bp[:, None, :].astype(float) - bg[None, :, :].astype(float)
    d = np.sqrt((diff ** 2).sum(axis=-1))
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


@dataclass
class DomainRow:
    domain: int
    dsc: float
    asd: float
    n_samples: int = 0
    asd_excluded: int = 0


@dataclass
class EvalReport:
    method: str
    unseen_domain: Optional[int]
    seed: int
    rows: List[DomainRow] = field(default_factory=list)
    extra: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        for r in self.rows:
            if not 0.0 <= r.dsc <= 100.0:
                raise ValueError(f"DSC {r.dsc} outside [0, 100]")
            if not (math.isnan(r.asd) or r.asd >= 0.0):
                raise ValueError(f"ASD {r.asd} negative")

    @property
    def average(self) -> Tuple[float, float]:
        dscs = [r.dsc for r in self.rows]
        asds = [r.asd for r in self.rows if not math.isnan(r.asd)]
        return (float(np.mean(dscs)) if dscs else float("nan"),
                float(np.mean(asds)) if asds else float("nan"))

    def csv_records(self, average: bool = True) -> List[dict]:
        base = {"method": self.method, "unseen_domain": "" if self.unseen_domain is None else self.unseen_domain,
                "seed": self.seed, **self.extra}
        recs = [dict(base, domain=r.domain, dsc=_fmt(r.dsc), asd=_fmt(r.asd)) for r in self.rows]
        if not average:
            return recs
        avg_dsc, avg_asd = self.average
        recs.append(dict(base, domain="average", dsc=_fmt(avg_dsc), asd=_fmt(avg_asd)))
        return recs


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def write_csv(reports: Iterable[EvalReport], fh=None, extra_columns: Sequence[str] = (),
              average: bool = True) -> str:
    """Serialize reports as CSV; returns the text and writes it to ``fh`` if given.
    With ``average`` each report ends with a ``domain=average`` row."""
    buf = io.StringIO()
    cols = list(CSV_COLUMNS[:1]) + list(extra_columns) + list(CSV_COLUMNS[1:])
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for rep in reports:
        for rec in rep.csv_records(average):
            writer.writerow(rec)
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text


def score_sample(prob: np.ndarray, truth: np.ndarray) -> Tuple[float, Optional[float]]:
    """DSC and ASD for one sample with S structures (both S x H x W); the
    scores are averaged over structures. ASD is None when undefined."""
    dscs, asds = [], []
    for s in range(truth.shape[0]):
        dscs.append(dsc(prob[s], truth[s]))
        try:
            asds.append(asd(prob[s], truth[s]))
        except EmptyMaskError:
            asds.append(None)
    asd_val = None if any(a is None for a in asds) else float(np.mean(asds))
    return float(np.mean(dscs)), asd_val


def evaluate(predict: Callable[[np.ndarray], np.ndarray],
             test_sets: Mapping[int, Tuple[np.ndarray, np.ndarray]],
             method: str = "", unseen_domain: Optional[int] = None, seed: int = 0) -> EvalReport:
    """Score ``predict`` (images N x 1 x H x W -> probabilities N x S x H x W)
    on each domain's test set; one row per domain in key order."""
    rows = []
    for domain, (images, masks) in test_sets.items():
        if len(images) == 0:
            raise ValueError(f"empty test set for domain {domain}")
        probs = np.asarray(predict(images))
        if probs.shape != masks.shape:
            raise ValueError(f"prediction shape {probs.shape} != mask shape {masks.shape}")
        d_scores, a_scores, excluded = [], [], 0
        for prob, truth in zip(probs, masks):
            d, a = score_sample(prob, truth)
            d_scores.append(d)
            if a is None:
                excluded += 1
            else:
                a_scores.append(a)
        rows.append(DomainRow(int(domain), float(np.mean(d_scores)),
                              float(np.mean(a_scores)) if a_scores else float("nan"),
                              len(d_scores), excluded))
    return EvalReport(method, unseen_domain, seed, rows)
