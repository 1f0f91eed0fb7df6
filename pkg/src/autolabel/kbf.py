"""Kernel-density box fusion.

Each box attribute is fused on its own: a weighted kernel density estimate is
evaluated at every sample of that attribute and the densest sample wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box3D, wrap_angle

GAUSSIAN = "gaussian"
EPANECHNIKOV = "epanechnikov"
KERNELS = (GAUSSIAN, EPANECHNIKOV)

# relative density gap below which two samples count as tied
TIE_RTOL = 1e-9


def _default_bandwidth() -> dict[str, float]:
    return {"center": 0.5, "dims": 0.25, "heading": 0.1, "score": 0.1}


@dataclass
class KbfConfig:
    kernel: str = GAUSSIAN
    bandwidth: dict[str, float] = field(default_factory=_default_bandwidth)
    min_cluster_size: int = 1
    default_weight: float = 1.0
    score_fusion: str = "kde"  # or "max" for ablations

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        bw = _default_bandwidth()
        bw.update(self.bandwidth or {})
        if any(v <= 0 for v in bw.values()):
            raise ValueError(f"bandwidths must be positive, got {bw}")
        self.bandwidth = bw
        if self.min_cluster_size < 1:
            raise ValueError("min_cluster_size must be >= 1")
        if self.default_weight <= 0:
            raise ValueError("default_weight must be positive")
        if self.score_fusion not in ("kde", "max"):
            raise ValueError(f"unknown score_fusion {self.score_fusion!r}")


class Rejected:
    """Returned by :func:`fuse_cluster` for clusters below ``min_cluster_size``."""

    def __init__(self, size: int, reason: str = "cluster too small"):
        self.size = size
        self.reason = reason

    def __repr__(self):
        return f"Rejected(size={self.size}, reason={self.reason!r})"

    def __bool__(self):
        return False


def kernel_values(u: np.ndarray, kernel: str) -> np.ndarray:
    if kernel == GAUSSIAN:
        return np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)
    if kernel == EPANECHNIKOV:
        return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    raise ValueError(f"unknown kernel {kernel!r}")


def kde_density(x, samples, weights, bandwidth: float, kernel: str = GAUSSIAN) -> np.ndarray:
    """Weighted density (1/h) * sum_i w_i K((x - x_i) / h) evaluated at ``x``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    s = np.asarray(samples, dtype=float)
    w = np.asarray(weights, dtype=float)
    k = kernel_values((x[:, None] - s[None, :]) / bandwidth, kernel)
    return (k * w[None, :]).sum(axis=1) / bandwidth


def kde_mode(samples: Sequence[float], weights: Sequence[float], bandwidth: float, kernel: str = GAUSSIAN) -> float:
    """Sample location with the highest weighted kernel density.

    Samples are sorted before evaluation so the result does not depend on input
    order; near-ties (relative gap below ``TIE_RTOL``) resolve to the smallest
    sample value.
    """
    if len(samples) == 0:
        raise ValueError("kde_mode needs at least one sample")
    if len(samples) != len(weights):
        raise ValueError(f"got {len(samples)} samples but {len(weights)} weights")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    if any(w <= 0 for w in weights):
        raise ValueError("weights must be positive")
    if len(samples) == 1:
        return float(samples[0])
    pairs = sorted(zip((float(s) for s in samples), (float(w) for w in weights)))
    s = np.array([p[0] for p in pairs])
    w = np.array([p[1] for p in pairs])
    dens = kde_density(s, s, w, bandwidth, kernel)
    best = dens.max()
    idx = int(np.flatnonzero(dens >= best * (1.0 - TIE_RTOL))[0])
    return float(s[idx])


def _flip_towards(angle: float, anchor: float) -> float:
    """Representative of ``angle`` modulo pi closest to ``anchor``."""
    k = round((anchor - angle) / math.pi)
    return angle + k * math.pi


def _anchor_index(boxes: Sequence[Box3D], weights: Sequence[float]) -> int:
    return max(range(len(boxes)), key=lambda i: (weights[i], boxes[i].score, -boxes[i].heading))


def canonicalize_headings(boxes: Sequence[Box3D], weights: Sequence[float] | None = None) -> list[float]:
    """Headings shifted by multiples of pi to sit within pi/2 of the anchor box.

    The anchor is the highest-weight box (ties: highest score).
    """
    if not boxes:
        raise ValueError("canonicalize_headings needs at least one box")
    if weights is None:
        weights = [1.0] * len(boxes)
    anchor = boxes[_anchor_index(boxes, weights)].heading
    return [_flip_towards(b.heading, anchor) for b in boxes]


def fuse_cluster(boxes: Sequence[Box3D], weights: Sequence[float] | None, config: KbfConfig) -> Box3D | Rejected:
    """Fuse a same-class cluster into one box by per-attribute KDE mode."""
    if not boxes:
        return Rejected(0, "empty cluster")
    classes = {b.class_label for b in boxes}
    if len(classes) > 1:
        raise ValueError(f"cannot fuse boxes of mixed classes {sorted(classes)}")
    if len(boxes) < config.min_cluster_size:
        return Rejected(len(boxes))
    if weights is None:
        weights = [config.default_weight] * len(boxes)
    if len(weights) != len(boxes):
        raise ValueError(f"got {len(boxes)} boxes but {len(weights)} weights")

    bw, kern = config.bandwidth, config.kernel

    def mode(values, h):
        return kde_mode(values, weights, h, kern)

    headings = canonicalize_headings(boxes, weights)
    if config.score_fusion == "max":
        score = max(b.score for b in boxes)
    else:
        score = mode([b.score for b in boxes], bw["score"])
    provenance = tuple(sorted({sid for b in boxes for sid in b.provenance}))
    detectors = sorted({b.detector_id for b in boxes if b.detector_id})
    return Box3D(
        cx=mode([b.cx for b in boxes], bw["center"]),
        cy=mode([b.cy for b in boxes], bw["center"]),
        cz=mode([b.cz for b in boxes], bw["center"]),
        l=mode([b.l for b in boxes], bw["dims"]),
        w=mode([b.w for b in boxes], bw["dims"]),
        h=mode([b.h for b in boxes], bw["dims"]),
        heading=wrap_angle(mode(headings, bw["heading"])),
        score=score,
        class_label=boxes[0].class_label,
        provenance=provenance,
        detector_id="+".join(detectors),
        source=boxes[0].source if len({b.source for b in boxes}) == 1 else "",
    )
