"""Landmark-heatmap comparison and multi-solution diversity.

The heatmap metric compares landmark heatmaps of a generated HR image with
those of the reference HR image:

    metric = (1/N) * sum_n sum_ij (M_hat[n, i, j] - M[n, i, j]) ** 2

Any landmark localiser can be plugged in as a :class:`LandmarkBackend`. The
bundled :class:`DarkBlobLandmarks` backend is a simple deterministic stand-in.
"""

import csv
import itertools
from typing import Protocol

import numpy as np
import torch

from .errors import ShapeError

REPORT_COLUMNS = ("id", "k", "heatmap_metric", "objective", "diversity")


def as_heatmaps(maps):
    arr = np.asarray(maps.detach().cpu() if isinstance(maps, torch.Tensor) else maps, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] < 1:
        raise ShapeError(f"heatmaps must have shape (N, H, W) with N >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ValueError("heatmaps must be finite and non-negative")
    return arr


def heatmap_metric(gen, ref):
    g, r = as_heatmaps(gen), as_heatmaps(ref)
    if g.shape != r.shape:
        raise ShapeError(f"heatmap sets differ in shape: {g.shape} vs {r.shape}")
    return float(((g - r) ** 2).sum(axis=(1, 2)).mean())


def synth_heatmaps(landmarks, sigma, size):
    """One unnormalised Gaussian per ``(x, y)`` landmark, peak value 1 at the landmark."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pts = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("at least one landmark is required")
    if np.any(pts < 0) or np.any(pts > size - 1):
        raise ValueError(f"landmark outside the {size}x{size} image")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    d2 = (xx[None] - pts[:, 0, None, None]) ** 2 + (yy[None] - pts[:, 1, None, None]) ** 2
    return np.exp(-d2 / (2 * sigma ** 2))


def _box_mean(img, radius):
    size = img.shape[0]
    pad = np.pad(img, radius, mode="edge")
    k = 2 * radius + 1
    return sum(pad[i:i + size, j:j + size] for i in range(k) for j in range(k)) / k ** 2


class LandmarkBackend(Protocol):
    backend_id: str

    def __call__(self, image) -> np.ndarray: ...


class DarkBlobLandmarks:
    """Locates the strongest small dark spot in the left-eye, right-eye and mouth regions.

    Crude, but it is deterministic and its output moves when facial features move,
    which is all the metric needs to be exercised end to end.
    """

    backend_id = "dark-blob-v1"
    # (x0, x1, y0, y1) as fractions of the image side
    REGIONS = ((0.15, 0.5, 0.2, 0.55), (0.5, 0.85, 0.2, 0.55), (0.25, 0.75, 0.6, 0.92))

    def __init__(self, sigma=1.5):
        self.sigma = sigma

    def locate(self, image):
        img = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
        lum = img.astype(np.float64).mean(axis=0)
        size = lum.shape[0]
        # small dark spot on a brighter surround: 3x3 mean minus 9x9 mean
        smooth = _box_mean(lum, 1) - _box_mean(lum, 4)
        points = []
        for x0, x1, y0, y1 in self.REGIONS:
            xs = slice(int(x0 * size), max(int(x1 * size), int(x0 * size) + 1))
            ys = slice(int(y0 * size), max(int(y1 * size), int(y0 * size) + 1))
            patch = smooth[ys, xs]
            iy, ix = np.unravel_index(np.argmin(patch), patch.shape)
            points.append((xs.start + ix, ys.start + iy))
        return points

    def __call__(self, image):
        size = image.shape[-1]
        return synth_heatmaps(self.locate(image), self.sigma * size / 64, size)


def solution_diversity(solutions):
    """Mean pairwise L1 (mean absolute difference) over all unordered pairs."""
    sols = [s.detach().cpu().double() if isinstance(s, torch.Tensor)
            else torch.as_tensor(np.asarray(s, dtype=np.float64)) for s in solutions]
    if len(sols) < 2:
        raise ValueError("diversity needs at least two solutions")
    if any(s.shape != sols[0].shape for s in sols):
        raise ShapeError("solutions must share one shape")
    dists = [(a - b).abs().mean().item() for a, b in itertools.combinations(sols, 2)]
    return float(np.mean(dists))


def write_report(path, rows):
    """CSV with one row per (image id, solution k); ``diversity`` is blank for K < 2."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow(["" if row.get(c) is None else
                             (repr(row[c]) if isinstance(row[c], float) else row[c])
                             for c in REPORT_COLUMNS])
