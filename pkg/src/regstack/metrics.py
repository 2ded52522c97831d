"""Spatial evaluation: landmark TRE, overlap metrics, Hausdorff distance,
t-tests, and report emission."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import stdtr

from .grid import Grid, ScalarVolume

__all__ = [
    "LandmarkSet",
    "MetricsReport",
    "tre",
    "overlap_metrics",
    "hausdorff",
    "ttest",
    "emit_report",
    "read_report",
    "read_landmarks",
    "write_landmarks",
    "boundary_voxels",
    "write_overlay_ppm",
]


@dataclass(frozen=True)
class LandmarkSet:
    """Named 3D points (mm) living in a declared space."""

    ids: tuple[str, ...]
    points: np.ndarray
    space: str = ""

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != len(set(ids)):
            raise ValueError("landmark ids must be unique")
        if pts.shape[0] != len(ids):
            raise ValueError("ids and points length mismatch")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.ids)

    def with_points(self, points, space: str | None = None) -> "LandmarkSet":
        return LandmarkSet(self.ids, points, self.space if space is None else space)


def tre(deformed: LandmarkSet, target: LandmarkSet):
    """Per-landmark Euclidean distances plus (mean, sample sd).

    Returns (per_id dict, mean, sd)."""
    if set(deformed.ids) != set(target.ids):
        missing = sorted(set(target.ids) ^ set(deformed.ids))
        raise ValueError(f"landmark id mismatch: {missing}")
    order = {i: k for k, i in enumerate(target.ids)}
    tgt = np.asarray(target.points)[[order[i] for i in deformed.ids]]
    d = np.linalg.norm(np.asarray(deformed.points) - tgt, axis=1)
    mean = float(d.mean())
    sd = float(d.std(ddof=1)) if len(d) > 1 else 0.0
    return dict(zip(deformed.ids, d.tolist())), mean, sd


def _check_binary(vol: ScalarVolume, name: str) -> np.ndarray:
    a = np.asarray(vol.data)
    if not vol.is_binary(tol=0.0):
        raise ValueError(f"{name} must be binary 0/1")
    return a > 0


def overlap_metrics(pred: ScalarVolume, truth: ScalarVolume):
    """Voxel-wise precision, recall, dice and volumes (mm^3).

    Returns (precision, recall, dice, pred_volume, truth_volume)."""
    if pred.grid != truth.grid:
        raise ValueError("grid mismatch between prediction and truth")
    p = _check_binary(pred, "pred")
    t = _check_binary(truth, "truth")
    tp = float(np.count_nonzero(p & t))
    fp = float(np.count_nonzero(p & ~t))
    fn = float(np.count_nonzero(~p & t))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    dice = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn > 0 else 0.0
    voxvol = float(np.prod(pred.grid.spacing))
    return precision, recall, dice, p.sum() * voxvol, t.sum() * voxvol


def boundary_voxels(vol: ScalarVolume) -> np.ndarray:
    """World coordinates of 6-connectivity boundary voxel centers."""
    a = _check_binary(vol, "label")
    pad = np.pad(a, 1, mode="constant", constant_values=False)
    interior = (
        pad[1:-1, 1:-1, :-2] & pad[1:-1, 1:-1, 2:]
        & pad[1:-1, :-2, 1:-1] & pad[1:-1, 2:, 1:-1]
        & pad[:-2, 1:-1, 1:-1] & pad[2:, 1:-1, 1:-1]
    )
    boundary = a & ~interior
    kk, jj, ii = np.nonzero(boundary)
    idx = np.stack([ii, jj, kk], axis=1).astype(float)
    return idx * np.asarray(vol.grid.spacing) + np.asarray(vol.grid.origin)


def _directed_max_min_sq(a_pts: np.ndarray, b_pts: np.ndarray) -> float:
    """max over a of min over b of squared distance (chunked, exact)."""
    worst = 0.0
    chunk = max(1, 2_000_000 // max(1, len(b_pts)))
    for s in range(0, len(a_pts), chunk):
        d2 = ((a_pts[s: s + chunk, None, :] - b_pts[None, :, :]) ** 2).sum(axis=-1)
        worst = max(worst, float(d2.min(axis=1).max()))
    return worst


def hausdorff(a: ScalarVolume, b: ScalarVolume) -> float:
    """Symmetric Hausdorff distance (mm) between the 6-connected boundary
    voxel centers of two same-grid binary labels. Exact brute force."""
    if a.grid != b.grid:
        raise ValueError("grid mismatch")
    pa = boundary_voxels(a)
    pb = boundary_voxels(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("empty label volume")
    return float(np.sqrt(max(_directed_max_min_sq(pa, pb), _directed_max_min_sq(pb, pa))))


def ttest(sample_a, sample_b, kind: str = "independent"):
    """Two-sided t-test.

    kind="independent": Welch's t with Welch-Satterthwaite df.
    kind="paired": one-sample t on the differences.
    Zero variance with equal means returns (0.0, 1.0) by convention."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if kind not in ("independent", "paired"):
        raise ValueError(f"unknown kind {kind!r}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two observations per sample")
    if kind == "paired":
        if len(a) != len(b):
            raise ValueError("paired test requires equal sample sizes")
        d = a - b
        sd = d.std(ddof=1)
        if sd == 0.0:
            return (0.0, 1.0) if d.mean() == 0.0 else (np.inf, 0.0)
        t = d.mean() / (sd / np.sqrt(len(d)))
        df = len(d) - 1
    else:
        va = a.var(ddof=1) / len(a)
        vb = b.var(ddof=1) / len(b)
        if va + vb == 0.0:
            return (0.0, 1.0) if a.mean() == b.mean() else (np.inf, 0.0)
        t = (a.mean() - b.mean()) / np.sqrt(va + vb)
        df = (va + vb) ** 2 / (
            va**2 / (len(a) - 1) + vb**2 / (len(b) - 1)
        )
    p = 2.0 * stdtr(df, -abs(t))
    return float(t), float(p)


@dataclass
class MetricsReport:
    """Overlap evaluation record; field names are the file schema."""

    precision: float
    recall: float
    dice: float
    hausdorff_mm: float
    pred_volume_mm3: float
    truth_volume_mm3: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("precision", "recall", "dice"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.hausdorff_mm < 0:
            raise ValueError("hausdorff_mm must be >= 0")


def emit_report(report: MetricsReport, path, overlays=None) -> list[str]:
    """Write the report as JSON; optionally render per-slice contour overlays.

    overlays, when given, is (background: ScalarVolume, pred, truth, out_dir);
    one PPM per z-slice with prediction contours in red, truth in green,
    agreement in yellow. Returns the list of written paths."""
    path = Path(path)
    payload = {
        "precision": report.precision,
        "recall": report.recall,
        "dice": report.dice,
        "hausdorff_mm": report.hausdorff_mm,
        "pred_volume_mm3": report.pred_volume_mm3,
        "truth_volume_mm3": report.truth_volume_mm3,
        "provenance": report.provenance,
    }
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    written = [str(path)]
    if overlays is not None:
        background, pred, truth, out_dir = overlays
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for k in range(background.grid.dims[2]):
            p = out_dir / f"overlay_{k:04d}.ppm"
            write_overlay_ppm(p, background, pred, truth, k)
            written.append(str(p))
    return written


def read_report(path) -> MetricsReport:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return MetricsReport(
        precision=d["precision"],
        recall=d["recall"],
        dice=d["dice"],
        hausdorff_mm=d["hausdorff_mm"],
        pred_volume_mm3=d["pred_volume_mm3"],
        truth_volume_mm3=d["truth_volume_mm3"],
        provenance=d.get("provenance", {}),
    )


def _contour2d(mask: np.ndarray) -> np.ndarray:
    pad = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = (
        pad[1:-1, :-2] & pad[1:-1, 2:] & pad[:-2, 1:-1] & pad[2:, 1:-1]
    )
    return mask & ~interior


def write_overlay_ppm(path, background: ScalarVolume, pred: ScalarVolume,
                      truth: ScalarVolume, z_index: int) -> None:
    """Binary P6 PPM: grayscale background slice with prediction contour red,
    truth contour green, overlapping contour pixels yellow."""
    bg = np.asarray(background.data, dtype=float)[z_index]
    p = np.asarray(pred.data)[z_index] > 0
    t = np.asarray(truth.data)[z_index] > 0
    lo, hi = bg.min(), bg.max()
    gray = np.zeros_like(bg) if hi == lo else (bg - lo) / (hi - lo)
    img = np.repeat((gray * 255).astype(np.uint8)[:, :, None], 3, axis=2)
    cp = _contour2d(p)
    ct = _contour2d(t)
    img[cp] = [255, 0, 0]
    img[ct] = [0, 255, 0]
    img[cp & ct] = [255, 255, 0]
    ny, nx = bg.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{nx} {ny}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


# ---------------------------------------------------------------------------
# Landmark CSV

def write_landmarks(path, lm: LandmarkSet) -> None:
    lines = ["id,x,y,z"]
    for i, p in zip(lm.ids, np.asarray(lm.points)):
        lines.append(f"{i},{float(p[0])!r},{float(p[1])!r},{float(p[2])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_landmarks(path, space: str = "") -> LandmarkSet:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "id,x,y,z":
        raise ValueError("landmark CSV must start with header 'id,x,y,z'")
    ids, pts = [], []
    for line in lines[1:]:
        if not line.strip():
            continue
        i, x, y, z = line.split(",")
        ids.append(i)
        pts.append([float(x), float(y), float(z)])
    return LandmarkSet(tuple(ids), np.asarray(pts), space)
