"""Tracking accuracy, patch-matching error and homography back-projection."""
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

DEFAULT_THRESHOLDS = (1.0, 2.0, 3.0)
DEFAULT_INLIER_PX = 5.0

# published numbers, for side-by-side display only
REFERENCE_PIXEL_ACCURACY = {
    "Deep-PT": {1: 78.22, 2: 88.78, 3: 90.42},
    "KLT": {1: 53.93, 2: 65.48, 3: 70.61},
}
REFERENCE_BACKPROJECTION = {
    "Lowe's": (4.66, 4.24, 34.0),
    "AMA": (2.49, 2.42, 40.0),
    "Cho": (3.56, 3.35, 39.0),
    "HMA": (2.84, 2.64, 39.0),
    "Deep-PT": (2.71, 2.81, 82.0),
}
# The published table stacks two header rows ("Notredame | Liberty" over
# "Liberty | Notredame"), so each column is keyed by both names as printed.
UBC_COLUMNS = ("Notredame/Liberty", "Liberty/Notredame")
REFERENCE_UBC = {
    "nSift+NNet": (20.44, 14.35),
    "Trzcinski et al": (18.05, 14.15),
    "Brown et al": (16.85, None),
    "Simonyan et al": (16.56, 9.88),
    "MatchNet": (9.82, 5.02),
    "Deep-PT": (15.99, 12.79),
}


def pixel_accuracy(predicted, ground_truth, thresholds=DEFAULT_THRESHOLDS):
    """Fraction of records with ``||pred - gt||_2 <= t`` for each threshold ``t``."""
    pred = np.asarray(predicted, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 2)
    if len(pred) == 0:
        raise ValueError("no prediction records")
    if pred.shape != gt.shape:
        raise ValueError("predictions and ground truth differ in length")
    err = np.hypot(*(pred - gt).T)
    return {float(t): float(np.mean(err <= t)) for t in thresholds}


def error_at_recall(scores, labels, recall=0.95):
    """False-positive rate (percent) at the strictest threshold reaching ``recall``.

    A pair is accepted when its score is >= the threshold; candidate
    thresholds are the distinct scores.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if len(scores) != len(labels):
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both matching and non-matching pairs are required")
    thresholds = np.unique(scores)  # ascending
    # accepted counts at each threshold: entries with score >= t
    pos_sorted = np.sort(scores[labels])
    neg_sorted = np.sort(scores[~labels])
    tp = n_pos - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = n_neg - np.searchsorted(neg_sorted, thresholds, side="left")
    ok = np.flatnonzero(tp >= recall * n_pos)
    # tp is non-increasing in t, so the last admissible index is the strictest
    return 100.0 * fp[ok[-1]] / n_neg


def error_at_95_recall(scores, labels):
    return error_at_recall(scores, labels, 0.95)


def check_homography(H):
    H = np.asarray(H, dtype=np.float64).reshape(3, 3)
    if abs(np.linalg.det(H)) <= 1e-12:
        raise ValueError("homography is singular")
    return H


def apply_homography(H, points):
    """Projective map of (x, y) point(s); raises on a vanishing denominator."""
    H = np.asarray(H, dtype=np.float64).reshape(3, 3)
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 2)
    hom = np.column_stack([pts, np.ones(len(pts))]) @ H.T
    w = hom[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise ValueError("point maps to the line at infinity")
    out = hom[:, :2] / w[:, None]
    return out[0] if single else out


@dataclass
class BackprojectionReport:
    mean: float
    std: float
    inlier_percent: float
    count: int
    inlier_threshold: float

    def to_dict(self):
        return asdict(self)


def backprojection_report(prev_points, curr_points, patch_ids, homographies,
                          inlier_threshold=DEFAULT_INLIER_PX):
    """Errors ``||H^-1 p_curr - p_prev||`` with ``H`` looked up per planar patch.

    ``homographies`` maps patch id -> 3x3 matrix taking previous-frame
    points to the current frame.
    """
    if inlier_threshold <= 0:
        raise ValueError("inlier threshold must be positive")
    prev = np.asarray(prev_points, dtype=np.float64).reshape(-1, 2)
    curr = np.asarray(curr_points, dtype=np.float64).reshape(-1, 2)
    ids = np.asarray(patch_ids)
    if not (len(prev) == len(curr) == len(ids)) or len(prev) == 0:
        raise ValueError("need equally many previous points, current points and patch ids")
    errors = np.empty(len(prev))
    for pid in np.unique(ids):
        if pid not in homographies:
            raise KeyError(f"no homography for patch {pid!r}")
        inv = np.linalg.inv(check_homography(homographies[pid]))
        sel = ids == pid
        back = apply_homography(inv, curr[sel])
        errors[sel] = np.hypot(*(back - prev[sel]).T)
    return BackprojectionReport(
        mean=float(errors.mean()),
        std=float(errors.std()),
        inlier_percent=float(100.0 * np.mean(errors < inlier_threshold)),
        count=len(errors),
        inlier_threshold=float(inlier_threshold),
    )


def read_correspondences(path):
    """``x_prev y_prev x_curr y_curr patch_id`` per line."""
    prev, curr, ids = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(fields)}")
        prev.append((float(fields[0]), float(fields[1])))
        curr.append((float(fields[2]), float(fields[3])))
        ids.append(fields[4])
    return np.array(prev), np.array(curr), np.array(ids)


def read_homographies(directory):
    """``<patch_id>.txt`` files of 9 reals (row-major) -> {patch_id: H}."""
    out = {}
    for f in sorted(Path(directory).glob("*.txt")):
        vals = np.array(f.read_text().split(), dtype=np.float64)
        if vals.size != 9:
            raise ValueError(f"{f}: expected 9 values, got {vals.size}")
        out[f.stem] = check_homography(vals)
    return out


# --------------------------------------------------------------------------
# report formatting
# --------------------------------------------------------------------------

def format_table(header, rows):
    cells = [header] + [["" if c is None else str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def pixel_accuracy_table(results, thresholds=DEFAULT_THRESHOLDS, include_reference=True):
    """``results``: {method: {threshold: fraction}} -> text table in percent."""
    header = ["method"] + [f"{t:g}-pixel" for t in thresholds]
    rows = [[name] + [f"{100 * acc[float(t)]:.2f}%" for t in thresholds]
            for name, acc in results.items()]
    if include_reference:
        for name, ref in REFERENCE_PIXEL_ACCURACY.items():
            rows.append([f"{name} (published)"] +
                        [f"{ref[int(t)]:.2f}%" if float(t).is_integer() and int(t) in ref
                         else "n/a" for t in thresholds])
    return format_table(header, rows)


def backprojection_table(results, include_reference=True):
    rows = [[name, f"{r.mean:.2f} +- {r.std:.2f}", f"{r.inlier_percent:.0f}%"]
            for name, r in results.items()]
    if include_reference:
        for name, (m, s, inl) in REFERENCE_BACKPROJECTION.items():
            rows.append([f"{name} (published)", f"{m:.2f} +- {s:.2f}", f"{inl:.0f}%"])
    threshold = next(iter(results.values())).inlier_threshold if results else DEFAULT_INLIER_PX
    return format_table(["method", "error (px)", f"inliers (<{threshold:g}px)"], rows)


def ubc_table(results, include_reference=True):
    """``results``: {(train, test): error percent}."""
    rows = [[f"Deep-PT (this run) train={tr} test={te}", f"{err:.2f}%"]
            for (tr, te), err in results.items()]
    if include_reference:
        for name, ref in REFERENCE_UBC.items():
            for column, val in zip(UBC_COLUMNS, ref):
                rows.append([f"{name} (published) column {column}",
                             "n/a" if val is None else f"{val:.2f}%"])
    return format_table(["method", "error @ 95% recall"], rows)


def write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
