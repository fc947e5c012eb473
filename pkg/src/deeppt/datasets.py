"""Image I/O, KITTI flow ground truth, Harris corners and tracking samples."""
import logging
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

TEMPLATE_SIZE = 19
SEARCH_SIZE = 55
WINDOW_RADIUS = 18  # 37 x 37 displacement grid
SEARCH_MARGIN = SEARCH_SIZE // 2  # 27
UBC_PATCH = 64
UBC_GRID = 16

SAMPLES_MAGIC = b"DPTS"


class DatasetError(ValueError):
    """Unreadable, unsupported or inconsistent input data."""


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

def luminance(rgb):
    """8-bit luminance from an (H, W, 3) RGB array, rounded to nearest."""
    rgb = rgb.astype(np.float64)
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.floor(y + 0.5), 0, 255).astype(np.uint8)


def load_gray_image(path):
    """Decode an 8-bit PNG/PGM/BMP as a (H, W) uint8 array.

    Colour images are converted with 0.299/0.587/0.114 luminance weights.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    img = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DatasetError(f"{path}: unsupported format or truncated file")
    if img.dtype != np.uint8:
        raise DatasetError(f"{path}: expected 8-bit samples, got {img.dtype}")
    if img.ndim == 3:
        if img.shape[2] == 1:
            img = img[..., 0]
        elif img.shape[2] in (3, 4):
            img = luminance(img[..., 2::-1])  # BGR(A) -> RGB
        else:
            raise DatasetError(f"{path}: unsupported channel count {img.shape[2]}")
    return np.ascontiguousarray(img)


def save_gray_image(path, img):
    if not cv2.imwrite(os.fspath(path), np.asarray(img, dtype=np.uint8)):
        raise OSError(f"could not write {path}")


# --------------------------------------------------------------------------
# KITTI flow
# --------------------------------------------------------------------------

@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray  # bool

    @property
    def shape(self):
        return self.u.shape


def decode_kitti_flow(source):
    """Decode a KITTI 16-bit 3-channel flow PNG (path or (H, W, 3) RGB array).

    ``u = (R - 2**15) / 64``, ``v = (G - 2**15) / 64``, ``valid = (B == 1)``.
    """
    if isinstance(source, np.ndarray):
        rgb = source
    else:
        bgr = cv2.imread(os.fspath(source), cv2.IMREAD_UNCHANGED)
        if bgr is None:
            raise DatasetError(f"{source}: unreadable flow image")
        rgb = bgr[..., ::-1] if bgr.ndim == 3 else bgr
    if rgb.dtype != np.uint16 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DatasetError(
            f"KITTI flow must be 16-bit with 3 channels, got {rgb.dtype} {rgb.shape}"
        )
    u = (rgb[..., 0].astype(np.float64) - 2**15) / 64.0
    v = (rgb[..., 1].astype(np.float64) - 2**15) / 64.0
    valid = rgb[..., 2] == 1
    u[~valid] = 0.0
    v[~valid] = 0.0
    return FlowField(u, v, valid)


def encode_kitti_flow(flow):
    """Inverse of :func:`decode_kitti_flow` for flows on the 1/64 grid."""
    rgb = np.zeros(flow.u.shape + (3,), dtype=np.uint16)
    rgb[..., 0] = np.clip(np.rint(flow.u * 64.0 + 2**15), 0, 65535)
    rgb[..., 1] = np.clip(np.rint(flow.v * 64.0 + 2**15), 0, 65535)
    rgb[..., 2] = flow.valid
    return rgb


def write_kitti_flow(path, flow):
    if not cv2.imwrite(os.fspath(path), encode_kitti_flow(flow)[..., ::-1]):
        raise OSError(f"could not write {path}")


def find_kitti_pairs(root):
    """``(image_t, image_t1, flow)`` path triples under a KITTI flow root.

    Expects ``image_2/<id>_10.png``, ``image_2/<id>_11.png`` and a flow
    directory (``flow_noc`` preferred, then ``flow_occ``) holding
    ``<id>_10.png``.
    """
    root = Path(root)
    flow_dir = next((root / d for d in ("flow_noc", "flow_occ") if (root / d).is_dir()), None)
    if flow_dir is None or not (root / "image_2").is_dir():
        raise DatasetError(f"{root}: not a KITTI flow directory (image_2/, flow_noc/)")
    triples = []
    for flow_path in sorted(flow_dir.glob("*_10.png")):
        frame_id = flow_path.name[: -len("_10.png")]
        t0 = root / "image_2" / f"{frame_id}_10.png"
        t1 = root / "image_2" / f"{frame_id}_11.png"
        if t0.exists() and t1.exists():
            triples.append((t0, t1, flow_path))
    return triples


# --------------------------------------------------------------------------
# Harris corners
# --------------------------------------------------------------------------

def harris_response(img, k=0.04, window=5):
    """``det(M) - k * trace(M)**2`` with a Sobel structure tensor and box smoothing."""
    f = np.asarray(img, dtype=np.float64)
    ix = ndimage.sobel(f, axis=1, mode="reflect")
    iy = ndimage.sobel(f, axis=0, mode="reflect")
    sxx = ndimage.uniform_filter(ix * ix, window, mode="reflect")
    syy = ndimage.uniform_filter(iy * iy, window, mode="reflect")
    sxy = ndimage.uniform_filter(ix * iy, window, mode="reflect")
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def nms_points(xy, scores, radius):
    """Greedy suppression: keep highest scores, drop points within Chebyshev ``radius``.

    Ties keep the earlier index. Returns kept indices in descending-score order.
    """
    order = np.argsort(-np.asarray(scores), kind="stable")
    kept = []
    kept_xy = np.empty((0, 2))
    for i in order:
        p = xy[i]
        if kept and np.max(np.abs(kept_xy - p), axis=1).min() <= radius:
            continue
        kept.append(i)
        kept_xy = np.vstack([kept_xy, p])
    return np.array(kept, dtype=np.intp)


def harris_corners(img, k=0.04, threshold=0.01, nms_radius=5):
    """Harris corners as an (M, 3) array of ``(x, y, response)``, strongest first.

    ``threshold`` is a fraction of the maximum response.
    """
    r = harris_response(img, k)
    peak = r.max()
    if peak <= 0:
        return np.empty((0, 3))
    local_max = r == ndimage.maximum_filter(r, size=2 * nms_radius + 1, mode="nearest")
    ys, xs = np.nonzero(local_max & (r > threshold * peak))
    resp = r[ys, xs]
    xy = np.stack([xs, ys], axis=1)
    keep = nms_points(xy, resp, nms_radius - 1 if nms_radius > 0 else 0)
    return np.column_stack([xy[keep], resp[keep]]).astype(np.float64)


# --------------------------------------------------------------------------
# tracking samples
# --------------------------------------------------------------------------

def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def extract_patch(img, x, y, size):
    """Square ``size`` patch centred at integer ``(x, y)``; raises if out of bounds."""
    h = size // 2
    x, y = int(x), int(y)
    if x - h < 0 or y - h < 0 or x + h >= img.shape[1] or y + h >= img.shape[0]:
        raise DatasetError(f"{size}x{size} patch at ({x}, {y}) leaves the image")
    return img[y - h:y + h + 1, x - h:x + h + 1]


def inside_margin(shape, x, y, margin=SEARCH_MARGIN):
    height, width = shape[:2]
    return margin <= x < width - margin and margin <= y < height - margin


@dataclass
class TrackingSamples:
    """Template/search patch pairs with integer ground-truth displacement.

    ``displacements`` holds ``(dx, dy)`` per sample; ``positions`` the
    frame-t ``(x, y)`` the patches were cut at (may be empty).
    """

    templates: np.ndarray  # (N, 19, 19) uint8
    searches: np.ndarray  # (N, 55, 55) uint8
    displacements: np.ndarray  # (N, 2) int
    positions: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.templates)
        if self.positions is None:
            self.positions = np.zeros((n, 2), dtype=np.int64)
        if self.templates.shape[1:] != (TEMPLATE_SIZE, TEMPLATE_SIZE):
            raise DatasetError(f"templates must be 19x19, got {self.templates.shape[1:]}")
        if self.searches.shape[1:] != (SEARCH_SIZE, SEARCH_SIZE):
            raise DatasetError(f"search patches must be 55x55, got {self.searches.shape[1:]}")
        if not (len(self.searches) == len(self.displacements) == len(self.positions) == n):
            raise DatasetError("sample arrays have different lengths")
        if n and np.abs(self.displacements).max() > WINDOW_RADIUS:
            raise DatasetError("displacement outside the 37x37 window")

    def __len__(self):
        return len(self.templates)

    def subset(self, index):
        return TrackingSamples(
            self.templates[index], self.searches[index],
            self.displacements[index], self.positions[index],
        )

    @classmethod
    def empty(cls):
        return cls(
            np.empty((0, TEMPLATE_SIZE, TEMPLATE_SIZE), np.uint8),
            np.empty((0, SEARCH_SIZE, SEARCH_SIZE), np.uint8),
            np.empty((0, 2), np.int64),
        )

    @classmethod
    def concatenate(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.templates for p in parts]),
            np.concatenate([p.searches for p in parts]),
            np.concatenate([p.displacements for p in parts]),
            np.concatenate([p.positions for p in parts]),
        )


def generate_tracking_samples(img_t, img_t1, flow, corners, max_samples=None):
    """Cut template/search pairs around ``corners`` using ground-truth flow.

    Corners without valid flow, with a rounded displacement beyond +-18 px,
    or too close to the border for a 55x55 window are skipped.

    Returns
    -------
    samples : TrackingSamples
    counts : dict
        How many corners each filter removed.
    """
    if img_t.shape != img_t1.shape or img_t.shape != flow.shape:
        raise DatasetError("images and flow field must share extents")
    counts = {"candidates": 0, "invalid_flow": 0, "too_far": 0, "border": 0, "kept": 0}
    templates, searches, disps, positions = [], [], [], []
    for x, y in np.asarray(corners)[:, :2].astype(np.int64):
        counts["candidates"] += 1
        if not (0 <= y < flow.shape[0] and 0 <= x < flow.shape[1]) or not flow.valid[y, x]:
            counts["invalid_flow"] += 1
            continue
        dx, dy = round_half_away([flow.u[y, x], flow.v[y, x]])
        if abs(dx) > WINDOW_RADIUS or abs(dy) > WINDOW_RADIUS:
            counts["too_far"] += 1
            continue
        if not inside_margin(img_t.shape, x, y):
            counts["border"] += 1
            continue
        templates.append(extract_patch(img_t, x, y, TEMPLATE_SIZE))
        searches.append(extract_patch(img_t1, x, y, SEARCH_SIZE))
        disps.append((dx, dy))
        positions.append((x, y))
        counts["kept"] += 1
        if max_samples is not None and counts["kept"] >= max_samples:
            break
    if not templates:
        return TrackingSamples.empty(), counts
    samples = TrackingSamples(
        np.stack(templates).astype(np.uint8),
        np.stack(searches).astype(np.uint8),
        np.array(disps, dtype=np.int64),
        np.array(positions, dtype=np.int64),
    )
    return samples, counts


def kitti_samples(root, max_samples=None, max_per_pair=None, harris_threshold=0.01,
                  nms_radius=5):
    """Tracking samples around Harris corners of every KITTI pair under ``root``."""
    parts = []
    total = 0
    for t0, t1, fl in find_kitti_pairs(root):
        img_t = load_gray_image(t0)
        img_t1 = load_gray_image(t1)
        flow = decode_kitti_flow(fl)
        corners = harris_corners(img_t, threshold=harris_threshold, nms_radius=nms_radius)
        cap = max_per_pair
        if max_samples is not None:
            cap = max_samples - total if cap is None else min(cap, max_samples - total)
        samples, counts = generate_tracking_samples(img_t, img_t1, flow, corners, cap)
        log.info("%s: %s", t0.name, counts)
        parts.append(samples)
        total += len(samples)
        if max_samples is not None and total >= max_samples:
            break
    return TrackingSamples.concatenate(parts)


def write_samples(path, samples):
    """Write the DPTS record cache: header ``b"DPTS"`` + u64 count, then per
    record 361 template bytes, 3025 search bytes, i8 dx, i8 dy."""
    n = len(samples)
    rec = np.zeros(n, dtype=[("t", "u1", TEMPLATE_SIZE**2), ("s", "u1", SEARCH_SIZE**2),
                             ("dx", "i1"), ("dy", "i1")])
    rec["t"] = samples.templates.reshape(n, -1)
    rec["s"] = samples.searches.reshape(n, -1)
    rec["dx"] = samples.displacements[:, 0]
    rec["dy"] = samples.displacements[:, 1]
    with open(path, "wb") as fh:
        fh.write(SAMPLES_MAGIC + struct.pack("<Q", n))
        fh.write(rec.tobytes())


def read_samples(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != SAMPLES_MAGIC:
        raise DatasetError(f"{path}: bad magic {data[:4]!r}, expected {SAMPLES_MAGIC!r}")
    (n,) = struct.unpack("<Q", data[4:12])
    rec_size = TEMPLATE_SIZE**2 + SEARCH_SIZE**2 + 2
    if len(data) != 12 + n * rec_size:
        raise DatasetError(f"{path}: expected {n} records, file size disagrees")
    rec = np.frombuffer(data, offset=12, dtype=[("t", "u1", TEMPLATE_SIZE**2),
                                                ("s", "u1", SEARCH_SIZE**2),
                                                ("dx", "i1"), ("dy", "i1")])
    return TrackingSamples(
        rec["t"].reshape(n, TEMPLATE_SIZE, TEMPLATE_SIZE).copy(),
        rec["s"].reshape(n, SEARCH_SIZE, SEARCH_SIZE).copy(),
        np.stack([rec["dx"], rec["dy"]], axis=1).astype(np.int64),
    )


# --------------------------------------------------------------------------
# synthetic translations
# --------------------------------------------------------------------------

def random_texture(rng, size, sigma=None):
    """Smoothed white noise stretched to the full 8-bit range."""
    if sigma is None:
        sigma = rng.uniform(1.0, 2.5)
    noise = ndimage.gaussian_filter(rng.standard_normal(size), sigma, mode="wrap")
    noise -= noise.min()
    noise *= 255.0 / max(noise.max(), 1e-12)
    return np.rint(noise).astype(np.uint8)


def make_synthetic_translations(count, seed=0, size=93, max_shift=WINDOW_RADIUS):
    """Exact-ground-truth samples from integer shifts of random textures.

    Image B is image A shifted by ``(dx, dy)``: ``B[y, x] = A[y - dy, x - dx]``.
    The template is cut from A and the search window from B, both at the
    image centre.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    min_size = SEARCH_SIZE + 2 * max_shift
    if size < min_size:
        raise ValueError(f"texture size must be >= {min_size}")
    rng = np.random.default_rng(seed)
    c = size // 2
    templates = np.empty((count, TEMPLATE_SIZE, TEMPLATE_SIZE), np.uint8)
    searches = np.empty((count, SEARCH_SIZE, SEARCH_SIZE), np.uint8)
    disps = rng.integers(-max_shift, max_shift + 1, size=(count, 2))
    for i in range(count):
        a = random_texture(rng, (size, size))
        dx, dy = disps[i]
        b = np.roll(a, shift=(dy, dx), axis=(0, 1))
        templates[i] = extract_patch(a, c, c, TEMPLATE_SIZE)
        searches[i] = extract_patch(b, c, c, SEARCH_SIZE)
    positions = np.full((count, 2), c, dtype=np.int64)
    return TrackingSamples(templates, searches, disps.astype(np.int64), positions)


# --------------------------------------------------------------------------
# UBC patches
# --------------------------------------------------------------------------

@dataclass
class UBCDataset:
    patches: np.ndarray  # (N, 64, 64) uint8
    point_ids: np.ndarray  # (N,)
    pairs: dict  # match-file name -> (M, 2) patch indices
    labels: dict  # match-file name -> (M,) bool

    def pair_patches(self, name):
        idx = self.pairs[name]
        return self.patches[idx[:, 0]], self.patches[idx[:, 1]], self.labels[name]


def montage_region(index):
    """``(row0, col0)`` of patch ``index`` inside its 1024x1024 montage."""
    local = index % (UBC_GRID * UBC_GRID)
    return (local // UBC_GRID) * UBC_PATCH, (local % UBC_GRID) * UBC_PATCH


def _natural_key(p):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", p.name)]


def parse_ubc_dataset(directory):
    """Load a UBC (Winder/Brown) patch directory.

    Montages (``*.bmp``) are 1024x1024 grids of 16x16 patches, read in
    natural filename order with row-major patch indexing. ``info.txt``
    line ``i`` carries patch ``i``'s 3D point id; ``m50_*.txt`` files list
    pairs as ``patch1 point1 _ patch2 point2 _``.
    """
    directory = Path(directory)
    montages = sorted(directory.glob("*.bmp"), key=_natural_key)
    info = directory / "info.txt"
    if not montages or not info.exists():
        raise DatasetError(f"{directory}: needs *.bmp montages and info.txt")
    point_ids = np.array([int(line.split()[0]) for line in info.read_text().split("\n")
                          if line.strip()], dtype=np.int64)
    per = UBC_GRID * UBC_GRID
    capacity = len(montages) * per
    if not (capacity - per < len(point_ids) <= capacity):
        raise DatasetError(
            f"{directory}: {len(point_ids)} info lines do not fit {len(montages)} montages"
        )
    patches = np.empty((len(point_ids), UBC_PATCH, UBC_PATCH), np.uint8)
    for m, path in enumerate(montages):
        img = load_gray_image(path)
        if img.shape != (UBC_GRID * UBC_PATCH,) * 2:
            raise DatasetError(f"{path}: montage must be 1024x1024, got {img.shape}")
        grid = img.reshape(UBC_GRID, UBC_PATCH, UBC_GRID, UBC_PATCH).transpose(0, 2, 1, 3)
        grid = grid.reshape(per, UBC_PATCH, UBC_PATCH)
        lo = m * per
        hi = min(lo + per, len(point_ids))
        patches[lo:hi] = grid[: hi - lo]
    pairs, labels = {}, {}
    for mf in sorted(directory.glob("m50_*.txt")):
        rows = np.loadtxt(mf, dtype=np.int64, ndmin=2)
        if rows.size and rows.shape[1] != 6:
            raise DatasetError(f"{mf}: expected 6 fields per line")
        idx = rows[:, [0, 3]]
        if idx.size and idx.max() >= len(point_ids):
            raise DatasetError(f"{mf}: patch index beyond {len(point_ids)} patches")
        label = point_ids[idx[:, 0]] == point_ids[idx[:, 1]]
        listed = rows[:, 1] == rows[:, 4]
        if np.any(label != listed):
            raise DatasetError(f"{mf}: match labels disagree with info.txt point ids")
        pairs[mf.stem] = idx
        labels[mf.stem] = label
    return UBCDataset(patches, point_ids, pairs, labels)


def center_crop(patch, size):
    """Central ``size`` x ``size`` region; offset ``(64 - size) // 2``."""
    n = patch.shape[-1]
    if size > n or size < 1:
        raise ValueError(f"crop size {size} must be within 1..{n}")
    o = (n - size) // 2
    return patch[..., o:o + size, o:o + size]
