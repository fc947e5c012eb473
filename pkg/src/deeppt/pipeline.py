"""Detect -> track -> drop -> re-detect loop over a frame sequence.

The loop only needs two callables from its ``nets`` object:

``trackability(frame, points) -> (N,)`` and
``track(frame_t, frame_t1, points) -> (displacements (N, 2), scores (N,))``.

:class:`DeepPTModel` provides both from a trained parameter set; tests
substitute scripted stand-ins.
"""
import enum
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .datasets import SEARCH_MARGIN, SEARCH_SIZE, TEMPLATE_SIZE, extract_patch, nms_points
from .heads import DETECTOR_HEAD, SCORE_HEAD, match_score, trackability_score
from .nn import ConfigurationError
from .tracker import extract_template_features, predict_displacement, score_maps

log = logging.getLogger(__name__)


class PreconditionError(RuntimeError):
    """A stage ran without the trained components it depends on."""


class Status(str, enum.Enum):
    LIVE = "live"
    DROPPED = "dropped"
    OUT_OF_BOUNDS = "out-of-bounds"


@dataclass(frozen=True)
class PipelineConfig:
    epsilon: int = 100  # re-detect when fewer live tracks than this
    score_threshold: float = 0.5
    detector_threshold: float = 0.5
    max_tracks: int = 500
    nms_radius: int = 5
    stride: int = 2

    def __post_init__(self):
        if not 0 <= self.epsilon <= self.max_tracks:
            raise ValueError("need 0 <= epsilon <= max_tracks")
        for name in ("score_threshold", "detector_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.stride < 1 or self.nms_radius < 0:
            raise ValueError("stride must be >= 1 and nms_radius >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class Track:
    id: int
    history: list = field(default_factory=list)  # (frame, x, y, score)
    status: Status = Status.LIVE
    ended_at: int = None  # frame index where the track left LIVE

    @property
    def position(self):
        return self.history[-1][1:3]

    @property
    def last_score(self):
        return self.history[-1][3]


@dataclass
class TrackerState:
    tracks: list = field(default_factory=list)
    next_id: int = 0
    frame: int = 0  # index of the latest frame seen

    def live(self):
        return [t for t in self.tracks if t.status is Status.LIVE]

    def live_count(self):
        return sum(t.status is Status.LIVE for t in self.tracks)


class DeepPTModel:
    """Trained conv stack plus score and detector heads."""

    def __init__(self, params):
        missing = [h for h in (SCORE_HEAD, DETECTOR_HEAD) if h not in params.heads]
        if missing:
            raise PreconditionError(f"weights lack trained heads: {', '.join(missing)}")
        self.params = params

    def trackability(self, frame, points):
        if len(points) == 0:
            return np.empty(0)
        patches = np.stack([extract_patch(frame, x, y, TEMPLATE_SIZE) for x, y in points])
        feats = np.concatenate([
            extract_template_features(self.params, patches[s:s + 256])
            for s in range(0, len(patches), 256)
        ])
        return np.atleast_1d(trackability_score(self.params.heads[DETECTOR_HEAD], feats))

    def track(self, frame_t, frame_t1, points):
        if len(points) == 0:
            return np.empty((0, 2), np.int64), np.empty(0)
        templates = np.stack([extract_patch(frame_t, x, y, TEMPLATE_SIZE) for x, y in points])
        searches = np.stack([extract_patch(frame_t1, x, y, SEARCH_SIZE) for x, y in points])
        maps = score_maps(self.params, templates, searches)
        disp = predict_displacement(maps).reshape(-1, 2)
        scores = np.atleast_1d(match_score(self.params.heads[SCORE_HEAD], maps))
        return disp, scores


def _check_frame(frame):
    if frame.ndim != 2 or min(frame.shape) < SEARCH_SIZE:
        raise ValueError(f"frame {frame.shape} too small for {SEARCH_SIZE}x{SEARCH_SIZE} windows")


def candidate_grid(shape, stride):
    """Integer (x, y) points inside the 27-px margin, every ``stride`` pixels."""
    h, w = shape
    ys = np.arange(SEARCH_MARGIN, h - SEARCH_MARGIN, stride)
    xs = np.arange(SEARCH_MARGIN, w - SEARCH_MARGIN, stride)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def detect(frame, nets, config, occupied=()):
    """Candidate points scoring >= the detector threshold after NMS.

    Points within ``nms_radius`` (Chebyshev) of each other or of an
    ``occupied`` point are suppressed. Returns ``(points, scores)``,
    strongest first.
    """
    _check_frame(frame)
    cand = candidate_grid(frame.shape, config.stride)
    scores = np.asarray(nets.trackability(frame, cand), dtype=np.float64)
    keep = scores >= config.detector_threshold
    cand, scores = cand[keep], scores[keep]
    if len(cand) == 0:
        return cand.reshape(0, 2), scores
    order = nms_points(cand, scores, config.nms_radius)
    cand, scores = cand[order], scores[order]
    occupied = np.asarray(occupied, dtype=np.float64).reshape(-1, 2)
    if len(occupied):
        dist = np.abs(cand[:, None, :] - occupied[None, :, :]).max(axis=2).min(axis=1)
        free = dist > config.nms_radius
        cand, scores = cand[free], scores[free]
    return cand, scores


def _add_tracks(state, points, scores, frame_index, limit):
    added = 0
    for (x, y), s in zip(points, scores):
        if added >= limit:
            break
        state.tracks.append(Track(state.next_id, [(frame_index, int(x), int(y), float(s))]))
        state.next_id += 1
        added += 1
    return added


def initialize_tracks(frame, nets, config=PipelineConfig(), frame_index=0):
    points, scores = detect(frame, nets, config)
    state = TrackerState(frame=frame_index)
    _add_tracks(state, points, scores, frame_index, config.max_tracks)
    return state


def track_step(state, frame_t, frame_t1, nets, config=PipelineConfig()):
    """Advance every live track from ``frame_t`` to ``frame_t1`` (in place).

    Returns the state and a per-frame report dict.
    """
    if frame_t.shape != frame_t1.shape:
        raise ValueError("consecutive frames must share extents")
    _check_frame(frame_t1)
    t1 = state.frame + 1
    live = sorted(state.live(), key=lambda t: t.id)
    points = np.array([t.position for t in live], dtype=np.int64).reshape(-1, 2)
    disp, scores = nets.track(frame_t, frame_t1, points)
    report = {"frame": t1, "tracked": 0, "dropped": 0, "out_of_bounds": 0, "added": 0}
    for track, p, d, s in zip(live, points, np.asarray(disp), np.asarray(scores)):
        s = float(s)
        if s < config.score_threshold:
            track.status = Status.DROPPED
            track.ended_at = t1
            report["dropped"] += 1
            continue
        x, y = int(p[0] + d[0]), int(p[1] + d[1])
        if not (SEARCH_MARGIN <= x < frame_t1.shape[1] - SEARCH_MARGIN
                and SEARCH_MARGIN <= y < frame_t1.shape[0] - SEARCH_MARGIN):
            track.status = Status.OUT_OF_BOUNDS
            track.ended_at = t1
            report["out_of_bounds"] += 1
            continue
        track.history.append((t1, x, y, s))
        report["tracked"] += 1
    state.frame = t1
    n_live = state.live_count()
    if n_live < config.epsilon:
        occupied = [t.position for t in state.live()]
        points, det_scores = detect(frame_t1, nets, config, occupied)
        report["added"] = _add_tracks(state, points, det_scores, t1, config.max_tracks - n_live)
    report["live"] = state.live_count()
    log.debug("frame %d: %s", t1, report)
    return state, report


def run_sequence(frames, nets, config=PipelineConfig()):
    """Initialise on the first frame and track through the rest.

    Returns ``(state, reports)``.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise ConfigurationError("need at least two frames")
    state = initialize_tracks(frames[0], nets, config)
    reports = [{"frame": 0, "tracked": 0, "dropped": 0, "out_of_bounds": 0,
                "added": len(state.tracks), "live": state.live_count()}]
    for f0, f1 in zip(frames, frames[1:]):
        state, rep = track_step(state, f0, f1, nets, config)
        reports.append(rep)
    return state, reports


def track_table(state):
    """Rows ``(frame, id, x, y, score, status)`` sorted by frame then id."""
    rows = []
    for t in state.tracks:
        for frame, x, y, s in t.history:
            rows.append((frame, t.id, x, y, s, Status.LIVE.value))
        if t.ended_at is not None:
            x, y = t.position
            rows.append((t.ended_at, t.id, x, y, t.last_score, t.status.value))
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows


def summary(state):
    counts = {s.value: 0 for s in Status}
    for t in state.tracks:
        counts[t.status.value] += 1
    return {"frames": state.frame + 1, "tracks": len(state.tracks), **counts}


def format_track_table(state):
    lines = [f"{f} {i} {x} {y} {s:.6f} {st}" for f, i, x, y, s, st in track_table(state)]
    s = summary(state)
    lines.append("# summary " + " ".join(f"{k}={v}" for k, v in s.items()))
    return "\n".join(lines) + "\n"


def parse_track_table(text):
    rows = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        f, i, x, y, s, st = line.split()
        rows.append((int(f), int(i), int(x), int(y), float(s), st))
    return rows


GREEN = (0, 200, 0)
RED = (0, 0, 230)


def draw_overlay(frame, rows, frame_index):
    """BGR copy of ``frame`` with live tracks in green and failures in red.

    ``rows`` are track-table rows; each live point is joined to its
    previous position.
    """
    img = cv2.cvtColor(np.asarray(frame, np.uint8), cv2.COLOR_GRAY2BGR)
    prev = {}
    for f, i, x, y, _, st in rows:
        if f == frame_index - 1 and st == Status.LIVE.value:
            prev[i] = (x, y)
    for f, i, x, y, _, st in rows:
        if f != frame_index:
            continue
        color = GREEN if st == Status.LIVE.value else RED
        if i in prev and st == Status.LIVE.value:
            cv2.line(img, prev[i], (x, y), color, 1, cv2.LINE_AA)
        cv2.circle(img, (x, y), 2, color, -1, cv2.LINE_AA)
    return img


def write_overlays(frames, rows, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, frame in enumerate(frames):
        path = directory / f"overlay_{k:05d}.png"
        if not cv2.imwrite(str(path), draw_overlay(frame, rows, k)):
            raise OSError(f"could not write {path}")
        paths.append(path)
    return paths
