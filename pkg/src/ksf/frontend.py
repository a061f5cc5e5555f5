"""Simulated feature association and keyframe selection.

Association uses the ground-truth landmark ids carried by simulated
observations.  A landmark's track is extended when the landmark was seen in the
previous frame or in one of the most recent keyframes; otherwise a new track is
started.  A track that misses the current frame is completed once it can no
longer be re-associated through a keyframe.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)


class Observation(NamedTuple):
    frame_id: int
    cam: int
    uv: np.ndarray
    raw_stamp: float

    @property
    def row(self) -> float:
        return float(self.uv[1])


@dataclass
class FeatureTrack:
    landmark_id: int
    observations: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.observations)

    def add(self, obs: Observation) -> None:
        for o in reversed(self.observations):
            if o.cam != obs.cam:
                continue
            if o.frame_id == obs.frame_id:
                raise ValueError(f"duplicate observation of landmark {self.landmark_id} "
                                 f"in frame {obs.frame_id}, camera {obs.cam}")
            if o.frame_id > obs.frame_id:
                raise ValueError("frame ids must increase along a track")
            break
        self.observations.append(obs)

    @property
    def frame_ids(self) -> list:
        return [o.frame_id for o in self.observations]

    def last_frame(self) -> int:
        return self.observations[-1].frame_id

    def remove_frames(self, frame_ids) -> list:
        """Drop observations made in ``frame_ids``; returns the dropped ones."""
        frame_ids = set(frame_ids)
        gone = [o for o in self.observations if o.frame_id in frame_ids]
        if gone:
            self.observations = [o for o in self.observations if o.frame_id not in frame_ids]
        return gone


# --------------------------------------------------------------------------
# keyframe criteria

def convex_hull(points) -> np.ndarray:
    """Counter-clockwise hull vertices by Andrew's monotone chain."""
    pts = np.unique(np.asarray(points, dtype=float).reshape(-1, 2), axis=0)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0.0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0.0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def polygon_area(hull) -> float:
    hull = np.asarray(hull, dtype=float)
    if len(hull) < 3:
        return 0.0
    x, y = hull[:, 0], hull[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def points_in_hull(hull, points, eps: float = 1e-9) -> np.ndarray:
    """Boolean mask of points inside or on a counter-clockwise convex polygon."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(hull) < 3:
        return np.zeros(len(points), dtype=bool)
    inside = np.ones(len(points), dtype=bool)
    scale = max(1.0, float(np.abs(hull).max()))
    for a, b in zip(hull, np.roll(hull, -1, axis=0)):
        cr = (b[0] - a[0]) * (points[:, 1] - a[1]) - (b[1] - a[1]) * (points[:, 0] - a[0])
        inside &= cr >= -eps * scale * scale
    return inside


class KeyframeScores(NamedTuple):
    overlap: float
    ratio: float


def keyframe_scores(matched, all_features) -> KeyframeScores:
    """Hull-area overlap ``o`` and match ratio ``r`` for one camera."""
    matched = np.asarray(matched, dtype=float).reshape(-1, 2)
    all_features = np.asarray(all_features, dtype=float).reshape(-1, 2)
    h_all = convex_hull(all_features)
    h_m = convex_hull(matched) if len(matched) else np.empty((0, 2))
    a_all, a_m = polygon_area(h_all), polygon_area(h_m)
    if a_all <= 0.0 or a_m <= 0.0:
        return KeyframeScores(0.0, 0.0)
    n_inside = int(points_in_hull(h_m, all_features).sum())
    ratio = len(matched) / n_inside if n_inside else 0.0
    return KeyframeScores(a_m / a_all, ratio)


def keyframe_decision(inputs, T_o: float = 0.6, T_r: float = 0.2) -> bool:
    """``inputs`` holds one ``(matched_pixels, all_pixels)`` pair per camera."""
    scores = [keyframe_scores(m, a) for m, a in inputs]
    if not scores:
        return True
    return max(s.overlap for s in scores) < T_o or max(s.ratio for s in scores) < T_r


# --------------------------------------------------------------------------
# association

class AssociationResult(NamedTuple):
    completed: list           # FeatureTrack objects ready for an update
    matched: list             # per camera: (matched pixels, all pixels)
    extended: int             # observations appended to existing tracks


class Tracker:
    """Track store fed one frame at a time."""

    def __init__(self, n_keyframes: int = 2, min_length: int = 3, margin: float = 1.0):
        self.tracks: dict[int, FeatureTrack] = {}
        self.n_keyframes = n_keyframes
        self.min_length = min_length
        self.margin = margin
        self.last_frame: int | None = None
        self.last_ids: set = set()
        self.keyframes: list[tuple[int, set]] = []     # (frame id, landmark ids), newest last
        self.dropped_short = 0

    def _keyframe_ids(self) -> set:
        out = set()
        for _, ids in self.keyframes[-self.n_keyframes:]:
            out |= ids
        return out

    def associate(self, frame_id: int, raw_stamp: float, observations, intrinsics=None) -> AssociationResult:
        """Add the observations of a new frame.

        ``observations`` is a sequence of objects with ``ids``, ``uv`` and ``cam``
        (one per camera).  Pixels within ``margin`` of the border are ignored
        when ``intrinsics`` (a per-camera sequence) is given.
        """
        if self.last_frame is not None and frame_id <= self.last_frame:
            raise ValueError("frame ids must increase")
        kf_ids = self._keyframe_ids()
        seen = set()
        matched = []
        extended = 0
        stale = []
        for obs in observations:
            uv = np.asarray(obs.uv, dtype=float).reshape(-1, 2)
            ids = np.asarray(obs.ids)
            if intrinsics is not None:
                keep = intrinsics[obs.cam].in_image(uv, self.margin)
                uv, ids = uv[keep], ids[keep]
            m_mask = np.zeros(len(ids), dtype=bool)
            for n, (lid, px) in enumerate(zip(ids.tolist(), uv)):
                o = Observation(frame_id, obs.cam, px.copy(), raw_stamp)
                tr = self.tracks.get(lid)
                if tr is not None and (lid in self.last_ids or lid in kf_ids or lid in seen):
                    tr.add(o)
                    extended += 1
                else:
                    if tr is not None:
                        # left the re-association set since it was last checked
                        stale.append(self._finish(lid))
                    self.tracks[lid] = FeatureTrack(lid, [o])
                seen.add(lid)
                m_mask[n] = lid in kf_ids
            matched.append((uv[m_mask], uv))
        self.last_frame = frame_id
        self.last_ids = seen
        completed = [t for t in stale if t is not None] + self._collect(seen)
        return AssociationResult(completed, matched, extended)

    def _finish(self, lid) -> FeatureTrack | None:
        tr = self.tracks.pop(lid)
        if len(tr) >= self.min_length:
            return tr
        self.dropped_short += 1
        return None

    def _collect(self, seen) -> list:
        kf_ids = self._keyframe_ids()
        done = []
        for lid in [l for l in self.tracks if l not in seen and l not in kf_ids]:
            tr = self._finish(lid)
            if tr is not None:
                done.append(tr)
        return done

    def add_keyframe(self, frame_id: int) -> None:
        """Register ``frame_id`` (normally the last associated frame) as a keyframe."""
        ids = {lid for lid, tr in self.tracks.items()
               if tr.observations and tr.observations[-1].frame_id == frame_id}
        self.keyframes.append((frame_id, ids))
        if len(self.keyframes) > self.n_keyframes:
            self.keyframes = self.keyframes[-self.n_keyframes:]

    def remove_frames(self, frame_ids) -> None:
        """Forget observations of frames that left the estimator's window."""
        frame_ids = set(frame_ids)
        for lid in list(self.tracks):
            tr = self.tracks[lid]
            tr.remove_frames(frame_ids)
            if not tr.observations:
                del self.tracks[lid]

    def flush(self) -> list:
        """Complete every remaining track (end of data)."""
        done = []
        for lid in list(self.tracks):
            tr = self._finish(lid)
            if tr is not None:
                done.append(tr)
        return done


def associate(frame_id, raw_stamp, observations, tracker: Tracker, intrinsics=None):
    """Functional wrapper around :meth:`Tracker.associate`."""
    return tracker.associate(frame_id, raw_stamp, observations, intrinsics)


def dump_tracks(path, tracks) -> None:
    """Debug CSV with one line per observation."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["landmark_id", "frame_id", "cam_id", "u", "v", "t_raw"])
        for tr in tracks:
            for o in tr.observations:
                w.writerow([tr.landmark_id, o.frame_id, o.cam, f"{o.uv[0]:.4f}",
                            f"{o.uv[1]:.4f}", f"{o.raw_stamp:.9f}"])
