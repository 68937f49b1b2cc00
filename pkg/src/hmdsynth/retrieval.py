"""Reference-frame retrieval from the pre-captured dataset."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import RigidTransform

GIMBAL_EPS = 1e-9


class RetrievalError(ValueError):
    pass


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(b):
    c, s = np.cos(b), np.sin(b)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(g):
    c, s = np.cos(g), np.sin(g)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def compose_angles(pitch: float, yaw: float, roll: float) -> np.ndarray:
    """``R = Rx(pitch) Ry(yaw) Rz(roll)`` (intrinsic x-y-z)."""
    return _rx(pitch) @ _ry(yaw) @ _rz(roll)


def pose_angles(T) -> tuple[float, float, float]:
    """Intrinsic x-y-z Euler angles ``(pitch, yaw, roll)`` of a rotation or rigid transform.

    At gimbal lock (``|yaw| = pi/2``) roll is set to 0 and the remaining
    rotation goes into pitch.
    """
    R = np.asarray(getattr(T, "rotation", T), dtype=float)
    s = np.clip(R[0, 2], -1.0, 1.0)
    yaw = float(np.arcsin(s))
    if 1.0 - abs(s) < GIMBAL_EPS:
        return float(np.arctan2(R[2, 1], R[1, 1])), yaw, 0.0
    return float(np.arctan2(-R[1, 2], R[2, 2])), yaw, float(np.arctan2(-R[0, 1], R[0, 0]))


@dataclass
class IndexEntry:
    frame_id: int
    angles: np.ndarray  # (pitch, yaw, roll) radians
    landmarks: np.ndarray  # flattened 2D landmarks, px
    timestamp: float  # seconds
    image: str = ""
    extra: dict = field(default_factory=dict)


@dataclass
class DatasetIndex:
    entries: list
    root: Path | None = None

    def __post_init__(self):
        ts = [e.timestamp for e in self.entries]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise RetrievalError("timestamps must be strictly increasing")
        lens = {len(np.ravel(e.landmarks)) for e in self.entries}
        if len(lens) > 1:
            raise RetrievalError("landmark vectors must all have the same length")
        self.ids = np.array([e.frame_id for e in self.entries], dtype=np.int64)
        self.H = np.array([np.asarray(e.angles, float) for e in self.entries]).reshape(len(self.entries), 3)
        n_lm = lens.pop() if lens else 0
        self.L = np.array([np.ravel(e.landmarks).astype(float) for e in self.entries]).reshape(len(self.entries), n_lm)
        self.S = np.array(ts, dtype=float)

    def __len__(self):
        return len(self.entries)

    def by_id(self, frame_id: int) -> IndexEntry:
        return self.entries[int(np.flatnonzero(self.ids == frame_id)[0])]

    @classmethod
    def load(cls, manifest_path) -> "DatasetIndex":
        """Read a manifest whose entries carry ``head_to_face`` (or ``angles``), ``landmarks`` and ``timestamp``."""
        path = Path(manifest_path)
        data = json.loads(path.read_text())
        entries = []
        for e in data["entries"]:
            if "angles" in e:
                ang = np.asarray(e["angles"], float)
            else:
                ang = np.array(pose_angles(RigidTransform.from_dict(e["head_to_face"])))
            extra = {k: v for k, v in e.items() if k not in ("frame_id", "angles", "landmarks", "timestamp", "image")}
            entries.append(IndexEntry(int(e["frame_id"]), ang, np.asarray(e["landmarks"], float),
                                      float(e["timestamp"]), e.get("image", ""), extra))
        return cls(entries, path.parent)


@dataclass
class RetrievalQuery:
    angles: np.ndarray
    previous_landmarks: np.ndarray | None = None
    previous_timestamp: float | None = None
    w1: float = 1e-4
    w2: float = 1e-2

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise RetrievalError("weights must be non-negative")

    @property
    def has_previous(self) -> bool:
        return self.previous_landmarks is not None and self.previous_timestamp is not None


def retrieval_distances(index: DatasetIndex, q: RetrievalQuery) -> np.ndarray:
    """Distance of every entry: pose term plus, after the first frame, the weighted
    landmark and time gaps to the previously selected reference."""
    D = ((index.H - np.asarray(q.angles, float)) ** 2).sum(axis=1)
    if q.has_previous:
        D = D + q.w1 * ((index.L - np.ravel(q.previous_landmarks)) ** 2).sum(axis=1)
        D = D + q.w2 * (index.S - q.previous_timestamp) ** 2
    return D


def retrieve_reference(index: DatasetIndex, q: RetrievalQuery) -> int:
    """Frame id minimising the retrieval distance; ties go to the smallest frame id."""
    if len(index) == 0:
        raise RetrievalError("empty dataset index")
    D = retrieval_distances(index, q)
    best = D.min()
    return int(index.ids[D == best].min())
