"""Per-chunk quality scoring and the VDE (video drift error) metric family.

All five quality dimensions use closed-form pixel-statistics proxies so the
whole evaluation is deterministic and dependency-free; the VDE layer itself is
agnostic to how the per-chunk scores were produced. Drift is measured against
the FIRST chunk: vde = 100 * sum_{t>=2} w_t*|q_t - q_1| / (sum_{t>=2} w_t * |q_1|).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError

_EPS = 1e-9


@dataclass
class ChunkedVideo:
    frames: list  # 2-D grayscale arrays, all the same shape
    chunk_len: int

    def __post_init__(self):
        if self.chunk_len < 1:
            raise ConfigError("chunk_len must be >= 1")
        if not self.frames:
            raise ConfigError("no frames")
        shape = np.asarray(self.frames[0]).shape
        for f in self.frames:
            if np.asarray(f).shape != shape:
                raise DimensionError("all frames must share one shape")

    @property
    def num_chunks(self) -> int:
        return len(self.frames) // self.chunk_len

    def chunk(self, t: int) -> list:
        if not 0 <= t < self.num_chunks:
            raise ConfigError(f"chunk {t} out of range")
        lo = t * self.chunk_len
        return self.frames[lo:lo + self.chunk_len]


@dataclass
class ScoreSeries:
    metric_name: str
    values: list
    weights: list

    def validate(self):
        if len(self.values) != len(self.weights):
            raise DimensionError("values and weights must align")
        if any(not np.isfinite(v) for v in self.values):
            raise ConfigError("non-finite score value")
        if any(w < 0 for w in self.weights):
            raise ConfigError("negative weight")
        if sum(self.weights) <= 0:
            raise ConfigError("weights sum to zero")


@dataclass
class VdeReport:
    vde_clarity: float
    vde_motion: float
    vde_aesthetic: float
    vde_background: float
    vde_subject: float
    mean_clarity: float
    mean_motion: float
    mean_aesthetic: float
    mean_background: float
    mean_subject: float

    VDE_FIELDS = ("vde_clarity", "vde_motion", "vde_aesthetic",
                  "vde_background", "vde_subject")

    def to_text(self) -> str:
        return "".join(f"{k}\t{v:.6f}\n" for k, v in vars(self).items())

    def to_dict(self) -> dict:
        return dict(vars(self))


def vde(series: ScoreSeries) -> float:
    series.validate()
    if len(series.values) < 2:
        raise ConfigError("need at least 2 chunks for drift")
    q1 = float(series.values[0])
    if abs(q1) < _EPS:
        raise ConfigError(f"degenerate reference chunk score {q1}")
    num = sum(w * abs(float(q) - q1)
              for q, w in zip(series.values[1:], series.weights[1:]))
    den = sum(series.weights[1:]) * abs(q1)
    if den <= 0:
        raise ConfigError("tail weights sum to zero")
    return 100.0 * num / den


# -- per-chunk scorers -------------------------------------------------------


def _as_float(frame) -> np.ndarray:
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"frame must be 2-D, got shape {arr.shape}")
    return arr


def _laplacian(frame: np.ndarray) -> np.ndarray:
    # 3x3 Laplacian [[0,1,0],[1,-4,1],[0,1,0]], valid region only
    c = frame[1:-1, 1:-1]
    return (frame[:-2, 1:-1] + frame[2:, 1:-1]
            + frame[1:-1, :-2] + frame[1:-1, 2:] - 4.0 * c)


def score_clarity(frames) -> float:
    """Mean over frames of the variance of the Laplacian response."""
    if not frames:
        raise ConfigError("empty chunk")
    out = []
    for f in frames:
        lap = _laplacian(_as_float(f))
        out.append(float(lap.var()) if lap.size else 0.0)
    return float(np.mean(out))


def score_motion(frames) -> float:
    """Mean absolute pixel difference between consecutive frames."""
    if len(frames) < 2:
        raise ConfigError("need >= 2 frames for motion")
    diffs = [float(np.abs(_as_float(a) - _as_float(b)).mean())
             for a, b in zip(frames[:-1], frames[1:])]
    return float(np.mean(diffs))


def score_aesthetic(frames) -> float:
    """Mean per-frame intensity standard deviation (contrast proxy)."""
    if not frames:
        raise ConfigError("empty chunk")
    return float(np.mean([_as_float(f).std() for f in frames]))


def _region_histogram(frames, region: str, margin: float = 0.25) -> np.ndarray:
    hist = np.zeros(16, dtype=np.float64)
    for f in frames:
        arr = _as_float(f)
        h, w = arr.shape
        mh, mw = max(1, int(h * margin)), max(1, int(w * margin))
        if region == "center":
            patch = arr[mh:h - mh, mw:w - mw]
        else:  # border: everything outside the center box
            mask = np.ones((h, w), dtype=bool)
            mask[mh:h - mh, mw:w - mw] = False
            patch = arr[mask]
        hist += np.histogram(patch, bins=16, range=(0.0, 256.0))[0]
    return hist


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < _EPS or nb < _EPS:
        raise ConfigError("degenerate all-zero histogram")
    return float(np.dot(a, b) / (na * nb))


def score_background(frames, ref_frames) -> float:
    """Cosine similarity of border-region histograms vs the reference chunk."""
    return _cosine(_region_histogram(frames, "border"),
                   _region_histogram(ref_frames, "border"))


def score_subject(frames, ref_frames) -> float:
    """Cosine similarity of center-region histograms vs the reference chunk."""
    return _cosine(_region_histogram(frames, "center"),
                   _region_histogram(ref_frames, "center"))


def _weights(values, scheme: str):
    if scheme == "uniform":
        return [1.0] * len(values)
    if scheme == "wmape":
        # WMAPE-style: weight each chunk by |q_t| normalized by |q_1|
        ref = max(abs(float(values[0])), _EPS)
        return [abs(float(v)) / ref for v in values]
    raise ConfigError(f"unknown weight scheme {scheme!r}")


def evaluate(video: ChunkedVideo, weight_scheme: str = "uniform") -> VdeReport:
    T = video.num_chunks
    if T < 2:
        raise ConfigError(f"need >= 2 chunks, have {T}")
    chunks = [video.chunk(t) for t in range(T)]
    ref = chunks[0]
    per_metric = {
        "clarity": [score_clarity(c) for c in chunks],
        "motion": [score_motion(c) for c in chunks],
        "aesthetic": [score_aesthetic(c) for c in chunks],
        "background": [score_background(c, ref) for c in chunks],
        "subject": [score_subject(c, ref) for c in chunks],
    }
    vdes = {}
    for name, values in per_metric.items():
        series = ScoreSeries(name, values, _weights(values, weight_scheme))
        vdes[name] = vde(series)
    return VdeReport(
        vde_clarity=vdes["clarity"],
        vde_motion=vdes["motion"],
        vde_aesthetic=vdes["aesthetic"],
        vde_background=vdes["background"],
        vde_subject=vdes["subject"],
        mean_clarity=float(np.mean(per_metric["clarity"])),
        mean_motion=float(np.mean(per_metric["motion"])),
        mean_aesthetic=float(np.mean(per_metric["aesthetic"])),
        mean_background=float(np.mean(per_metric["background"])),
        mean_subject=float(np.mean(per_metric["subject"])),
    )


# -- manifests ---------------------------------------------------------------


@dataclass
class ManifestEntry:
    video_id: str
    source: str
    object_class: str
    duration_s: float
    split: str | None = None  # "train" | "eval" once assigned


@dataclass
class Manifest:
    entries: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = []
        for e in self.entries:
            cols = [e.video_id, e.source, e.object_class, f"{e.duration_s:g}"]
            if e.split:
                cols.append(e.split)
            lines.append("\t".join(cols))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Manifest":
        entries = []
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) < 4:
                raise ConfigError(f"bad manifest line {line!r}")
            entries.append(ManifestEntry(
                cols[0], cols[1], cols[2], float(cols[3]),
                cols[4] if len(cols) > 4 else None))
        return cls(entries)


def split_manifest(manifest: Manifest, seed: int) -> Manifest:
    """Deterministic 80/20 split, stratified by object class.

    Entries are ordered by sha256(seed:id) within each class and the first
    80% of each class goes to train (largest-remainder rounding keeps the
    global split exactly 80/20), so class proportions survive the split
    instead of drifting with sampling noise.
    """
    n = len(manifest.entries)
    if n < 5:
        raise ConfigError(f"need >= 5 entries to split, have {n}")

    def key(entry):
        return hashlib.sha256(f"{seed}:{entry.video_id}".encode()).hexdigest()

    by_class: dict[str, list] = {}
    for e in manifest.entries:
        by_class.setdefault(e.object_class, []).append(e)
    n_train = n * 4 // 5
    quota = {}
    remainders = []
    for cls, entries in sorted(by_class.items()):
        exact = len(entries) * n_train / n
        quota[cls] = int(exact)
        remainders.append((-(exact - int(exact)), cls))
    for _, cls in sorted(remainders)[: n_train - sum(quota.values())]:
        quota[cls] += 1

    out = []
    for cls, entries in by_class.items():
        ordered = sorted(entries, key=key)
        for i, e in enumerate(ordered):
            out.append(ManifestEntry(e.video_id, e.source, e.object_class,
                                     e.duration_s,
                                     "train" if i < quota[cls] else "eval"))
    out.sort(key=lambda e: e.video_id)
    return Manifest(out)


# -- frame/report file formats -----------------------------------------------

_FRAME_FILE_HEAD = struct.Struct("<HH")  # width, height


def write_frame(path, frame):
    arr = np.asarray(frame, dtype=np.uint8)
    if arr.ndim != 2:
        raise DimensionError("frame must be 2-D grayscale")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(_FRAME_FILE_HEAD.pack(w, h))
        fh.write(arr.tobytes())


def read_frame(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_FRAME_FILE_HEAD.size)
        if len(head) < _FRAME_FILE_HEAD.size:
            raise ConfigError(f"truncated frame file {path}")
        w, h = _FRAME_FILE_HEAD.unpack(head)
        data = fh.read()
    if len(data) != w * h:
        raise ConfigError(f"frame file {path}: expected {w * h} pixels, "
                          f"got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def load_video(directory, chunk_len: int) -> ChunkedVideo:
    """Reads every *.frame file in name order."""
    import os

    names = sorted(n for n in os.listdir(directory) if n.endswith(".frame"))
    if not names:
        raise ConfigError(f"no .frame files in {directory}")
    frames = [read_frame(os.path.join(directory, n)) for n in names]
    return ChunkedVideo(frames, chunk_len)


def write_report(report: VdeReport, text_path, json_path):
    with open(text_path, "w") as fh:
        fh.write(report.to_text())
    with open(json_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
