"""Reconstruction metrics: windowed SSIM, Frechet video motion distance, N-way top-K accuracy."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data.types import VideoClip
from .errors import ValidationError

LUMA = np.array([0.299, 0.587, 0.114])


# ---------------------------------------------------------------- SSIM

@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    k1: float = 0.01
    k2: float = 0.03
    L: float = 1.0

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValidationError("SSIM window size must be odd and >= 3")
        if not (self.k1 > 0 and self.k2 > 0 and self.L > 0):
            raise ValidationError("SSIM constants k1, k2 and L must be positive")


def to_gray(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3 and frame.shape[-1] == 3:
        return frame @ LUMA
    if frame.ndim == 2:
        return frame
    raise ValidationError(f"expected [H, W] or [H, W, 3] frame, got {frame.shape}")


def ssim_map(frame_a: np.ndarray, frame_b: np.ndarray, params: SsimParams = SsimParams()) -> np.ndarray:
    """SSIM of every valid (stride-1) uniform window."""
    a, b = to_gray(frame_a), to_gray(frame_b)
    if a.shape != b.shape:
        raise ValidationError(f"SSIM needs equal frame shapes, got {a.shape} and {b.shape}")
    w = params.window_size
    if min(a.shape) < w:
        raise ValidationError(f"frame {a.shape} smaller than the {w}x{w} SSIM window")
    wa = sliding_window_view(a, (w, w))
    wb = sliding_window_view(b, (w, w))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(-2, -1))
    var_b = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    c1 = (params.k1 * params.L) ** 2
    c2 = (params.k2 * params.L) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(frame_a: np.ndarray, frame_b: np.ndarray, params: SsimParams = SsimParams()) -> float:
    return float(ssim_map(frame_a, frame_b, params).mean())


# ---------------------------------------------------------------- motion features / FVMD

def _offsets(search: int) -> list[tuple[int, int]]:
    offs = [(dy, dx) for dy in range(-search, search + 1) for dx in range(-search, search + 1)]
    # ties between equal matching costs resolve to the smallest displacement
    return sorted(offs, key=lambda o: (abs(o[0]) + abs(o[1]), o))


def block_matching(prev: np.ndarray, nxt: np.ndarray, block: int = 8, search: int = 4) -> np.ndarray:
    """Displacement (dy, dx) of every block of ``prev`` within ``nxt``, shape [rows, cols, 2].

    Candidates beyond the frame border read edge-replicated pixels.
    """
    a, b = to_gray(prev), to_gray(nxt)
    rows, cols = a.shape[0] // block, a.shape[1] // block
    if rows == 0 or cols == 0:
        raise ValidationError(f"frame {a.shape} smaller than one {block}x{block} block")
    a = a[:rows * block, :cols * block]
    padded = np.pad(b, search, mode="edge")
    offs = _offsets(search)
    costs = np.empty((len(offs), rows, cols))
    for i, (dy, dx) in enumerate(offs):
        shifted = padded[search + dy: search + dy + rows * block, search + dx: search + dx + cols * block]
        diff = np.abs(a - shifted).reshape(rows, block, cols, block)
        costs[i] = diff.sum(axis=(1, 3))
    best = np.argmin(costs, axis=0)
    return np.asarray(offs, dtype=np.float64)[best]


def motion_features(video: VideoClip | np.ndarray,
                    extractor: Callable[[np.ndarray, np.ndarray], np.ndarray] = block_matching) -> np.ndarray:
    """One flattened motion descriptor per adjacent frame pair: [N - 1, feature_dim]."""
    frames = video.frames if isinstance(video, VideoClip) else np.asarray(video)
    if frames.shape[0] < 2:
        raise ValidationError("motion features need at least two frames")
    return np.stack([extractor(frames[i], frames[i + 1]).reshape(-1) for i in range(frames.shape[0] - 1)])


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray


def _psd(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    return np.clip(vals, 0.0, None), vecs


def fit_gaussian(features: np.ndarray) -> GaussianSummary:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValidationError("a Gaussian fit needs a [rows >= 2, dim] feature matrix")
    if not np.all(np.isfinite(features)):
        raise ValidationError("motion features contain NaN or Inf")
    vals, vecs = _psd(np.atleast_2d(np.cov(features, rowvar=False)))
    return GaussianSummary(features.mean(axis=0), (vecs * vals) @ vecs.T)


def frechet_distance(real: GaussianSummary, gen: GaussianSummary) -> float:
    """||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r S_g)^(1/2)).

    The trace of the root is taken from the symmetric form S_r^(1/2) S_g S_r^(1/2),
    which shares its eigenvalues with S_r S_g.
    """
    if real.mean.shape != gen.mean.shape:
        raise ValidationError(f"feature dims differ: {real.mean.shape} vs {gen.mean.shape}")
    vals, vecs = _psd(real.cov)
    root_r = (vecs * np.sqrt(vals)) @ vecs.T
    inner_vals, _ = _psd(root_r @ gen.cov @ root_r)
    tr_root = np.sqrt(inner_vals).sum()
    diff = real.mean - gen.mean
    value = diff @ diff + np.trace(real.cov) + np.trace(gen.cov) - 2.0 * tr_root
    return float(max(value, 0.0))


def fvmd(real_features: np.ndarray, gen_features: np.ndarray) -> float:
    real_features, gen_features = np.asarray(real_features), np.asarray(gen_features)
    if real_features.ndim != 2 or gen_features.ndim != 2 or real_features.shape[1] != gen_features.shape[1]:
        raise ValidationError("FVMD needs two [rows, dim] feature sets with the same dim")
    return frechet_distance(fit_gaussian(real_features), fit_gaussian(gen_features))


# ---------------------------------------------------------------- N-way top-K

def n_way_top_k(scores: np.ndarray, true_label: int, N: int, K: int, rng: np.random.Generator) -> bool:
    """Is the true class among the top K once scores are restricted to it plus N-1 random distractors?"""
    scores = np.asarray(scores)
    num_classes = scores.shape[-1]
    if not 1 <= K <= N:
        raise ValidationError(f"need 1 <= K <= N, got K={K}, N={N}")
    if N > num_classes:
        raise ValidationError(f"{N}-way evaluation with only {num_classes} classes")
    if not 0 <= true_label < num_classes:
        raise ValidationError(f"label {true_label} outside [0, {num_classes})")
    others = np.delete(np.arange(num_classes), true_label)
    classes = np.concatenate([[true_label], rng.choice(others, size=N - 1, replace=False)])
    tie_break = rng.random(N)
    order = np.lexsort((tie_break, -scores[classes]))
    return bool(np.flatnonzero(order == 0)[0] < K)


def n_way_top_k_accuracy(score_rows: np.ndarray, labels: Sequence[int], N: int, K: int,
                         rng: np.random.Generator) -> float:
    hits = [n_way_top_k(s, int(y), N, K, rng) for s, y in zip(score_rows, labels)]
    return float(np.mean(hits)) if hits else 0.0


# ---------------------------------------------------------------- report

@dataclass(frozen=True)
class MetricRow:
    class_count: int
    basis: str
    metric: str
    mean: float
    std: float
    std_source: str


@dataclass
class EvalReport:
    rows: list[MetricRow] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    CSV_FIELDS = ("class_count", "basis", "metric", "mean", "std")

    def add(self, *rows: MetricRow) -> None:
        self.rows.extend(rows)

    def extend(self, other: "EvalReport") -> None:
        self.rows.extend(other.rows)

    def cell(self, class_count: int, basis: str, metric: str) -> MetricRow:
        for row in self.rows:
            if (row.class_count, row.basis, row.metric) == (class_count, basis, metric):
                return row
        raise KeyError((class_count, basis, metric))

    def section(self, class_count: int, basis: str | None = None) -> list[MetricRow]:
        return [r for r in self.rows if r.class_count == class_count and (basis is None or r.basis == basis)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_FIELDS)
        for r in self.rows:
            writer.writerow([r.class_count, r.basis, r.metric, repr(float(r.mean)), repr(float(r.std))])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "rows": [asdict(r) for r in self.rows]}, indent=1, sort_keys=True)

    def save(self, directory: str | Path, stem: str = "report") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = directory / f"{stem}.csv", directory / f"{stem}.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.to_json())
        return csv_path, json_path

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        data = json.loads(text)
        return cls([MetricRow(**r) for r in data["rows"]], data.get("meta", {}))


def _sample_seed(base: int, clip: np.ndarray, label: int) -> np.random.SeedSequence:
    digest = hashlib.sha256(np.ascontiguousarray(clip, dtype=np.float32).tobytes()).digest()
    return np.random.SeedSequence([base, int(label), int.from_bytes(digest[:8], "little")])


def evaluate_reconstructions(gt_clips: Sequence[VideoClip], gen_clips: Sequence[VideoClip], labels: Sequence[int],
                             classifiers: tuple[Callable, Callable], rng: np.random.Generator, *,
                             class_count: int, ways: Sequence[int] = (2, 40), repeats: int = 20,
                             ssim_params: SsimParams = SsimParams(),
                             motion_extractor: Callable = block_matching) -> EvalReport:
    """Video/frame semantic accuracy, FVMD and SSIM for paired ground-truth and generated clips.

    ``classifiers`` is (frame_scores, video_scores): frame_scores maps [M, H, W, 3] to [M, classes],
    video_scores maps [B, N, H, W, 3] to [B, classes]. Distractor draws are seeded per sample from
    ``rng`` and the sample's ground-truth content, so reordering the pairs leaves the result unchanged.
    Semantic stds are across the ``repeats`` distractor draws; SSIM std is across clips.
    """
    if len(gt_clips) != len(gen_clips) or len(gt_clips) != len(labels):
        raise ValidationError("ground-truth clips, generated clips and labels must be paired")
    if not gt_clips:
        raise ValidationError("nothing to evaluate")
    frame_fn, video_fn = classifiers
    labels = [int(y) for y in labels]
    base = int(rng.integers(2 ** 62))
    gen_frames = np.stack([c.frames for c in gen_clips])  # [B, N, H, W, 3]
    b, n = gen_frames.shape[:2]
    video_scores = np.asarray(video_fn(gen_frames))
    frame_scores = np.asarray(frame_fn(gen_frames.reshape(b * n, *gen_frames.shape[2:]))).reshape(b, n, -1)
    seeds = [_sample_seed(base, gt.frames, y) for gt, y in zip(gt_clips, labels)]

    video_rows, frame_rows = [], []
    for ways_n in ways:
        video_hits = np.zeros((b, repeats))
        frame_hits = np.zeros((b, n, repeats))
        for i, (seq, y) in enumerate(zip(seeds, labels)):
            streams = [np.random.default_rng(s) for s in seq.spawn(1 + n)]
            for r in range(repeats):
                video_hits[i, r] = n_way_top_k(video_scores[i], y, ways_n, 1, streams[0])
                for f in range(n):
                    frame_hits[i, f, r] = n_way_top_k(frame_scores[i, f], y, ways_n, 1, streams[1 + f])
        # per-repetition hit counts are integers, so equal repetitions give an exact zero std
        v_hits = video_hits.sum(axis=0)
        f_hits = frame_hits.sum(axis=(0, 1))
        video_rows.append(MetricRow(class_count, "video", f"{ways_n}-way", float(v_hits.mean() / b),
                                    float(v_hits.std() / b), "distractor-draws"))
        frame_rows.append(MetricRow(class_count, "frame", f"{ways_n}-way", float(f_hits.mean() / (b * n)),
                                    float(f_hits.std() / (b * n)), "distractor-draws"))

    real_m = np.concatenate([motion_features(c, motion_extractor) for c in gt_clips])
    gen_m = np.concatenate([motion_features(c, motion_extractor) for c in gen_clips])
    video_rows.append(MetricRow(class_count, "video", "FVMD", fvmd(real_m, gen_m), 0.0, "single-estimate"))
    per_clip = np.array([np.mean([ssim(g, r, ssim_params) for g, r in zip(gt.frames, gen.frames)])
                         for gt, gen in zip(gt_clips, gen_clips)])
    frame_rows.append(MetricRow(class_count, "frame", "SSIM", float(per_clip.mean()), float(per_clip.std()),
                                "clips"))
    return EvalReport(video_rows + frame_rows)
