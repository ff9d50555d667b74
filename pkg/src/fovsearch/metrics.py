"""Scanpath evaluation: alignment scores, conditional saliency metrics, MAE.

Two scanpaths are compared by global alignment of token strings: fixation
cluster ids for the plain sequence score, fixated object categories for the
semantic variant.  Conditional metrics (cIG, cNSS) teacher-force the model on
ground-truth prefixes and score its next-fixation distribution at the true
cell.  Length MAE measures termination quality.
"""

from __future__ import annotations

import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import ActionGrid, Fixation, Scanpath, SearchTrial, fixation_to_action


@dataclass(frozen=True)
class AlignmentScoring:
    match: float = 1.0
    mismatch: float = 0.0
    gap: float = 0.0


def nw_align(a: Sequence, b: Sequence, scoring: AlignmentScoring = AlignmentScoring()
             ) -> float:
    """Normalized global alignment score between two token sequences.

    Classic dynamic program over the (len+1)x(len+1) table; the raw score is
    divided by the longer length.  Two empty sequences score 1 by convention.
    """
    la, lb = len(a), len(b)
    if la == 0 and lb == 0:
        return 1.0
    prev = [scoring.gap * j for j in range(lb + 1)]
    for i in range(1, la + 1):
        cur = [scoring.gap * i] + [0.0] * lb
        ai = a[i - 1]
        for j in range(1, lb + 1):
            diag = prev[j - 1] + (scoring.match if ai == b[j - 1] else scoring.mismatch)
            up = prev[j] + scoring.gap
            left = cur[j - 1] + scoring.gap
            cur[j] = diag if diag >= up and diag >= left else (up if up >= left else left)
        prev = cur
    return prev[lb] / max(la, lb)


@dataclass
class ClusterModel:
    centers: np.ndarray   # (k, 2) pixel coordinates
    bandwidth: float

    def assign(self, fixations: Sequence[Fixation]) -> list[int]:
        pts = np.asarray([(f[0], f[1]) for f in fixations], dtype=float)
        d = np.linalg.norm(pts[:, None, :] - self.centers[None, :, :], axis=2)
        return [int(i) for i in np.argmin(d, axis=1)]


def cluster_fixations(fixations: Sequence[Fixation], bandwidth: float = 64.0,
                      max_iter: int = 100, tol: float = 0.1) -> ClusterModel:
    """Mean-shift with a flat circular kernel over fixation locations.

    Modes closer than half a bandwidth are merged in input order, which keeps
    the procedure deterministic.
    """
    if len(fixations) == 0:
        raise ValueError("need at least one fixation to cluster")
    pts = np.asarray([(f[0], f[1]) for f in fixations], dtype=float)
    modes = pts.copy()
    for _ in range(max_iter):
        d = np.linalg.norm(modes[:, None, :] - pts[None, :, :], axis=2)
        masks = d < bandwidth
        new = np.stack([pts[m].mean(axis=0) if m.any() else modes[i]
                        for i, m in enumerate(masks)])
        shift = np.linalg.norm(new - modes, axis=1).max()
        modes = new
        if shift < tol:
            break
    centers: list[np.ndarray] = []
    for m in modes:
        if not any(np.linalg.norm(m - c) < bandwidth / 2.0 for c in centers):
            centers.append(m)
    return ClusterModel(np.asarray(centers), bandwidth)


def sequence_score(pred: Scanpath, gt: Scanpath,
                   clusters: Optional[ClusterModel] = None,
                   bandwidth: float = 64.0,
                   scoring: AlignmentScoring = AlignmentScoring()) -> float:
    """Alignment score over fixation-cluster id strings.

    Without a precomputed cluster model, one is fitted on the union of the two
    scanpaths so both live in a single id space.
    """
    if clusters is None:
        clusters = cluster_fixations(list(pred.fixations) + list(gt.fixations),
                                     bandwidth)
    return nw_align(clusters.assign(pred.fixations), clusters.assign(gt.fixations),
                    scoring)


def semantic_sequence(scanpath: Scanpath, label_map: np.ndarray) -> list[int]:
    """Object-category token per fixation (0 is the background token)."""
    h, w = label_map.shape
    tokens = []
    for f in scanpath.fixations:
        x = min(int(f[0]), w - 1)
        y = min(int(f[1]), h - 1)
        tokens.append(int(label_map[y, x]))
    return tokens


def semantic_sequence_score(pred: Scanpath, gt: Scanpath, label_map: np.ndarray,
                            scoring: AlignmentScoring = AlignmentScoring()) -> float:
    """Alignment score over fixated object-category sequences."""
    return nw_align(semantic_sequence(pred, label_map),
                    semantic_sequence(gt, label_map), scoring)


def truncated_score(pred: Scanpath, gt: Scanpath, k: int,
                    clusters: Optional[ClusterModel] = None,
                    bandwidth: float = 64.0,
                    scoring: AlignmentScoring = AlignmentScoring()) -> float:
    """Sequence score after truncating both paths to the first k new fixations."""
    return sequence_score(pred.truncated(k), gt.truncated(k), clusters,
                          bandwidth, scoring)


# ---------------------------------------------------------------------------
# Conditional metrics
# ---------------------------------------------------------------------------

@dataclass
class DensityBaseline:
    """Per-task fixation density maps on the action grid; strictly positive."""

    maps: dict[str, np.ndarray]
    grid: ActionGrid = field(default_factory=ActionGrid)

    def get(self, task: str) -> np.ndarray:
        if task in self.maps:
            return self.maps[task]
        uniform = np.full((self.grid.rows, self.grid.cols),
                          1.0 / (self.grid.rows * self.grid.cols))
        return uniform


def density_baseline(trials: Sequence[SearchTrial],
                     grid: ActionGrid = ActionGrid(), eps: float = 1e-3,
                     blur_sigma: float = 1.0,
                     tasks: Optional[Sequence[str]] = None) -> DensityBaseline:
    """Task-specific density of training fixations on the grid.

    Histograms of new fixations (the forced initial fixation is protocol, not
    behavior), blurred by a Gaussian of `blur_sigma` cells, floored by `eps`
    and renormalized, so every cell has positive probability.
    """
    from scipy.ndimage import gaussian_filter

    if tasks is None:
        tasks = sorted({t.task for t in trials})
    counts = {t: np.zeros((grid.rows, grid.cols)) for t in tasks}
    for tr in trials:
        if tr.task not in counts:
            continue
        for f in tr.scanpath.fixations[1:]:
            a = fixation_to_action(f, grid)
            counts[tr.task][a // grid.cols, a % grid.cols] += 1
    maps = {}
    for t, c in counts.items():
        total = c.sum()
        if total > 0:
            c = c / total
            if blur_sigma > 0:
                c = gaussian_filter(c, blur_sigma, mode="constant")
        c = c + eps
        maps[t] = c / c.sum()
    return DensityBaseline(maps, grid)


def conditional_ig(predictor: Callable, trials: Sequence[SearchTrial],
                   baseline: DensityBaseline,
                   grid: ActionGrid = ActionGrid()) -> float:
    """Mean log2 probability gain of the model over the task density baseline.

    `predictor(trial, prefix_fixations)` must return a probability vector over
    grid cells.  Every ground-truth fixation after the first is scored with
    the model conditioned on the true prefix.
    """
    gains = []
    for trial in trials:
        fixes = trial.scanpath.fixations
        base = baseline.get(trial.task).ravel()
        for t in range(1, len(fixes)):
            probs = np.asarray(predictor(trial, fixes[:t]), dtype=np.float64).ravel()
            cell = fixation_to_action(fixes[t], grid)
            gains.append(np.log2(max(probs[cell], 1e-30)) - np.log2(base[cell]))
    if not gains:
        raise ValueError("no fixations to score")
    return float(np.mean(gains))


def conditional_nss(predictor: Callable, trials: Sequence[SearchTrial],
                    grid: ActionGrid = ActionGrid()) -> float:
    """Mean z-scored map value at the true next fixation (teacher forcing).

    A zero-variance (uniform) prediction contributes zero by convention.
    """
    scores = []
    for trial in trials:
        fixes = trial.scanpath.fixations
        for t in range(1, len(fixes)):
            probs = np.asarray(predictor(trial, fixes[:t]), dtype=np.float64).ravel()
            std = probs.std()
            if std <= 1e-12 * max(1.0, abs(probs.mean())):
                scores.append(0.0)
                continue
            z = (probs - probs.mean()) / std
            scores.append(float(z[fixation_to_action(fixes[t], grid)]))
    if not scores:
        raise ValueError("no fixations to score")
    return float(np.mean(scores))


def scanpath_length_mae(preds: Sequence[SearchTrial], gts: Sequence[SearchTrial]) -> float:
    """Per image+task: mean over subjects of |len(pred) - len(gt)|; then averaged."""
    pred_len = {(p.image_id, p.task): len(p.scanpath) for p in preds}
    groups: dict = defaultdict(list)
    for g in gts:
        key = (g.image_id, g.task)
        if key in pred_len:
            groups[key].append(len(g.scanpath))
    if not groups:
        raise ValueError("no prediction/ground-truth pairs share an image and task")
    per_image = [np.mean([abs(pred_len[k] - L) for L in lens])
                 for k, lens in groups.items()]
    return float(np.mean(per_image))


def human_consistency(trials: Sequence[SearchTrial],
                      score_fn: Callable[[Scanpath, Scanpath], float]) -> float:
    """Leave-one-subject-out consistency under a pairwise scanpath score.

    Images with a single subject are skipped with a warning.
    """
    groups: dict = defaultdict(list)
    for t in trials:
        groups[(t.image_id, t.task)].append(t)
    scores = []
    for key, members in groups.items():
        if len(members) < 2:
            warnings.warn(f"skipping {key}: only one subject")
            continue
        for i, a in enumerate(members):
            others = [score_fn(a.scanpath, b.scanpath)
                      for j, b in enumerate(members) if j != i]
            scores.append(float(np.mean(others)))
    if not scores:
        raise ValueError("no image has two or more subjects")
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    rows: list[dict]
    aggregates: dict[str, float]


def evaluate_predictions(preds: Sequence[SearchTrial], gts: Sequence[SearchTrial],
                         label_maps: Optional[dict] = None,
                         predictor: Optional[Callable] = None,
                         baseline: Optional[DensityBaseline] = None,
                         grid: ActionGrid = ActionGrid(),
                         bandwidth: float = 64.0) -> MetricReport:
    """Score predictions against every ground-truth subject.

    `label_maps` maps image ids to label arrays (omitted: SemSS is skipped);
    `predictor` with `baseline` enables cIG and cNSS.
    """
    pred_by_key = {(p.image_id, p.task): p for p in preds}
    rows = []
    matched_gts = []
    for g in gts:
        key = (g.image_id, g.task)
        if key not in pred_by_key:
            continue
        p = pred_by_key[key]
        matched_gts.append(g)
        row = {
            "image": g.image_id,
            "task": g.task,
            "subject": g.subject,
            "SS": sequence_score(p.scanpath, g.scanpath, bandwidth=bandwidth),
            "SS2": truncated_score(p.scanpath, g.scanpath, 2, bandwidth=bandwidth),
            "SS4": truncated_score(p.scanpath, g.scanpath, 4, bandwidth=bandwidth),
            "len_err": abs(len(p.scanpath) - len(g.scanpath)),
        }
        if label_maps is not None and g.image_id in label_maps:
            row["SemSS"] = semantic_sequence_score(p.scanpath, g.scanpath,
                                                   label_maps[g.image_id])
        rows.append(row)
    if not rows:
        raise ValueError("no prediction matches any ground-truth image+task")
    if label_maps is None:
        warnings.warn("no label maps given; semantic sequence score skipped")

    agg = {}
    for name in ("SS", "SS2", "SS4", "SemSS"):
        vals = [r[name] for r in rows if name in r]
        if vals:
            agg[name] = float(np.mean(vals))
    agg["MAE"] = scanpath_length_mae(preds, matched_gts)
    if predictor is not None:
        if baseline is not None:
            agg["cIG"] = conditional_ig(predictor, matched_gts, baseline, grid)
        agg["cNSS"] = conditional_nss(predictor, matched_gts, grid)
    return MetricReport(rows, agg)
