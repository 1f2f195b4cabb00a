"""Acquisition: MC-dropout uncertainty, k-means diversity, hybrid scoring,
pool partitioning, and iterative core-set construction.

Higher combined score means more desirable: high diversity (distance to the
nearest feature-space centroid) and low uncertainty (BALD mutual
information from the rotation model's dropout posterior). The pool is
sorted once per cycle, split into batches of near-equal size, and the
top-k of the current batch joins the core-set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models
from .errors import (BudgetError, ConfigError, ContractError, FormatError,
                     ShapeError)


@dataclass
class AcquisitionRecord:
    """Per-sample scoring row: pool index, uncertainty, diversity, score."""

    sample_index: int
    uncertainty: float
    diversity: float
    a3_score: float

    def __post_init__(self) -> None:
        if self.uncertainty < 0:
            raise ContractError(
                f"uncertainty must be >= 0, got {self.uncertainty}")
        if self.diversity < 0:
            raise ContractError(f"diversity must be >= 0, got {self.diversity}")


@dataclass
class CoreSet:
    """Ordered unique pool indices accumulated across cycles."""

    selected: list[int] = field(default_factory=list)
    budget_total: int = 0
    budget_used: int = 0
    stage: int = 0

    def __post_init__(self) -> None:
        if len(set(self.selected)) != len(self.selected):
            raise ContractError("core-set contains duplicate indices")
        if self.budget_used != len(self.selected):
            raise ContractError(
                f"budget_used {self.budget_used} != selected count "
                f"{len(self.selected)}")
        if self.budget_used > self.budget_total:
            raise BudgetError(
                f"budget_used {self.budget_used} exceeds budget_total "
                f"{self.budget_total}")


@dataclass
class PoolPartition:
    """Index batches covering the pool once, in descending score order."""

    batches: list[list[int]]


# ---------------------------------------------------------------------------
# Uncertainty
# ---------------------------------------------------------------------------

def mc_dropout_probs(rot_model: models.RotationClassifierParams, x: np.ndarray,
                     t_passes: int, seed: int) -> np.ndarray:
    """Stack of T stochastic rotation predictions, shape (B, T, 4).

    Masks use inverted-dropout scaling (kept units divided by the keep
    probability) so the rate-zero case reduces exactly to evaluation mode.
    """
    if t_passes < 2:
        raise ConfigError(
            f"mc_dropout_probs needs at least 2 passes, got {t_passes}")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    keep = 1.0 - rot_model.dropout_rate
    b = x.shape[0]
    p = rot_model.trunk.embed_dim
    out = np.empty((b, t_passes, 4))
    for t in range(t_passes):
        if rot_model.dropout_rate == 0.0:
            mask = np.ones((b, p))
        else:
            mask = (rng.random((b, p)) < keep).astype(np.float64) / keep
        out[:, t, :] = models.rotation_predict(rot_model, x, mask=mask).data
    return out


def bald_mutual_info(stack: np.ndarray) -> float:
    """Mutual information H(mean) - mean(H) of a T x K probability stack.

    Uses the exact 0 log 0 = 0 convention; bitwise-identical rows return
    exactly 0 (no disagreement), and tiny negative rounding residue is
    clipped to 0.
    """
    p = np.asarray(stack, dtype=np.float64)
    if p.ndim != 2:
        raise ShapeError(f"bald_mutual_info expects a T x K stack, got {p.shape}")
    if np.all(p == p[0]):
        return 0.0

    def entropy(rows: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(rows > 0.0, rows * np.log(rows), 0.0)
        return -terms.sum(axis=-1)

    mi = entropy(p.mean(axis=0)) - entropy(p).mean()
    return float(max(mi, 0.0))


# ---------------------------------------------------------------------------
# Diversity
# ---------------------------------------------------------------------------

def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("nkp,nkp->nk", diff, diff)


def kmeans(embeddings: np.ndarray, k: int, max_iter: int = 100, seed: int = 0,
           weights: np.ndarray | None = None):
    """Lloyd's algorithm with seeded k-means++ initialization.

    Returns (centroids k x p, assignment of length N, inertia). Optional
    nonnegative sample weights turn both the initialization distribution
    and the centroid updates into their weighted forms. Empty clusters keep
    their previous centroid.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    if n < k:
        raise ContractError(f"kmeans needs at least k={k} points, got {n}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0):
        raise ContractError("kmeans weights must be nonnegative, one per point")
    if w.sum() == 0.0:
        w = np.ones(n)
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.choice(n, p=w / w.sum())]
    d2 = _sq_dists(x, centroids[:1]).min(axis=1)
    for j in range(1, k):
        mass = d2 * w
        total = mass.sum()
        if total > 0.0:
            centroids[j] = x[rng.choice(n, p=mass / total)]
        else:
            centroids[j] = x[rng.choice(n, p=w / w.sum())]
        d2 = np.minimum(d2, _sq_dists(x, centroids[j:j + 1]).min(axis=1))

    assignment = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iter):
        new_assignment = _sq_dists(x, centroids).argmin(axis=1)
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for j in range(k):
            members = assignment == j
            mass = w[members].sum()
            if mass > 0.0:
                centroids[j] = (x[members] * w[members, None]).sum(axis=0) / mass
    inertia = float((_sq_dists(x, centroids).min(axis=1) * w).sum())
    return centroids, assignment, inertia


def diversity_distances(embeddings: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Euclidean distance from each embedding row to its nearest centroid."""
    return np.sqrt(_sq_dists(np.asarray(embeddings, dtype=np.float64),
                             centroids).min(axis=1))


# ---------------------------------------------------------------------------
# Scoring and selection
# ---------------------------------------------------------------------------

def a3_score(uncertainty: float, diversity: float, beta: float) -> float:
    """Combined ranking key: diversity - beta * uncertainty, higher better."""
    return diversity - beta * uncertainty


SCORING_MODES = ("hybrid", "uncertainty", "random")


def score_pool(indices, uncertainties, diversities, mode: str = "hybrid",
               beta: float = 1.0, seed: int = 0) -> list[AcquisitionRecord]:
    """One AcquisitionRecord per pool sample under the chosen ranking mode.

    hybrid ranks by diversity - beta * uncertainty, uncertainty ranks by
    -uncertainty alone (least uncertain first), random assigns seeded
    uniform scores; uncertainty and diversity are logged truthfully in all
    modes.
    """
    if mode not in SCORING_MODES:
        raise ConfigError(f"unknown scoring mode {mode!r}; expected one of "
                          f"{', '.join(SCORING_MODES)}")
    if not (math.isfinite(beta) and beta >= 0):
        raise ConfigError(f"beta must be finite and >= 0, got {beta}")
    indices = list(indices)
    u = np.asarray(uncertainties, dtype=np.float64)
    d = np.asarray(diversities, dtype=np.float64)
    if not (len(indices) == u.shape[0] == d.shape[0]):
        raise ShapeError("indices, uncertainties, diversities disagree in length")
    if mode == "hybrid":
        scores = [a3_score(float(ui), float(di), beta) for ui, di in zip(u, d)]
    elif mode == "uncertainty":
        scores = [-float(ui) for ui in u]
    else:
        scores = list(np.random.default_rng(seed).random(len(indices)))
    return [AcquisitionRecord(int(i), float(ui), float(di), s)
            for i, ui, di, s in zip(indices, u, d, scores)]


def partition_pool(records: list[AcquisitionRecord], n: int) -> PoolPartition:
    """Sort by descending score (ties by index) and split into n batches.

    Batch sizes differ by at most one, larger batches first.
    """
    if not records:
        raise ContractError("partition_pool requires a nonempty record list")
    if n < 1:
        raise ConfigError(f"partition count must be >= 1, got {n}")
    if n > len(records):
        raise ConfigError(
            f"partition count {n} exceeds pool size {len(records)}")
    ordered = sorted(records, key=lambda r: (-r.a3_score, r.sample_index))
    base, extra = divmod(len(ordered), n)
    batches = []
    at = 0
    for j in range(n):
        size = base + (1 if j < extra else 0)
        batches.append([r.sample_index for r in ordered[at:at + size]])
        at += size
    return PoolPartition(batches)


def select_topk(batch_records: list[AcquisitionRecord], core: CoreSet,
                k: int) -> CoreSet:
    """New CoreSet with the k best-scored batch samples appended."""
    if k < 0 or k > len(batch_records):
        raise ContractError(
            f"select_topk k={k} outside [0, batch size {len(batch_records)}]")
    if core.budget_used + k > core.budget_total:
        raise BudgetError(
            f"selecting {k} samples would exceed budget "
            f"{core.budget_total} (used {core.budget_used})")
    taken = set(core.selected)
    overlap = [r.sample_index for r in batch_records if r.sample_index in taken]
    if overlap:
        raise ContractError(
            f"batch indices already in the core-set: {overlap[:5]}")
    ranked = sorted(batch_records, key=lambda r: (-r.a3_score, r.sample_index))
    new_indices = [r.sample_index for r in ranked[:k]]
    return CoreSet(selected=core.selected + new_indices,
                   budget_total=core.budget_total,
                   budget_used=core.budget_used + k,
                   stage=core.stage)


# ---------------------------------------------------------------------------
# Rotation pretext pool
# ---------------------------------------------------------------------------

def rotate_flat(x_flat: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Lossless 90-degree-multiple rotation of one flattened square image."""
    side = math.isqrt(x_flat.shape[-1])
    if side * side != x_flat.shape[-1]:
        raise ContractError(
            f"rotation needs square images; {x_flat.shape[-1]} pixels is not "
            "a perfect square")
    grid = x_flat.reshape(side, side)
    return np.ascontiguousarray(np.rot90(grid, quarter_turns)).reshape(-1)


def build_rotation_pool(target_pool: np.ndarray, seed: int):
    """Each pool image once per rotation class, shuffled deterministically.

    Returns (x of shape (4N, d), labels of shape (4N,)) where label j means
    j quarter turns.
    """
    x = np.asarray(target_pool, dtype=np.float64)
    n = x.shape[0]
    xs = np.empty((4 * n, x.shape[1]))
    ys = np.empty(4 * n, dtype=np.int64)
    at = 0
    for i in range(n):
        for j in range(4):
            xs[at] = rotate_flat(x[i], j)
            ys[at] = j
            at += 1
    order = np.random.default_rng(seed).permutation(4 * n)
    return xs[order], ys[order]


# ---------------------------------------------------------------------------
# Core-set serialization
# ---------------------------------------------------------------------------

def save_coreset(path: str | Path, core: CoreSet) -> None:
    lines = [f"# a3-coreset v1 stage={core.stage} budget={core.budget_total}"]
    lines += [str(i) for i in core.selected]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_coreset(path: str | Path) -> CoreSet:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("# a3-coreset v1 "):
        raise FormatError(f"{path}: missing a3-coreset v1 header")
    fields = dict(part.split("=", 1) for part in lines[0].split()[2:]
                  if "=" in part)
    try:
        stage = int(fields["stage"])
        budget = int(fields["budget"])
        selected = [int(ln) for ln in lines[1:]]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: malformed core-set file: {exc}") from exc
    return CoreSet(selected=selected, budget_total=budget,
                   budget_used=len(selected), stage=stage)
