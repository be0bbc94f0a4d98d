"""Label-free alignment of one embedding space onto an anchor space.

A D x D matrix R is fitted so that ``R f_j(x)`` points where ``f_i(x)`` does,
minimizing the mean geodesic distance plus a soft orthogonality penalty
``lam * ||R^T R - I||_F^2``.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .embeddings import EmbeddingSet, check_paired

log = logging.getLogger(__name__)

COS_CLAMP = 1.0 - 1e-7


class NumericError(RuntimeError):
    """Training produced a non-finite value."""


@dataclass
class AlignmentMap:
    anchor_id: str
    source_id: str
    R: np.ndarray
    lam: float
    final_align_loss: float
    orthogonality_residual: float
    geodesic_term: float = float("nan")
    heldout_geodesic: dict = field(default_factory=dict)
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        if self.R.ndim != 2 or self.R.shape[0] != self.R.shape[1]:
            raise ValueError(f"R must be square, got {self.R.shape}")

    @property
    def D(self) -> int:
        return self.R.shape[0]

    def apply(self, vectors: np.ndarray) -> np.ndarray:
        """Map rows through R and put them back on the sphere."""
        y = np.asarray(vectors, dtype=np.float64) @ self.R.T
        return y / np.linalg.norm(y, axis=1, keepdims=True)

    @classmethod
    def identity(cls, encoder_id: str, d: int) -> "AlignmentMap":
        return cls(encoder_id, encoder_id, np.eye(d), 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class AlignTrainConfig:
    epochs: int = 20
    learning_rate: float = 0.1
    lambda_grid: tuple = (0.1, 0.3, 0.5)
    batch_size: int = 256
    seed: int = 0
    heldout_fraction: float = 0.1
    lr_decay: str = "cosine"
    reflection_start: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if len(self.lambda_grid) == 0:
            raise ValueError("lambda_grid must not be empty")
        if any(l < 0 for l in self.lambda_grid):
            raise ValueError("lambda values must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")


def _rows(x) -> np.ndarray:
    return x.vectors if isinstance(x, EmbeddingSet) else np.asarray(x, dtype=np.float64)


def _paired_rows(anchor, source):
    a, b = _rows(anchor), _rows(source)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("embedding sets must be 2-D")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"sample count mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] == 0:
        raise ValueError("embedding sets are empty")
    return a, b


def orthogonality_residual(R: np.ndarray) -> float:
    """``||R^T R - I||_F``."""
    R = np.asarray(R, dtype=np.float64)
    return float(np.linalg.norm(R.T @ R - np.eye(R.shape[0])))


def orthogonality_penalty(R: np.ndarray) -> float:
    return orthogonality_residual(R) ** 2


def orthogonality_penalty_gradient(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return 4.0 * R @ (R.T @ R - np.eye(R.shape[0]))


def _cosines(R, a, b):
    y = b @ R.T
    ny = np.linalg.norm(y, axis=1)
    u = y / ny[:, None]
    s = np.einsum("nd,nd->n", a, u)
    return s, u, ny


def geodesic_term(R, anchor, source) -> float:
    """Mean arccos between anchor rows and re-normalized ``R @ source`` rows."""
    a, b = _paired_rows(anchor, source)
    s, _, _ = _cosines(np.asarray(R, dtype=np.float64), a, b)
    return float(np.mean(np.arccos(np.clip(s, -COS_CLAMP, COS_CLAMP))))


def align_loss(R, anchor, source, lam: float) -> float:
    a, b = _paired_rows(anchor, source)
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (a.shape[1], a.shape[1]):
        raise ValueError(f"R shape {R.shape} does not match embedding dimension {a.shape[1]}")
    return geodesic_term(R, a, b) + lam * orthogonality_penalty(R)


def align_gradient(R, anchor, source, lam: float) -> np.ndarray:
    """Analytic gradient of ``align_loss`` with respect to R.

    Rows whose cosine sits on the clamp contribute nothing (the clamp is flat
    there).
    """
    a, b = _paired_rows(anchor, source)
    R = np.asarray(R, dtype=np.float64)
    s, u, ny = _cosines(R, a, b)
    inside = np.abs(s) < COS_CLAMP
    dl_ds = np.where(inside, -1.0 / np.sqrt(np.maximum(1.0 - s * s, 1e-300)), 0.0)
    ds_dy = (a - s[:, None] * u) / ny[:, None]
    grad = (dl_ds[:, None] * ds_dy).T @ b / a.shape[0]
    return grad + lam * orthogonality_penalty_gradient(R)


def _starts(d: int, with_reflection: bool) -> list[np.ndarray]:
    # gradient descent cannot cross det(R) = 0 against the penalty, so targets
    # with det = -1 are only reachable from a reflected start
    starts = [np.eye(d)]
    if with_reflection:
        flip = np.eye(d)
        flip[-1, -1] = -1.0
        starts.append(flip)
    return starts


def _fit(a, b, lam, cfg: AlignTrainConfig, rng: np.random.Generator, R0: np.ndarray):
    R = R0.copy()
    n = a.shape[0]
    steps_per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            lr = cfg.learning_rate
            if cfg.lr_decay == "cosine":
                lr *= 0.5 * (1.0 + np.cos(np.pi * step / total))
            R = R - lr * align_gradient(R, a[idx], b[idx], lam)
            step += 1
        if not np.all(np.isfinite(R)):
            raise NumericError(f"alignment diverged at epoch {epoch} (lambda={lam})")
        history.append(align_loss(R, a, b, lam))
    return R, history


def train_alignment(anchor: EmbeddingSet, source: EmbeddingSet, cfg: AlignTrainConfig) -> AlignmentMap:
    """Fit R by mini-batch SGD from the identity (and from a reflection).

    With several lambdas, one R is trained per lambda and start on 90% of the
    rows and the one with the lowest held-out geodesic term wins. With a
    single lambda all rows are used and the starts compete on training rows.
    """
    check_paired(anchor, source)
    a, b = anchor.vectors, source.vectors
    n = a.shape[0]
    if n < 2 * cfg.batch_size:
        raise ValueError(f"need at least 2*batch_size = {2 * cfg.batch_size} samples, got {n}")

    rng = np.random.default_rng(cfg.seed)
    if len(cfg.lambda_grid) > 1:
        perm = rng.permutation(n)
        n_held = max(1, int(round(cfg.heldout_fraction * n)))
        held, fit_idx = perm[:n_held], perm[n_held:]
    else:
        held, fit_idx = np.arange(0), np.arange(n)

    best = None
    heldout = {}
    for i, lam in enumerate(cfg.lambda_grid):
        for k, R0 in enumerate(_starts(a.shape[1], cfg.reflection_start)):
            sub_rng = np.random.default_rng([cfg.seed, i, k])
            R, history = _fit(a[fit_idx], b[fit_idx], lam, cfg, sub_rng, R0)
            score = geodesic_term(R, a[held], b[held]) if held.size else geodesic_term(R, a, b)
            heldout[float(lam)] = min(score, heldout.get(float(lam), np.inf))
            log.debug("lambda=%g start=%d held-out geodesic=%.6f", lam, k, score)
            if best is None or score < best[0]:
                best = (score, lam, R, history)

    _, lam, R, history = best
    return AlignmentMap(
        anchor_id=anchor.encoder_id,
        source_id=source.encoder_id,
        R=R,
        lam=float(lam),
        final_align_loss=align_loss(R, a, b, lam),
        orthogonality_residual=orthogonality_residual(R),
        geodesic_term=geodesic_term(R, a, b),
        heldout_geodesic=heldout,
        loss_history=history,
    )


def procrustes_oracle(anchor, source) -> np.ndarray:
    """Closed-form orthogonal R minimizing ``sum_n ||a_n - R b_n||^2``."""
    a, b = _paired_rows(anchor, source)
    u, sv, vt = np.linalg.svd(a.T @ b)
    if sv[-1] < 1e-12:
        raise np.linalg.LinAlgError(
            f"cross-covariance is rank deficient (smallest singular value {sv[-1]:.3e}); "
            "the orthogonal solution is not unique"
        )
    return u @ vt


def align_ensemble(
    sets: list[EmbeddingSet], anchor_index: int, cfg: AlignTrainConfig, jobs: int = 1
) -> list[AlignmentMap]:
    """Train one map per non-anchor member, returned in member order.

    The anchor's own map is the identity and is not included. Maps are
    independent, so ``jobs > 1`` fits them in worker processes.
    """
    if len(sets) < 2:
        raise ValueError("an ensemble needs at least two members")
    if not 0 <= anchor_index < len(sets):
        raise IndexError(f"anchor_index {anchor_index} out of range for {len(sets)} members")
    anchor = sets[anchor_index]
    sources = [s for i, s in enumerate(sets) if i != anchor_index]
    if jobs > 1 and len(sources) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(train_alignment, [anchor] * len(sources), sources, [cfg] * len(sources)))
    return [train_alignment(anchor, s, cfg) for s in sources]
