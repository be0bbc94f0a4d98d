from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DOMAINS = ("id", "ood_color", "ood_crop", "synthetic")


@dataclass
class EmbeddingSet:
    """Rows of unit vectors, one per input, in input order."""

    vectors: np.ndarray
    labels: np.ndarray | None = None
    encoder_id: str = ""
    domain: str = "id"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[1] < 2:
            raise ValueError(f"embedding matrix must be (N, D) with D >= 2, got {self.vectors.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.vectors.shape[0],):
                raise ValueError(
                    f"labels shape {self.labels.shape} does not match N={self.vectors.shape[0]}"
                )
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain tag {self.domain!r}; expected one of {DOMAINS}")

    @property
    def N(self) -> int:
        return self.vectors.shape[0]

    @property
    def D(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.N

    def subset(self, idx) -> "EmbeddingSet":
        labels = None if self.labels is None else self.labels[idx]
        return EmbeddingSet(self.vectors[idx], labels, self.encoder_id, self.domain)

    def max_norm_error(self) -> float:
        return float(np.max(np.abs(np.linalg.norm(self.vectors, axis=1) - 1.0)))


def check_paired(a: EmbeddingSet, b: EmbeddingSet) -> None:
    if a.N != b.N:
        raise ValueError(f"paired sets differ in sample count: {a.N} vs {b.N}")
    if a.D != b.D:
        raise ValueError(f"paired sets differ in dimension: {a.D} vs {b.D}")
