"""Synthetic worlds with known latents and known orthogonal encoder frames.

Member ``m`` of a world "encodes" latent ``z`` as ``R_m z`` (optionally
perturbed), so every pair of members is related by ``R_i R_j^T`` exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embeddings import EmbeddingSet

MAX_CONDITION = 100.0


def sample_uniform_sphere(n: int, d: int, seed: int) -> np.ndarray:
    """``n`` i.i.d. uniform points on S^(d-1) as rows (Gaussian, then normalize)."""
    if d < 2:
        raise ValueError(f"sphere dimension must be >= 2, got d={d}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    g = np.random.default_rng(seed).standard_normal((n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def random_orthogonal(d: int, seed: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix from a seeded Gaussian QR."""
    if d < 2:
        raise ValueError(f"d must be >= 2, got {d}")
    a = np.random.default_rng(seed).standard_normal((d, d))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


@dataclass
class SyntheticWorld:
    latents: np.ndarray
    transforms: list[np.ndarray]
    noise_kappa: float
    obs_matrix: np.ndarray
    obs_offset: np.ndarray
    seed: int
    labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.latents.shape[0]

    @property
    def D(self) -> int:
        return self.latents.shape[1]

    @property
    def M(self) -> int:
        return len(self.transforms)

    @property
    def obs_dim(self) -> int:
        return self.obs_matrix.shape[0]

    def g(self, z: np.ndarray) -> np.ndarray:
        """Observation map applied to one latent or to rows of latents."""
        return np.asarray(z) @ self.obs_matrix.T + self.obs_offset

    def g_inverse(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.lstsq(self.obs_matrix, (np.asarray(x) - self.obs_offset).T, rcond=None)[0].T


def _observation_map(d: int, obs_dim: int, rng: np.random.Generator):
    if obs_dim < d:
        raise ValueError(f"observation dimension {obs_dim} must be >= latent dimension {d}")
    while True:
        a = rng.standard_normal((obs_dim, d)) / np.sqrt(obs_dim) + np.eye(obs_dim, d)
        if np.linalg.cond(a) < MAX_CONDITION:
            break
    return a, rng.standard_normal(obs_dim) * 0.1


def make_world(
    n: int,
    d: int,
    m: int,
    seed: int,
    noise_kappa: float = 0.0,
    obs_dim: int | None = None,
    identity_observation: bool = False,
    n_clusters: int = 0,
    cluster_kappa: float = 20.0,
) -> SyntheticWorld:
    """Build a world of ``n`` latents in ``d`` dims viewed by ``m`` members.

    ``n_clusters > 0`` draws latents around that many random centres (each
    row labelled by its centre) so retrieval metrics have something to find;
    otherwise latents are uniform on the sphere and unlabelled.
    """
    if m < 1:
        raise ValueError("a world needs at least one member")
    if noise_kappa < 0:
        raise ValueError("noise_kappa must be >= 0")
    ss = np.random.SeedSequence(seed)
    s_lat, s_rot, s_obs, s_lab = (int(c.generate_state(1)[0]) for c in ss.spawn(4))

    labels = None
    if n_clusters > 0:
        centres = sample_uniform_sphere(n_clusters, d, s_lab)
        rng = np.random.default_rng(s_lat)
        labels = np.arange(n) % n_clusters
        rng.shuffle(labels)
        z = centres[labels] + rng.standard_normal((n, d)) / np.sqrt(cluster_kappa)
        latents = z / np.linalg.norm(z, axis=1, keepdims=True)
    else:
        latents = sample_uniform_sphere(n, d, s_lat)

    rot_seeds = np.random.SeedSequence(s_rot).generate_state(m)
    transforms = [random_orthogonal(d, int(s)) for s in rot_seeds]

    obs_dim = d if obs_dim is None else obs_dim
    if identity_observation:
        if obs_dim != d:
            raise ValueError("identity observation requires obs_dim == d")
        a, b = np.eye(d), np.zeros(d)
    else:
        a, b = _observation_map(d, obs_dim, np.random.default_rng(s_obs))
    return SyntheticWorld(
        latents=latents,
        transforms=transforms,
        noise_kappa=float(noise_kappa),
        obs_matrix=a,
        obs_offset=b,
        seed=seed,
        labels=labels,
        meta={"condition_number": float(np.linalg.cond(a))},
    )


def perturb(points: np.ndarray, kappa: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian-perturb-then-normalize; concentration grows with ``kappa``."""
    if kappa <= 0:
        return np.array(points, dtype=np.float64, copy=True)
    noisy = points + rng.standard_normal(points.shape) / np.sqrt(kappa)
    return noisy / np.linalg.norm(noisy, axis=-1, keepdims=True)


def make_member_embeddings(world: SyntheticWorld, member_index: int) -> EmbeddingSet:
    if not 0 <= member_index < world.M:
        raise IndexError(f"member_index {member_index} out of range for M={world.M}")
    rows = world.latents @ world.transforms[member_index].T
    if world.noise_kappa > 0:
        seed = np.random.SeedSequence([world.seed, 7919, member_index])
        rows = perturb(rows, world.noise_kappa, np.random.default_rng(seed))
    else:
        rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    return EmbeddingSet(rows, labels=world.labels, encoder_id=f"synthetic-{member_index}", domain="synthetic")


def observe(world: SyntheticWorld, n: int) -> np.ndarray:
    if not 0 <= n < world.N:
        raise IndexError(f"sample index {n} out of range for N={world.N}")
    return world.g(world.latents[n])


def observe_all(world: SyntheticWorld) -> np.ndarray:
    return world.g(world.latents)
