"""Embedding-space ensembles (Karcher mean of member embeddings) and
weight-space ensemble baselines."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .align import AlignmentMap
from .contrastive import (
    InfoNceConfig,
    MlpEncoder,
    PositivePairPolicy,
    TrainConfig,
    TrainingSet,
    train_encoder,
)
from .embeddings import EmbeddingSet
from .sphere import KarcherConfig, KarcherDegeneracyError, karcher_mean_rows

WSE_STAR_LR_OFFSETS = (1e-5, 3e-5, 5e-5)


class EnsembleError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleSpec:
    member_ids: tuple
    anchor_id: str | None = None
    mode: str = "aligned"
    karcher: KarcherConfig = field(default_factory=KarcherConfig)

    def __post_init__(self):
        if len(self.member_ids) < 2:
            raise ValueError("an ensemble needs at least two members")
        if self.mode not in ("aligned", "unaligned"):
            raise ValueError(f"mode must be 'aligned' or 'unaligned', got {self.mode!r}")
        if self.mode == "aligned" and self.anchor_id not in self.member_ids:
            raise ValueError(f"anchor {self.anchor_id!r} is not an ensemble member")


def ensemble_embed(sets: list[EmbeddingSet], maps, spec: EnsembleSpec, domain: str | None = None) -> EmbeddingSet:
    """Per-row Karcher mean of the members' embeddings.

    In aligned mode every non-anchor member is first mapped into the anchor
    frame by the map whose ``source_id`` matches it (re-normalized); in
    unaligned mode maps are ignored and raw embeddings are averaged.
    """
    if len(sets) != len(spec.member_ids):
        raise EnsembleError(f"{len(sets)} embedding sets for {len(spec.member_ids)} members")
    n = sets[0].N
    for s in sets:
        if s.N != n or s.D != sets[0].D:
            raise EnsembleError("member embedding sets must be paired (same N and D)")

    rows = []
    if spec.mode == "aligned":
        by_source = {m.source_id: m for m in (maps or [])}
        for member_id, s in zip(spec.member_ids, sets):
            if member_id == spec.anchor_id:
                rows.append(s.vectors)
                continue
            m = by_source.get(member_id)
            if m is None:
                raise EnsembleError(f"no alignment map for member {member_id!r}")
            if m.anchor_id != spec.anchor_id:
                raise EnsembleError(
                    f"map for {member_id!r} targets anchor {m.anchor_id!r}, expected {spec.anchor_id!r}"
                )
            rows.append(m.apply(s.vectors))
    else:
        rows = [s.vectors for s in sets]

    stack = np.stack(rows, axis=1)
    try:
        means, _ = karcher_mean_rows(stack, spec.karcher)
    except KarcherDegeneracyError as exc:
        raise EnsembleError(f"Karcher mean failed on row {getattr(exc, 'row', '?')}: {exc}") from exc
    tag = f"ensemble-{spec.mode}"
    return EmbeddingSet(means, sets[0].labels, tag, domain or sets[0].domain)


def weight_space_ensemble(encoders: list[MlpEncoder], encoder_id: str = "wse") -> MlpEncoder:
    """Elementwise mean of every weight and bias."""
    if not encoders:
        raise ValueError("no encoders to average")
    first = encoders[0]
    for e in encoders[1:]:
        if e.layer_dims != first.layer_dims or e.activation != first.activation:
            raise ValueError(
                f"cannot average {e.layer_dims}/{e.activation} with {first.layer_dims}/{first.activation}"
            )
    weights = [np.mean([e.weights[i] for e in encoders], axis=0) for i in range(len(first.weights))]
    biases = [np.mean([e.biases[i] for e in encoders], axis=0) for i in range(len(first.biases))]
    return MlpEncoder(weights, biases, first.activation, encoder_id)


def wse_star_configs(base: TrainConfig, seeds, grid=WSE_STAR_LR_OFFSETS, init_seed: int | None = None) -> list:
    """One config per member: shared initial weights, learning rate ``base + grid[m % len(grid)]``."""
    if len(grid) == 0:
        raise ValueError("the learning-rate grid is empty")
    shared = base.seed if init_seed is None else init_seed
    return [
        replace(base, seed=int(s), init_seed=shared, learning_rate=base.learning_rate + grid[m % len(grid)])
        for m, s in enumerate(seeds)
    ]


def wse_star_protocol(
    dataset: TrainingSet,
    policy: PositivePairPolicy,
    nce: InfoNceConfig,
    base_train: TrainConfig,
    seeds,
    grid=WSE_STAR_LR_OFFSETS,
    init_seed: int | None = None,
) -> list[MlpEncoder]:
    """Train members from one shared initialization with mildly varied learning rates."""
    configs = wse_star_configs(base_train, seeds, grid, init_seed)
    return [
        train_encoder(dataset, policy, nce, cfg, encoder_id=f"wse-star-{m}")
        for m, cfg in enumerate(configs)
    ]
