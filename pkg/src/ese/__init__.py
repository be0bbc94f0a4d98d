"""Embedding-space ensembles of contrastively trained encoders on the unit hypersphere."""
from .align import AlignmentMap, AlignTrainConfig, align_ensemble, procrustes_oracle, train_alignment
from .contrastive import InfoNceConfig, MlpEncoder, TrainConfig, embed, infonce_loss, train_encoder
from .embeddings import EmbeddingSet
from .ensemble import EnsembleSpec, ensemble_embed, weight_space_ensemble, wse_star_protocol
from .metrics import MetricsReport, evaluate, map_at_r, recall_at_1
from .sphere import KarcherConfig, geodesic_distance, karcher_mean

__version__ = "0.1.0"
