"""Speaker-recognition style source tracing at the embedding level."""

from .batching import SamplerConfig, balanced_batches, random_batches
from .evaluation import (
    ProbeConfig,
    TrialScores,
    compute_eer_exact,
    compute_eer_histogram,
    linear_probe,
    project_2d,
    score_all_pairs,
    undersample,
)
from .losses import (
    BalancedBatch,
    CosineParams,
    HeadParams,
    LossOutput,
    MarginConfig,
    aam_softmax_loss,
    am_softmax_loss,
    angular_proto_loss,
    ge2e_centroids,
    ge2e_loss,
    softmax_loss,
)
from .network import MlpModel, backward, forward, init_model
from .store import EmbeddingSet, ManifestEntry, l2_normalize, read_embeddings, read_manifest, write_embeddings
from .synthgen import SynthSpec, generate
from .trainer import TrainConfig, lr_at_epoch, sgd_step, train

__version__ = "0.1.0"
