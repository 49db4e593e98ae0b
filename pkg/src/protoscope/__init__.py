"""protoscope: an interpretable prototype classifier head for precomputed
audio-embedding sequences, with k-means initialization, analytic training,
and a prototype attribution/export surface."""

from .embedstore import (
    Dataset,
    EmbeddingRecord,
    LabelSpace,
    Normalizer,
    apply_normalizer,
    fit_normalizer,
    load_dataset,
    read_embedding_file,
    write_embedding_file,
)
from .protonet import (
    Adaptor,
    ForwardTrace,
    LinearHead,
    PrototypeBank,
    PrototypeModel,
    adapt_prototypes,
    forward,
    init_adaptor,
    init_linear_head,
    similarity,
)
from .initkit import KMeansResult, init_prototypes, kmeans
from .trainer import (
    AdamState,
    Checkpoint,
    LossReport,
    TrainConfig,
    TrainOutcome,
    adam_step,
    backward,
    loss_classification,
    loss_prototype,
    loss_total,
    onecycle_lr,
    train,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluator import EvalReport, evaluate, track_logits
from .explain import (
    Explanation,
    explain_prediction,
    export_prototypes,
    nearest_samples,
    self_classify_prototypes,
)
from .synthlab import BlobSpec, brute_force_kmeans, finite_diff_grad, gen_blobs

__version__ = "0.1.0"
