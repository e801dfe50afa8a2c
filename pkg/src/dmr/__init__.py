"""Discrete latent-sense bottleneck for discourse marker prediction, trained by EM."""

from .corpus import (
    Corpus,
    CorpusError,
    LabelVocab,
    MarkerVocab,
    PairExample,
    SyntheticSpec,
    TokenVocab,
    generate_synthetic,
    load_corpus,
    separable_spec,
    split_corpus,
    write_corpus,
)
from .em import TrainConfig, TrainHistory, TrainingError, e_step, train
from .encoder import EncoderParams, encode_pair, encoder_backward
from .model import (
    DmrParams,
    compute_hz,
    corpus_log_likelihood,
    latent_distribution,
    marginal_marker,
    posterior,
    predict_topk_markers,
    transition_matrix,
)

__version__ = "0.1.0"
