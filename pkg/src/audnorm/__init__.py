"""Unsupervised speaker normalization and acoustic unit discovery.

A factored VAE with an adversarial CPC head separates utterance style from
content; converting a whole corpus to its style medoid normalizes away
speaker variation before an HMM-VAE discovers and segments acoustic units.
"""

from .config import ExperimentConfig, load_config
from .dataio import CorpusManifest, UtteranceRecord, build_language_batches, load_manifest
from .features import (
    CorpusNormStats,
    LogMelSpectrogram,
    compute_logmel_aud,
    compute_logmel_vc,
    compute_norm_stats,
    invert_logmel,
    normalize_per_band,
)
from .fvae import FVAE, FVAEConfig, build_fvae
from .hmmvae import HMMVAE, HMMVAEConfig, build_hmmvae
from .metrics import boundary_fscore, cluster_purity, frame_confusion, nmi
from .normalizer import StyleTable, extract_styles, find_style_medoid, normalize_corpus
from .pipeline import ExperimentRunner, report, run_experiment

__version__ = "0.1.0"
