"""Factored VAE for content/style separation with an adversarial CPC head.

The model splits an 80-band log-mel utterance into a variational sequence of
content embeddings (temporal pooling, so fewer embeddings than frames) and a
single deterministic style vector from global average pooling. A decoder
reconstructs the input from both. A small CPC encoder runs over the content
sequence and scores each embedding against the one a fixed lookahead earlier,
using the other utterances of a language-homogeneous batch as counter
examples; it is trained to minimize that contrastive loss while the content
encoder is trained to maximize it, which pushes slowly varying (speaker)
information out of the content path.

FVAE update objective: rec + beta * kld - cpc_weight * cpc.
Adversary update objective: cpc (CPC-encoder weights only).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .features import LogMelSpectrogram

logger = logging.getLogger(__name__)

__all__ = [
    "FVAEConfig",
    "FVAE",
    "build_fvae",
    "ContentEmbeddingSequence",
    "StyleEmbedding",
    "CPCEmbeddingSequence",
    "LossBreakdown",
    "NonFiniteLossError",
    "encode_content",
    "encode_style",
    "decode",
    "reparameterize",
    "gaussian_kl",
    "infonce_loss",
    "cpc_embeddings",
    "cpc_loss",
    "compute_losses",
    "FVAETrainState",
    "make_train_state",
    "training_step",
    "train_fvae",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class FVAEConfig:
    bands: int = 80
    content_dim: int = 64
    style_dim: int = 256
    cpc_dim: int = 64
    content_channels: int = 256
    style_channels: tuple = (128, 256)
    style_kernels: tuple = (3, 3)
    style_strides: tuple = (2, 2)
    decoder_channels: int = 256
    cpc_channels: int = 128
    cpc_kernels: tuple = (5, 4)
    pooling: int = 2
    beta: float = 0.01
    cpc_weight: float = 1.0
    tau_seconds: float = 1.0
    hop_seconds: float = 0.01
    learning_rate: float = 1e-4
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.beta < 0 or self.cpc_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau_seconds <= 0:
            raise ValueError("lookahead must be positive")
        if self.pooling < 1 or 2 ** int(math.log2(self.pooling)) != self.pooling:
            raise ValueError("pooling must be a power of two")

    @property
    def tau_frames(self) -> int:
        """Lookahead in content frames, rounded half-up."""
        return int(math.floor(self.tau_seconds / (self.hop_seconds * self.pooling) + 0.5))

    @property
    def cpc_receptive_field(self) -> int:
        return sum(self.cpc_kernels) - len(self.cpc_kernels) + 1


@dataclass
class ContentEmbeddingSequence:
    """Variational posterior statistics of the content path, one row per
    pooled frame."""

    means: np.ndarray
    log_variances: np.ndarray
    frames_per_embedding: int
    source_frames: int

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.log_variances = np.asarray(self.log_variances, dtype=np.float64)
        if self.means.shape != self.log_variances.shape:
            raise ValueError("means and log_variances must have the same shape")
        if not np.isfinite(self.log_variances).all():
            raise ValueError("log_variances must be finite")

    def __len__(self) -> int:
        return self.means.shape[0]


@dataclass
class StyleEmbedding:
    vector: np.ndarray
    utterance_id: str = ""

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise ValueError("style embedding must be a vector")


@dataclass
class CPCEmbeddingSequence:
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if not np.isfinite(self.vectors).all():
            raise ValueError("CPC embeddings must be finite")


@dataclass
class LossBreakdown:
    rec: float
    kld: float
    cpc: float
    total: float
    cpc_terms: int = 0  # contrastive (t, utterance) pairs; 0 when CPC was skipped


class NonFiniteLossError(RuntimeError):
    def __init__(self, utterance_id: str, term: str):
        super().__init__(f"non-finite {term} loss for utterance {utterance_id!r}")
        self.utterance_id = utterance_id


class ContentEncoder(nn.Module):
    """Convolution stack emitting posterior mean/log-variance sequences."""

    def __init__(self, config: FVAEConfig):
        super().__init__()
        ch = config.content_channels
        layers = [nn.Conv1d(config.bands, ch, kernel_size=3, padding=1), nn.GELU()]
        for _ in range(int(math.log2(config.pooling))):
            # kernel 3 / stride 2 / padding 1 maps T to ceil(T / 2) exactly
            layers += [nn.Conv1d(ch, ch, kernel_size=3, stride=2, padding=1), nn.GELU()]
        layers += [nn.Conv1d(ch, 2 * config.content_dim, kernel_size=3, padding=1)]
        self.net = nn.Sequential(*layers)
        self.content_dim = config.content_dim

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.net(x)
        return out[:, : self.content_dim], out[:, self.content_dim :]


class StyleEncoder(nn.Module):
    """Convolution stack with global average pooling over time."""

    def __init__(self, config: FVAEConfig):
        super().__init__()
        layers = []
        in_ch = config.bands
        for ch, k, s in zip(config.style_channels, config.style_kernels, config.style_strides):
            layers += [nn.Conv1d(in_ch, ch, kernel_size=k, stride=s, padding=k // 2), nn.GELU()]
            in_ch = ch
        layers += [nn.Conv1d(in_ch, config.style_dim, kernel_size=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).mean(dim=-1)


class Decoder(nn.Module):
    """Upsampling decoder from content sequence plus broadcast style."""

    def __init__(self, config: FVAEConfig):
        super().__init__()
        ch = config.decoder_channels
        layers = [
            nn.Conv1d(config.content_dim + config.style_dim, ch, kernel_size=3, padding=1),
            nn.GELU(),
        ]
        for _ in range(int(math.log2(config.pooling))):
            # kernel 4 / stride 2 / padding 1 maps M to exactly 2 M
            layers += [nn.ConvTranspose1d(ch, ch, kernel_size=4, stride=2, padding=1), nn.GELU()]
        layers += [
            nn.Conv1d(ch, ch, kernel_size=3, padding=1),
            nn.GELU(),
            nn.Conv1d(ch, config.bands, kernel_size=1),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class CPCEncoder(nn.Module):
    """Small valid-convolution stack over the content sequence."""

    def __init__(self, config: FVAEConfig):
        super().__init__()
        k1, k2 = config.cpc_kernels
        self.net = nn.Sequential(
            nn.Conv1d(config.content_dim, config.cpc_channels, kernel_size=k1),
            nn.GELU(),
            nn.Conv1d(config.cpc_channels, config.cpc_dim, kernel_size=k2),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class FVAE(nn.Module):
    def __init__(self, config: FVAEConfig | None = None):
        super().__init__()
        self.config = config or FVAEConfig()
        self.content_encoder = ContentEncoder(self.config)
        self.style_encoder = StyleEncoder(self.config)
        self.decoder = Decoder(self.config)
        self.cpc_encoder = CPCEncoder(self.config)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def fvae_parameters(self):
        """Parameters updated by the FVAE objective (everything but the adversary)."""
        for module in (self.content_encoder, self.style_encoder, self.decoder):
            yield from module.parameters()

    def adversary_parameters(self):
        return self.cpc_encoder.parameters()

    def _as_input(self, values) -> torch.Tensor:
        y = torch.as_tensor(np.ascontiguousarray(values), dtype=self.dtype)
        if y.ndim != 2 or y.shape[1] != self.config.bands:
            raise ValueError(
                f"expected a frames x {self.config.bands} matrix, got {tuple(y.shape)}"
            )
        if y.shape[0] < self.config.pooling:
            raise ValueError(
                f"utterance has {y.shape[0]} frames, shorter than pooling factor "
                f"{self.config.pooling}"
            )
        return y

    def content_mean_logvar(self, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean, logvar = self.content_encoder(y.T.unsqueeze(0))
        return mean[0].T, logvar[0].T

    def style_vector(self, y: torch.Tensor) -> torch.Tensor:
        return self.style_encoder(y.T.unsqueeze(0))[0]

    def decode_frames(self, content: torch.Tensor, style: torch.Tensor, num_frames: int) -> torch.Tensor:
        m = content.shape[0]
        if num_frames > m * self.config.pooling:
            raise ValueError(
                f"cannot decode {num_frames} frames from {m} embeddings "
                f"at pooling {self.config.pooling}"
            )
        broadcast = style.unsqueeze(1).expand(style.shape[0], m)
        x = torch.cat([content.T, broadcast], dim=0).unsqueeze(0)
        out = self.decoder(x)[0].T
        return out[:num_frames]

    def cpc_embed(self, content: torch.Tensor) -> torch.Tensor:
        if content.shape[0] < self.config.cpc_receptive_field:
            return content.new_zeros((0, self.config.cpc_dim))
        return self.cpc_encoder(content.T.unsqueeze(0))[0].T


def build_fvae(config: FVAEConfig | None = None, seed: int = 0) -> FVAE:
    """Construct an FVAE with seeded weight initialization."""
    torch.manual_seed(seed)
    return FVAE(config)


def reparameterize(means, log_variances, eps=None, generator: torch.Generator | None = None):
    """Gaussian reparameterization: mean + exp(log_var / 2) * eps."""
    if isinstance(means, torch.Tensor):
        if eps is None:
            eps = torch.randn(means.shape, generator=generator, dtype=means.dtype)
        return means + torch.exp(0.5 * log_variances) * eps
    means = np.asarray(means)
    if eps is None:
        eps = np.random.default_rng().standard_normal(means.shape)
    return means + np.exp(0.5 * np.asarray(log_variances)) * eps


def gaussian_kl(mean, log_variance):
    """Closed-form KL(N(mean, diag exp(log_variance)) || N(0, I)), summed over
    the last axis."""
    exp_lv = (
        log_variance.exp()
        if isinstance(log_variance, torch.Tensor)
        else np.exp(log_variance)
    )
    return (0.5 * (mean**2 + exp_lv - log_variance - 1.0)).sum(-1)


def encode_content(feat: LogMelSpectrogram, model: FVAE) -> ContentEmbeddingSequence:
    """Posterior statistics of the content sequence for one utterance."""
    y = model._as_input(feat.values)
    with torch.no_grad():
        mean, logvar = model.content_mean_logvar(y)
    return ContentEmbeddingSequence(
        means=mean.numpy(),
        log_variances=logvar.numpy(),
        frames_per_embedding=model.config.pooling,
        source_frames=y.shape[0],
    )


def encode_style(feat: LogMelSpectrogram, model: FVAE) -> StyleEmbedding:
    """Deterministic utterance-level style embedding."""
    y = model._as_input(feat.values)
    with torch.no_grad():
        s = model.style_vector(y)
    return StyleEmbedding(vector=s.numpy(), utterance_id=feat.utterance_id)


def decode(
    content: ContentEmbeddingSequence, style: StyleEmbedding, model: FVAE
) -> np.ndarray:
    """Reconstruct a frames x bands matrix from content means and a style."""
    c = torch.as_tensor(content.means, dtype=model.dtype)
    s = torch.as_tensor(style.vector, dtype=model.dtype)
    if s.shape[0] != model.config.style_dim:
        raise ValueError(
            f"style dimension {s.shape[0]} does not match model ({model.config.style_dim})"
        )
    with torch.no_grad():
        out = model.decode_frames(c, s, content.source_frames)
    return out.numpy()


def infonce_loss(h: torch.Tensor, tau_frames: int):
    """Log-softmax contrastive loss over a stacked batch of CPC embeddings.

    ``h`` is (batch, frames, dim). For each anchor utterance u and valid t the
    positive score is <h_t(u), h_{t-tau}(u)> and the candidate set holds the
    time-t embeddings of every utterance in the batch. Returns ``(loss,
    n_terms)``; loss is None when no valid (t - tau, t) pair exists.
    """
    b, t_len, _ = h.shape
    if b < 2 or t_len <= tau_frames:
        return None, 0
    context = h[:, : t_len - tau_frames]
    future = h[:, tau_frames:]
    logits = torch.einsum("utd,vtd->tuv", context, future)
    n_t = t_len - tau_frames
    targets = torch.arange(b).repeat(n_t)
    loss = F.cross_entropy(logits.reshape(n_t * b, b), targets)
    return loss, n_t * b


def cpc_embeddings(content: ContentEmbeddingSequence, model: FVAE) -> CPCEmbeddingSequence:
    """CPC embeddings of a content sequence (posterior means, no sampling)."""
    c = torch.as_tensor(content.means, dtype=model.dtype)
    with torch.no_grad():
        h = model.cpc_embed(c)
    return CPCEmbeddingSequence(vectors=h.numpy())


def _stack_common(hs: list[torch.Tensor]) -> torch.Tensor | None:
    min_len = min(h.shape[0] for h in hs)
    if min_len == 0:
        return None
    return torch.stack([h[:min_len] for h in hs])


def cpc_loss(contents: list[ContentEmbeddingSequence], model: FVAE) -> float | None:
    """Batch CPC loss over content sequences; None when the batch has no
    valid contrastive term (all sequences shorter than lookahead plus the
    CPC receptive field)."""
    with torch.no_grad():
        hs = [
            model.cpc_embed(torch.as_tensor(c.means, dtype=model.dtype))
            for c in contents
        ]
        stacked = _stack_common(hs)
        if stacked is None:
            logger.warning("CPC loss skipped: no embedding survives the receptive field")
            return None
        loss, n_terms = infonce_loss(stacked, model.config.tau_frames)
    if loss is None:
        logger.warning("CPC loss skipped: sequences shorter than the lookahead")
        return None
    return float(loss)


def _forward_utterance(model: FVAE, feat: LogMelSpectrogram, generator):
    y = model._as_input(feat.values)
    mean, logvar = model.content_mean_logvar(y)
    c = reparameterize(mean, logvar, generator=generator)
    s = model.style_vector(y)
    y_hat = model.decode_frames(c, s, y.shape[0])
    rec = ((y_hat - y) ** 2).sum() / y.shape[0]
    kld = gaussian_kl(mean, logvar).mean()
    for term, value in (("reconstruction", rec), ("KL", kld)):
        if not torch.isfinite(value):
            raise NonFiniteLossError(feat.utterance_id, term)
    return rec, kld, c


def _batch_losses(model: FVAE, batch: list[LogMelSpectrogram], generator):
    recs, klds, samples = [], [], []
    for feat in batch:
        rec, kld, c = _forward_utterance(model, feat, generator)
        recs.append(rec)
        klds.append(kld)
        samples.append(c)
    rec = torch.stack(recs).mean()
    kld = torch.stack(klds).mean()

    cpc_term, n_terms = None, 0
    if len(batch) >= 2:
        stacked = _stack_common([model.cpc_embed(c) for c in samples])
        if stacked is not None:
            cpc_term, n_terms = infonce_loss(stacked, model.config.tau_frames)
    return rec, kld, cpc_term, n_terms


def compute_losses(
    batch: list[LogMelSpectrogram],
    model: FVAE,
    generator: torch.Generator | None = None,
) -> LossBreakdown:
    """Loss breakdown on one language-homogeneous batch (no update)."""
    with torch.no_grad():
        rec, kld, cpc_term, n_terms = _batch_losses(model, batch, generator)
    cpc_value = float(cpc_term) if cpc_term is not None else 0.0
    cfg = model.config
    total = float(rec) + cfg.beta * float(kld) - cfg.cpc_weight * cpc_value
    return LossBreakdown(float(rec), float(kld), cpc_value, total, n_terms)


@dataclass
class FVAETrainState:
    fvae_opt: torch.optim.Adam
    adversary_opt: torch.optim.Adam
    generator: torch.Generator
    step: int = 0


def make_train_state(model: FVAE, seed: int = 0) -> FVAETrainState:
    lr = model.config.learning_rate
    generator = torch.Generator()
    generator.manual_seed(seed)
    return FVAETrainState(
        fvae_opt=torch.optim.Adam(list(model.fvae_parameters()), lr=lr),
        adversary_opt=torch.optim.Adam(list(model.adversary_parameters()), lr=lr),
        generator=generator,
    )


def training_step(
    batch: list[LogMelSpectrogram], model: FVAE, state: FVAETrainState
) -> LossBreakdown:
    """One alternating update: CPC-adversary step, then FVAE step.

    The adversary minimizes the CPC loss through its own weights only
    (content input detached); the FVAE step minimizes
    rec + beta * kld - cpc_weight * cpc through content, style and decoder
    weights. Batches too small or too short for contrast train rec + kld only.
    """
    cfg = model.config

    if len(batch) >= 2:
        with torch.no_grad():
            detached = []
            for feat in batch:
                y = model._as_input(feat.values)
                mean, logvar = model.content_mean_logvar(y)
                detached.append(reparameterize(mean, logvar, generator=state.generator))
        stacked = _stack_common([model.cpc_embed(c) for c in detached])
        adv_loss, _ = (None, 0) if stacked is None else infonce_loss(stacked, cfg.tau_frames)
        if adv_loss is not None:
            state.adversary_opt.zero_grad()
            adv_loss.backward()
            nn.utils.clip_grad_norm_(list(model.adversary_parameters()), cfg.grad_clip)
            state.adversary_opt.step()
    else:
        logger.warning("batch of size %d: CPC adversary skipped", len(batch))

    rec, kld, cpc_term, n_terms = _batch_losses(model, batch, state.generator)
    cpc_value = cpc_term if cpc_term is not None else rec.new_zeros(())
    total = rec + cfg.beta * kld - cfg.cpc_weight * cpc_value
    state.fvae_opt.zero_grad()
    state.adversary_opt.zero_grad()
    total.backward()
    nn.utils.clip_grad_norm_(list(model.fvae_parameters()), cfg.grad_clip)
    state.fvae_opt.step()
    state.adversary_opt.zero_grad()  # discard adversary grads from the FVAE pass
    state.step += 1
    return LossBreakdown(
        float(rec.detach()),
        float(kld.detach()),
        float(cpc_value.detach()),
        float(total.detach()),
        n_terms,
    )


def train_fvae(
    manifest,
    feature_fn,
    model: FVAE,
    steps: int,
    batch_size: int = 16,
    seed: int = 0,
    log_every: int = 100,
) -> list[LossBreakdown]:
    """Train on language-homogeneous batches drawn from a manifest.

    ``feature_fn(record)`` must return the normalized 80-band features of one
    utterance. Epochs are reshuffled with seeds derived from ``seed``.
    """
    from .dataio import build_language_batches

    state = make_train_state(model, seed)
    history: list[LossBreakdown] = []
    epoch = 0
    batches: list = []
    while state.step < steps:
        if not batches:
            batches = build_language_batches(manifest, batch_size, seed=seed + epoch)
            epoch += 1
        records = batches.pop(0)
        feats = [feature_fn(r) for r in records]
        breakdown = training_step(feats, model, state)
        history.append(breakdown)
        if log_every and state.step % log_every == 0:
            logger.info(
                "fvae step %d: rec=%.4f kld=%.4f cpc=%.4f total=%.4f",
                state.step, breakdown.rec, breakdown.kld, breakdown.cpc, breakdown.total,
            )
    return history


CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, model: FVAE, state: FVAETrainState | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "model": model.state_dict(),
    }
    if state is not None:
        payload["fvae_opt"] = state.fvae_opt.state_dict()
        payload["adversary_opt"] = state.adversary_opt.state_dict()
        payload["step"] = state.step
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> FVAE:
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {payload.get('version')}")
    config = FVAEConfig(**payload["config"])
    model = FVAE(config)
    model.load_state_dict(payload["model"])
    return model
