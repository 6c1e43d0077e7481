"""Acoustic unit discovery with a VAE whose latent prior is an HMM.

A frame-wise encoder/decoder pair autoencodes the 120-map unit-discovery
features through a Gaussian latent; instead of a standard normal prior, the
latent sequence is modeled by an HMM whose states carry diagonal Gaussian
emissions. Each acoustic unit owns a left-to-right chain of three states with
self-loops; the last state of a unit can enter the first state of any unit.
State posteriors are approximated by the Viterbi path, so training alternates
hard re-alignment with one gradient step on the negative evidence lower
bound. All constrained quantities (transition rows, initial weights,
variances) are kept valid structurally via softmax / log parametrization.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .features import HOP_SECONDS, LogMelSpectrogram
from .segments import Segment

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)

__all__ = [
    "HMMVAEConfig",
    "HMMPrior",
    "HMMVAE",
    "build_hmmvae",
    "StateAlignment",
    "AUTranscription",
    "viterbi",
    "viterbi_align",
    "ELBOBreakdown",
    "elbo_hmmvae",
    "split_duration",
    "expand_unit_states",
    "sample_random_alignment",
    "pretrain_random_alignments",
    "train_hmmvae",
    "DivergenceError",
    "decode_to_units",
    "states_to_transcription",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class HMMVAEConfig:
    feat_dim: int = 120
    latent_dim: int = 32
    hidden_dims: tuple = (256, 256)
    n_units: int = 80
    states_per_unit: int = 3
    sigma2: float = 1.0  # fixed observation variance
    unit_bigram: str = "learned"  # "learned" or "uniform" exit transitions
    learning_rate: float = 1e-3
    grad_clip: float = 5.0
    batch_size: int = 16
    min_unit_duration: int = 5  # frames, random-alignment pretraining
    max_unit_duration: int = 30

    def __post_init__(self):
        if self.states_per_unit < 1:
            raise ValueError("states_per_unit must be positive")
        if self.sigma2 <= 0:
            raise ValueError("observation variance must be positive")
        if self.unit_bigram not in ("learned", "uniform"):
            raise ValueError(f"unknown unit_bigram mode {self.unit_bigram!r}")
        if self.min_unit_duration < self.states_per_unit:
            raise ValueError(
                "min_unit_duration must be at least states_per_unit so that "
                "every non-final unit can traverse its state chain"
            )

    @property
    def num_states(self) -> int:
        return self.n_units * self.states_per_unit


@dataclass
class StateAlignment:
    """Frame-wise HMM state indices for one utterance."""

    states: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        if self.states.ndim != 1 or self.states.size == 0:
            raise ValueError("alignment must be a non-empty 1-D state sequence")
        if self.states.min() < 0:
            raise ValueError("state indices must be non-negative")

    def __len__(self) -> int:
        return len(self.states)

    def unit_labels(self, states_per_unit: int = 3) -> np.ndarray:
        return self.states // states_per_unit


@dataclass
class AUTranscription:
    """Contiguous unit segments covering [0, T) frames of one utterance."""

    utterance_id: str
    units: list[tuple[int, int, int]]  # (unit_id, start_frame, end_frame)
    hop_seconds: float = HOP_SECONDS

    def __post_init__(self):
        prev_end = 0
        for unit_id, start, end in self.units:
            if start != prev_end or end <= start:
                raise ValueError(
                    f"segments of {self.utterance_id!r} must be contiguous and non-empty"
                )
            prev_end = end

    @property
    def num_frames(self) -> int:
        return self.units[-1][2] if self.units else 0

    def frame_labels(self) -> np.ndarray:
        labels = np.empty(self.num_frames, dtype=np.int64)
        for unit_id, start, end in self.units:
            labels[start:end] = unit_id
        return labels

    def to_segments(self) -> list[Segment]:
        return [
            Segment(
                self.utterance_id,
                start * self.hop_seconds,
                (end - start) * self.hop_seconds,
                str(unit_id),
            )
            for unit_id, start, end in self.units
        ]


class HMMPrior(nn.Module):
    """Masked-softmax HMM parameters over the unit/state topology."""

    def __init__(self, config: HMMVAEConfig):
        super().__init__()
        self.config = config
        ns, nu = config.num_states, config.n_units
        self.self_logits = nn.Parameter(torch.ones(ns))
        self.advance_logits = nn.Parameter(torch.zeros(ns))
        if config.unit_bigram == "learned":
            self.exit_logits = nn.Parameter(torch.zeros(nu, nu))
        else:
            self.register_buffer("exit_logits", torch.zeros(nu, nu))
        self.init_logits = nn.Parameter(torch.zeros(nu))
        self.means = nn.Parameter(torch.randn(ns, config.latent_dim))
        self.log_variances = nn.Parameter(torch.zeros(ns, config.latent_dim))

    def log_transition_matrix(self) -> torch.Tensor:
        """Dense (N_S, N_S) log-transition matrix; disallowed entries -inf."""
        cfg = self.config
        ns, nu, spu = cfg.num_states, cfg.n_units, cfg.states_per_unit
        states = torch.arange(ns)
        pos = states % spu
        log_a = self.self_logits.new_full((ns, ns), float("-inf"))

        inner = states[pos != spu - 1]
        if len(inner):
            pair = torch.stack(
                [self.self_logits[inner], self.advance_logits[inner]], dim=1
            )
            pair = pair - torch.logsumexp(pair, dim=1, keepdim=True)
            log_a[inner, inner] = pair[:, 0]
            log_a[inner, inner + 1] = pair[:, 1]

        last = states[pos == spu - 1]
        row = torch.cat([self.self_logits[last].unsqueeze(1), self.exit_logits], dim=1)
        row = row - torch.logsumexp(row, dim=1, keepdim=True)
        log_a[last, last] = row[:, 0]
        first = torch.arange(nu) * spu
        log_a[last.unsqueeze(1), first.unsqueeze(0)] = row[:, 1:]
        return log_a

    def log_initial(self) -> torch.Tensor:
        """(N_S,) initial log-weights; only unit-first states are allowed."""
        cfg = self.config
        out = self.init_logits.new_full((cfg.num_states,), float("-inf"))
        first = torch.arange(cfg.n_units) * cfg.states_per_unit
        out[first] = torch.log_softmax(self.init_logits, dim=0)
        return out

    def emission_log_likelihood(self, x: torch.Tensor) -> torch.Tensor:
        """(T, N_S) diagonal-Gaussian log-likelihoods of latent frames."""
        diff = x.unsqueeze(1) - self.means.unsqueeze(0)
        lv = self.log_variances.unsqueeze(0)
        return -0.5 * (LOG_2PI + lv + diff**2 / lv.exp()).sum(-1)


def _mlp(dims: list[int]) -> nn.Sequential:
    layers = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(nn.GELU())
    return nn.Sequential(*layers)


class HMMVAE(nn.Module):
    def __init__(self, config: HMMVAEConfig | None = None):
        super().__init__()
        self.config = config or HMMVAEConfig()
        cfg = self.config
        hidden = list(cfg.hidden_dims)
        self.encoder_net = _mlp([cfg.feat_dim] + hidden + [2 * cfg.latent_dim])
        self.decoder_net = _mlp([cfg.latent_dim] + hidden + [cfg.feat_dim])
        self.prior = HMMPrior(cfg)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def encode(self, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.encoder_net(y)
        d = self.config.latent_dim
        return out[..., :d], out[..., d:]

    def decode(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder_net(x)

    def _as_input(self, values) -> torch.Tensor:
        y = torch.as_tensor(np.asarray(values), dtype=self.dtype)
        if y.ndim != 2 or y.shape[1] != self.config.feat_dim:
            raise ValueError(
                f"expected frames x {self.config.feat_dim} features, got {tuple(y.shape)}"
            )
        return y

    def posterior_means(self, values) -> torch.Tensor:
        with torch.no_grad():
            mean, _ = self.encode(self._as_input(values))
        return mean


def build_hmmvae(config: HMMVAEConfig | None = None, seed: int = 0) -> HMMVAE:
    torch.manual_seed(seed)
    return HMMVAE(config)


def viterbi(
    log_initial: np.ndarray, log_transitions: np.ndarray, log_emissions: np.ndarray
) -> tuple[np.ndarray, float]:
    """Max-probability state path in the log domain.

    ``log_emissions`` is (T, N); -inf entries encode disallowed transitions,
    NaN anywhere is an error. Returns the path and its joint log-probability.
    """
    log_initial = np.asarray(log_initial, dtype=np.float64)
    log_transitions = np.asarray(log_transitions, dtype=np.float64)
    log_emissions = np.asarray(log_emissions, dtype=np.float64)
    for name, arr in (
        ("initial", log_initial), ("transition", log_transitions), ("emission", log_emissions),
    ):
        if np.isnan(arr).any() or (arr == np.inf).any():
            raise ValueError(f"non-finite {name} scores")

    t_len, ns = log_emissions.shape
    back = np.zeros((t_len, ns), dtype=np.int64)
    score = log_initial + log_emissions[0]
    for t in range(1, t_len):
        cand = score[:, None] + log_transitions
        back[t] = np.argmax(cand, axis=0)
        score = cand[back[t], np.arange(ns)] + log_emissions[t]

    states = np.zeros(t_len, dtype=np.int64)
    states[-1] = int(np.argmax(score))
    log_prob = float(score[states[-1]])
    for t in range(t_len - 1, 0, -1):
        states[t - 1] = back[t, states[t]]
    return states, log_prob


def viterbi_align(latent, model: HMMVAE) -> tuple[StateAlignment, float]:
    """Viterbi path of a (T, latent_dim) sequence under the current HMM."""
    x = torch.as_tensor(np.asarray(latent), dtype=model.dtype)
    with torch.no_grad():
        emissions = model.prior.emission_log_likelihood(x).numpy()
        log_a = model.prior.log_transition_matrix().numpy()
        log_pi = model.prior.log_initial().numpy()
    states, log_prob = viterbi(log_pi, log_a, emissions)
    return StateAlignment(states), log_prob


@dataclass
class ELBOBreakdown:
    rec: float  # sum of squared errors / (2 sigma^2)
    kl: float  # KL(q(x_t) || aligned-state Gaussian), summed
    transition: float  # negative log initial/transition scores along the path
    frames: int

    @property
    def total(self) -> float:
        return self.rec + self.kl + self.transition


def elbo_hmmvae(
    batch: list,
    model: HMMVAE,
    alignments: list[StateAlignment],
    generator: torch.Generator | None = None,
    eps: list | None = None,
):
    """Negative ELBO of a batch under fixed hard alignments.

    ``batch`` holds (T, feat_dim) matrices (or LogMelSpectrogram). Returns
    ``(loss, breakdown)`` where ``loss`` is a differentiable scalar summing
    reconstruction, latent KL against the aligned state Gaussians, and
    negative transition scores over the whole batch. ``eps`` injects
    reparameterization noise per utterance (tests).
    """
    cfg = model.config
    log_a = model.prior.log_transition_matrix()
    log_pi = model.prior.log_initial()
    rec_sum = kl_sum = trans_sum = None
    frames = 0

    for i, item in enumerate(batch):
        values = item.values if isinstance(item, LogMelSpectrogram) else item
        y = model._as_input(values)
        align = alignments[i]
        if len(align) != y.shape[0]:
            raise ValueError(
                f"alignment length {len(align)} does not match {y.shape[0]} frames"
            )
        mean, logvar = model.encode(y)
        if eps is not None:
            noise = torch.as_tensor(np.asarray(eps[i]), dtype=model.dtype)
        else:
            noise = torch.randn(mean.shape, generator=generator, dtype=model.dtype)
        x = mean + torch.exp(0.5 * logvar) * noise
        y_hat = model.decode(x)
        rec = ((y - y_hat) ** 2).sum() / (2.0 * cfg.sigma2)

        idx = torch.as_tensor(align.states)
        mu_z = model.prior.means[idx]
        lv_z = model.prior.log_variances[idx]
        kl = 0.5 * (
            lv_z - logvar + (logvar.exp() + (mean - mu_z) ** 2) / lv_z.exp() - 1.0
        ).sum()

        trans = -(log_pi[idx[0]] + log_a[idx[:-1], idx[1:]].sum())

        rec_sum = rec if rec_sum is None else rec_sum + rec
        kl_sum = kl if kl_sum is None else kl_sum + kl
        trans_sum = trans if trans_sum is None else trans_sum + trans
        frames += y.shape[0]

    loss = rec_sum + kl_sum + trans_sum
    breakdown = ELBOBreakdown(float(rec_sum), float(kl_sum), float(trans_sum), frames)
    return loss, breakdown


def split_duration(duration: int, states_per_unit: int, rng: np.random.Generator) -> np.ndarray:
    """Random composition of a unit duration over its states.

    All parts are positive when the duration allows it; shorter (final,
    truncated) units occupy only a prefix of the state chain.
    """
    if duration < 1:
        raise ValueError("duration must be positive")
    if duration < states_per_unit:
        parts = np.zeros(states_per_unit, dtype=np.int64)
        parts[:duration] = 1
        return parts
    cuts = np.sort(rng.choice(np.arange(1, duration), size=states_per_unit - 1, replace=False))
    return np.diff(np.concatenate([[0], cuts, [duration]])).astype(np.int64)


def expand_unit_states(unit_id: int, parts, states_per_unit: int = 3) -> np.ndarray:
    """Left-to-right state expansion of one unit given per-state frame counts."""
    parts = np.asarray(parts, dtype=np.int64)
    if parts.shape != (states_per_unit,):
        raise ValueError(f"expected {states_per_unit} parts, got {parts.shape}")
    return np.repeat(unit_id * states_per_unit + np.arange(states_per_unit), parts)


def sample_random_alignment(
    num_frames: int, config: HMMVAEConfig, rng: np.random.Generator
) -> StateAlignment:
    """Random unit sequence with random durations and within-unit splits."""
    if num_frames < 1:
        raise ValueError("cannot align an empty utterance")
    chunks = []
    remaining = num_frames
    while remaining > 0:
        unit = int(rng.integers(config.n_units))
        duration = int(rng.integers(config.min_unit_duration, config.max_unit_duration + 1))
        duration = min(duration, remaining)
        parts = split_duration(duration, config.states_per_unit, rng)
        chunks.append(expand_unit_states(unit, parts, config.states_per_unit))
        remaining -= duration
    return StateAlignment(np.concatenate(chunks))


def _feature_values(item) -> np.ndarray:
    return item.values if isinstance(item, LogMelSpectrogram) else np.asarray(item)


def _utterance_id(item, index: int) -> str:
    if isinstance(item, LogMelSpectrogram) and item.utterance_id:
        return item.utterance_id
    return f"utt{index:06d}"


class DivergenceError(RuntimeError):
    """Training loss became non-finite; carries the last good state."""

    def __init__(self, step: int, recovered_state: dict):
        super().__init__(f"training diverged at step {step}")
        self.step = step
        self.recovered_state = recovered_state


def _train_loop(
    corpus: list,
    model: HMMVAE,
    iterations: int,
    seed: int,
    fixed_alignments: list[StateAlignment] | None,
    log_every: int,
    snapshot_every: int = 100,
) -> list[dict]:
    """Shared optimizer loop; realigns per batch unless alignments are fixed."""
    cfg = model.config
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(seed)
    generator = torch.Generator()
    generator.manual_seed(seed)
    history: list[dict] = []
    snapshot = copy.deepcopy(model.state_dict())
    n = len(corpus)

    for step in range(1, iterations + 1):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        batch = [_feature_values(corpus[i]) for i in idx]
        if fixed_alignments is not None:
            alignments = [fixed_alignments[i] for i in idx]
        else:
            alignments = [
                viterbi_align(model.posterior_means(values), model)[0]
                for values in batch
            ]
        loss, breakdown = elbo_hmmvae(batch, model, alignments, generator=generator)
        scaled = loss / breakdown.frames
        if not torch.isfinite(scaled):
            model.load_state_dict(snapshot)
            raise DivergenceError(step, snapshot)
        opt.zero_grad()
        scaled.backward()
        nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        history.append({
            "step": step,
            "loss": float(scaled),
            "rec": breakdown.rec,
            "kl": breakdown.kl,
            "transition": breakdown.transition,
            "frames": breakdown.frames,
        })
        if step % snapshot_every == 0:
            snapshot = copy.deepcopy(model.state_dict())
        if log_every and step % log_every == 0:
            logger.info("hmmvae step %d: loss/frame=%.4f", step, float(scaled))
    return history


def pretrain_random_alignments(
    corpus: list, model: HMMVAE, iterations: int = 2000, seed: int = 0, log_every: int = 200
) -> list[dict]:
    """Pseudo-supervised pretraining against one fixed random alignment per
    utterance."""
    rng = np.random.default_rng(seed)
    fixed = [
        sample_random_alignment(_feature_values(item).shape[0], model.config, rng)
        for item in corpus
    ]
    return _train_loop(corpus, model, iterations, seed, fixed, log_every)


def train_hmmvae(
    corpus: list, model: HMMVAE, iterations: int = 20000, seed: int = 0, log_every: int = 500
) -> list[dict]:
    """Coordinate-ascent training: per batch, Viterbi re-alignment under the
    current parameters followed by one Adam step on the negative ELBO."""
    return _train_loop(corpus, model, iterations, seed, None, log_every)


def states_to_transcription(
    alignment: StateAlignment,
    utterance_id: str,
    states_per_unit: int = 3,
    hop_seconds: float = HOP_SECONDS,
) -> AUTranscription:
    """Merge consecutive frames sharing a unit into contiguous segments."""
    units = alignment.unit_labels(states_per_unit)
    change = np.nonzero(units[1:] != units[:-1])[0] + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [len(units)]])
    segments = [
        (int(units[s]), int(s), int(e)) for s, e in zip(starts, ends)
    ]
    return AUTranscription(utterance_id, segments, hop_seconds)


def decode_to_units(corpus: list, model: HMMVAE) -> list[AUTranscription]:
    """Viterbi-decode every utterance into unit segments."""
    out = []
    for i, item in enumerate(corpus):
        values = _feature_values(item)
        alignment, _ = viterbi_align(model.posterior_means(values), model)
        out.append(
            states_to_transcription(
                alignment, _utterance_id(item, i), model.config.states_per_unit
            )
        )
    return out


CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, model: HMMVAE, step: int = 0) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": asdict(model.config),
            "model": model.state_dict(),
            "step": step,
        },
        path,
    )


def load_checkpoint(path: str | Path) -> HMMVAE:
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {payload.get('version')}")
    model = HMMVAE(HMMVAEConfig(**payload["config"]))
    model.load_state_dict(payload["model"])
    return model
