"""Alignment, distribution and reconstruction metrics judged by the oracle encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .world import PromptSpec, class_distribution, lcs_length, oracle_decode_events, oracle_encode_semantics

FD_EPS = 1e-6
KL_EPS = 1e-8


def set_f1(decoded, reference) -> float:
    a, b = set(decoded), set(reference)
    if not a or not b:
        return 0.0
    tp = len(a & b)
    return 2.0 * tp / (len(a) + len(b))


def alignment_from_events(decoded, prompt) -> tuple[float, float]:
    tokens = prompt.tokens if isinstance(prompt, PromptSpec) else tuple(prompt)
    order = lcs_length(decoded, tokens) / len(tokens) if tokens else 0.0
    return set_f1(decoded, tokens), order


def alignment_score(spectrogram, prompt) -> tuple[float, float]:
    """(event-set F1, LCS / prompt length) of the oracle-decoded events against the prompt."""
    return alignment_from_events(oracle_decode_events(spectrogram), prompt)


# ---------------------------------------------------------------- Fréchet distance

@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean {mean.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))


def feature_stats(features, eps: float = FD_EPS) -> FeatureStats:
    """Mean and eps-regularised covariance of row vectors."""
    x = np.asarray(features, dtype=np.float64)
    return FeatureStats(x.mean(axis=0), np.cov(x, rowvar=False) + eps * np.eye(x.shape[1]))


def pooled_features(spectrograms) -> np.ndarray:
    """Frame-averaged oracle semantic features, one 32-vector per clip."""
    return oracle_encode_semantics(spectrograms).mean(axis=-2)


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(real: FeatureStats, gen: FeatureStats) -> float:
    diff = real.mean - gen.mean
    try:
        root = psd_sqrt(real.cov)
        w = np.linalg.eigvalsh(root @ gen.cov @ root)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"eigendecomposition failed: {exc}") from exc
    cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    fd = float(diff @ diff + np.trace(real.cov) + np.trace(gen.cov) - 2.0 * cross)
    return max(fd, 0.0)


# ---------------------------------------------------------------- class-distribution metrics

def kl_divergence(p, q, eps: float = KL_EPS) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64) + eps
    q = np.asarray(q, dtype=np.float64) + eps
    p = p / p.sum(axis=-1, keepdims=True)
    q = q / q.sum(axis=-1, keepdims=True)
    return np.sum(p * np.log(p / q), axis=-1)


def kl_event_divergence(reference, generated, paired: bool = True) -> float:
    p = class_distribution(reference)
    q = class_distribution(generated)
    if paired:
        return float(np.mean(kl_divergence(p, q)))
    return float(kl_divergence(p.mean(axis=0), q.mean(axis=0)))


def inception_score(probs) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    marginal = probs.mean(axis=0)
    return float(np.exp(np.mean(kl_divergence(probs, marginal[None, :]))))


def is_analog(generated) -> float:
    return inception_score(class_distribution(generated))


# ---------------------------------------------------------------- reconstruction

def _pool_time(x: np.ndarray, k: int) -> np.ndarray:
    t = x.shape[-2] // k * k
    return x[..., :t, :].reshape(x.shape[:-2] + (t // k, k, x.shape[-1])).mean(axis=-2)


def recon_metrics(reference, generated) -> tuple[float, float]:
    """(full-resolution mean L1, mean of mean L1 after 1x/2x/4x time pooling)."""
    ref = np.asarray(reference, dtype=np.float64)
    gen = np.asarray(generated, dtype=np.float64)
    if ref.shape != gen.shape:
        raise ValueError(f"recon_metrics: shape mismatch {list(ref.shape)} vs {list(gen.shape)}")
    mel = float(np.mean(np.abs(ref - gen)))
    multi = float(np.mean([np.mean(np.abs(_pool_time(ref, k) - _pool_time(gen, k))) for k in (1, 2, 4)]))
    return mel, multi


