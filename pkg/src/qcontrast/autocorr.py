"""Autocorrelation and the learnable-autocorrelation view of a quadratic neuron.

Lags follow the deep-learning (translation-only) convention:
``R[tau] = sum_i x[i] * x[i + tau]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError

EPS = 1e-12


def autocorrelation(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) < 1:
        raise DimensionError("autocorrelation expects a non-empty 1-D sequence")
    return np.correlate(x, x, mode="full")[len(x) - 1 :]


def learnable_autocorrelation(x, weights) -> np.ndarray:
    """Lag-wise weighted autocorrelation; ``weights[tau]`` has length ``n - tau``."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if len(weights) != n:
        raise DimensionError(f"expected {n} per-lag weight vectors, got {len(weights)}")
    out = np.empty(n)
    for tau, w in enumerate(weights):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (n - tau,):
            raise DimensionError(f"lag {tau}: weight vector has length {len(w)}, expected {n - tau}")
        out[tau] = np.dot(w, x[: n - tau] * x[tau:])
    return out


@dataclass
class AutocorrDecomposition:
    """Per-position split of a single-channel quadratic conv pre-activation."""

    autocorr_part: np.ndarray
    conv_part: np.ndarray
    constant: float
    lag_terms: np.ndarray  # [positions, k]: contribution of each lag
    lag_weights: np.ndarray  # [k, k]: row tau holds the weights of lag tau (length k - tau, zero padded)

    @property
    def total(self) -> np.ndarray:
        return self.autocorr_part + self.conv_part + self.constant


def lag_weights(w_r, w_g, w_b) -> np.ndarray:
    """Weights of each lag within one k-length window.

    Expanding (u.w_r)(u.w_g) + (u.u).w_b gives lag 0 weights
    ``w_r[i] w_g[i] + w_b[i]`` and, for lag tau >= 1, both cross products
    ``w_r[i] w_g[i+tau] + w_r[i+tau] w_g[i]``.
    """
    w_r, w_g, w_b = (np.asarray(w, dtype=np.float64) for w in (w_r, w_g, w_b))
    k = len(w_r)
    out = np.zeros((k, k))
    out[0] = w_r * w_g + w_b
    for tau in range(1, k):
        out[tau, : k - tau] = w_r[: k - tau] * w_g[tau:] + w_r[tau:] * w_g[: k - tau]
    return out


def decompose_quadratic(layer, x) -> AutocorrDecomposition:
    """Split a single-channel full quadratic conv into autocorrelation + convolution.

    ``layer`` is a :class:`~qcontrast.qnn.QuadraticConv1d` with one input and
    one output channel; ``x`` is a 1-D signal.
    """
    if getattr(layer, "variant", None) != "full":
        raise ConfigurationError("decomposition needs the full quadratic neuron")
    if layer.ch_in != 1 or layer.ch_out != 1:
        raise ConfigurationError(
            f"decomposition supports single-channel layers only, got {layer.ch_in} -> {layer.ch_out} channels"
        )
    p = layer.params
    w_r, w_g, w_b = (p[name].data[0, 0] for name in ("w_r", "w_g", "w_b"))
    b_r, b_g, c = (float(p[name].data[0]) for name in ("b_r", "b_g", "c"))
    x = np.asarray(x, dtype=np.float64)
    k, stride, pad = layer.k, layer.stride, layer.padding
    xp = np.pad(x, pad)
    if k > len(xp):
        raise DimensionError(f"kernel {k} longer than padded signal {len(xp)}")
    m = (len(xp) - k) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, k)[::stride][:m]

    weights = lag_weights(w_r, w_g, w_b)
    lag_terms = np.empty((m, k))
    for tau in range(k):
        lag_terms[:, tau] = (windows[:, : k - tau] * windows[:, tau:]) @ weights[tau, : k - tau]
    conv_part = b_r * (windows @ w_g) + b_g * (windows @ w_r)
    return AutocorrDecomposition(lag_terms.sum(axis=1), conv_part, b_r * b_g + c, lag_terms, weights)


@dataclass
class NoiseReport:
    r_xx: np.ndarray
    r_yy_mean: np.ndarray
    rel_dev: np.ndarray  # per lag, |r_yy - r_xx| / (|r_xx| + eps)
    lag0_inflation: float
    expected_lag0_inflation: float
    trials: int
    noise_std: float

    def max_rel_dev(self, max_lag: int | None = None) -> float:
        stop = len(self.rel_dev) if max_lag is None else max_lag + 1
        return float(self.rel_dev[1:stop].max()) if stop > 1 else 0.0

    def mean_rel_dev(self, max_lag: int) -> float:
        return float(self.rel_dev[1 : max_lag + 1].mean())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lag", "r_xx", "r_yy_mean", "rel_dev"])
            for lag, (a, b, d) in enumerate(zip(self.r_xx, self.r_yy_mean, self.rel_dev)):
                writer.writerow([lag, repr(float(a)), repr(float(b)), repr(float(d))])


def noise_suppression_report(clean, noise_std: float, trials: int, seed) -> NoiseReport:
    """Average the autocorrelation of ``clean + white noise`` over many trials."""
    if trials < 100:
        raise ConfigurationError(f"need at least 100 trials, got {trials}")
    clean = np.asarray(clean, dtype=np.float64)
    n = len(clean)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    r_xx = autocorrelation(clean)
    if noise_std == 0:
        r_yy = r_xx.copy()
    else:
        # zero-padded FFT gives the linear (not circular) autocorrelation
        size = 1 << (2 * n - 1).bit_length()
        acc = np.zeros(n)
        for _ in range(trials):
            y = clean + rng.normal(0.0, noise_std, n)
            spec = np.fft.rfft(y, size)
            acc += np.fft.irfft(spec * spec.conj(), size)[:n]
        r_yy = acc / trials
    rel = np.abs(r_yy - r_xx) / (np.abs(r_xx) + EPS)
    return NoiseReport(r_xx, r_yy, rel, float(r_yy[0] - r_xx[0]), n * noise_std**2, trials, noise_std)
