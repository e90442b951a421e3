"""Independent numerical oracles used by the test suite.

Everything here is deliberately brute force and shares no code with the
package under test.
"""

import numpy as np


def finite_difference_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function f at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a - n| / max(1, |a| + |n|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.abs(a) + np.abs(n))
    return float(np.max(np.abs(a - n) / denom))


def autocorrelation_pitch(samples: np.ndarray, sample_rate: int,
                          fmin: float = 60.0, fmax: float = 800.0) -> float:
    """Fundamental frequency estimate from the autocorrelation peak."""
    x = np.asarray(samples, dtype=np.float64)
    x = x - x.mean()
    n = x.size
    ac = np.correlate(x, x, mode="full")[n - 1:]
    lag_min = max(1, int(sample_rate / fmax))
    lag_max = min(n - 1, int(sample_rate / fmin))
    lag = lag_min + int(np.argmax(ac[lag_min:lag_max + 1]))
    return sample_rate / lag


def dense_sinc_interpolate(x: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Ideal band-limited interpolation: full sinc sum over every sample."""
    x = np.asarray(x, dtype=np.float64)
    k = np.arange(x.size)
    return np.array([np.sum(x * np.sinc(p - k)) for p in positions])


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(np.asarray(x, dtype=np.float64)))))
