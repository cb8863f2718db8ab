"""
Numeric helpers shared by the exact engine and the bounds
Powers of the per-direction contraction factor (1 - eta * lambda) and their geometric sums
"""

import numpy as np

# below this rate the geometric sum switches to its lambda -> 0 limit
SMALL_RATE = 1e-14


def pairwise_dot(a: np.ndarray, b: np.ndarray) -> float:
    """Inner product with numpy's pairwise summation (np.dot goes through BLAS and is not pairwise)"""
    return float(np.sum(np.asarray(a, dtype=float) * np.asarray(b, dtype=float)))


def contraction_power(rate: np.ndarray, n: int) -> np.ndarray:
    """
    Elementwise (1 - rate)^n

    Args:
        rate: eta * lambda per eigen-direction (non-negative)
        n: non-negative exponent

    Returns:
        Array of the same shape as rate
    """
    rate = np.asarray(rate, dtype=float)
    if n == 0:
        return np.ones_like(rate)
    small = rate < 0.5
    # log1p keeps the low bits when rate is tiny
    via_log = np.exp(n * np.log1p(-np.where(small, rate, 0.0)))
    return np.where(small, via_log, np.power(1.0 - rate, n))


def one_minus_power(rate: np.ndarray, n: int) -> np.ndarray:
    """
    Elementwise 1 - (1 - rate)^n without cancellation for small rate

    Args:
        rate: eta * lambda per eigen-direction (non-negative)
        n: non-negative exponent

    Returns:
        Array of the same shape as rate
    """
    rate = np.asarray(rate, dtype=float)
    if n == 0:
        return np.zeros_like(rate)
    small = rate < 0.5
    via_log = -np.expm1(n * np.log1p(-np.where(small, rate, 0.0)))
    return np.where(small, via_log, 1.0 - np.power(1.0 - rate, n))


def geometric_tail_sum(rate: np.ndarray, n: int) -> np.ndarray:
    """
    Elementwise g(n) = sum_{r=1}^{n} (1 - rate)^r

    Uses the closed form (1 - rate) * (1 - (1 - rate)^n) / rate and the
    limit g(n) = n for directions with rate below SMALL_RATE.

    Args:
        rate: eta * lambda per eigen-direction (non-negative)
        n: number of terms (non-negative)

    Returns:
        Array of the same shape as rate
    """
    rate = np.asarray(rate, dtype=float)
    if n == 0:
        return np.zeros_like(rate)
    regular = np.abs(rate) >= SMALL_RATE
    safe = np.where(regular, rate, 1.0)
    closed = (1.0 - safe) * one_minus_power(safe, n) / safe
    return np.where(regular, closed, float(n))
