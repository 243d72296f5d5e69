"""Independent oracles shared by unit and acceptance tests.

These deliberately avoid the library's own code paths: exact rational or
big-integer arithmetic for the quantizer bounds, and plain numeric
integration for BD-rate.
"""
import math
from fractions import Fraction

import numpy as np

ACC_LIMIT = (1 << 31) - 1
K_CAP = 20


def oracle_round(v: Fraction) -> int:
    """Round half away from zero, exact."""
    if v < 0:
        return -oracle_round(-v)
    floor = v.numerator // v.denominator
    return floor + 1 if (v - floor) >= Fraction(1, 2) else floor


def oracle_max_safe_exponent(w_row, bias, spec, weight_bits, k_cap=K_CAP):
    """Linear scan over k with exact integer arithmetic; None if infeasible."""
    wmax = (1 << (weight_bits - 1)) - 1
    best = None
    for k in range(k_cap + 1):
        q_w = [oracle_round(Fraction(w) * 2**k) for w in w_row]
        q_b = oracle_round(Fraction(bias) * 2 ** (k + spec.scale_exp))
        if abs(q_b) > ACC_LIMIT:
            continue
        if sum(abs(q) for q in q_w) * spec.clip_bound + abs(q_b) > ACC_LIMIT:
            continue
        if weight_bits == 16 and q_w and max(abs(q) for q in q_w) > wmax:
            continue
        best = k
    return best


def oracle_8bit_argmin(w_row, bias, spec, k_cap=K_CAP):
    """Exhaustive scan with exact squared-error comparison; ties pick the
    largest exponent."""
    k_max = oracle_max_safe_exponent(w_row, bias, spec, 8, k_cap)
    best = None
    for k in range(k_max + 1):
        q_w = [min(127, max(-128, oracle_round(Fraction(w) * 2**k))) for w in w_row]
        q_b = oracle_round(Fraction(bias) * 2 ** (k + spec.scale_exp))
        if abs(q_b) > ACC_LIMIT:
            continue
        if sum(abs(q) for q in q_w) * spec.clip_bound + abs(q_b) > ACC_LIMIT:
            continue
        err = sum((Fraction(w) - Fraction(q, 2**k)) ** 2 for w, q in zip(w_row, q_w))
        if best is None or err <= best[0]:
            best = (err, k)
    return best[1]


def trapezoid_bd_rate(anchor, test, samples=100_000):
    """Numeric integration over the same cubic fits bd_rate uses."""
    qa = np.asarray([q for _, q in anchor.points], dtype=np.float64)
    qt = np.asarray([q for _, q in test.points], dtype=np.float64)
    ra = np.log([r for r, _ in anchor.points])
    rt = np.log([r for r, _ in test.points])
    lo, hi = max(qa.min(), qt.min()), min(qa.max(), qt.max())
    shift = 0.5 * (lo + hi)
    pa = np.polyfit(qa - shift, ra, 3)
    pt = np.polyfit(qt - shift, rt, 3)
    qs = np.linspace(lo, hi, samples) - shift
    diff = np.trapezoid(np.polyval(pt, qs) - np.polyval(pa, qs), qs) / (hi - lo)
    return (math.exp(diff) - 1.0) * 100.0
