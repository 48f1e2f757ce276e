"""Independent reference implementations used to check the package.

Nothing here imports the code under test; each oracle is written from the
defining formula with plain Python loops or scipy.
"""
import math


def pbs_transmit(angle_state_deg, axis_deg, ratio):
    d = math.radians(angle_state_deg - axis_deg)
    if math.isinf(ratio):
        return math.cos(d) ** 2
    return (ratio * math.cos(d) ** 2 + math.sin(d) ** 2) / (ratio + 1)


def brute_force_pairs(bob, eve, start, end):
    """All-pairs O(n*m) gate pairing with the closest-then-earlier-Bob rule."""
    pairs = []
    for j, te in enumerate(eve):
        best = None
        for i, tb in enumerate(bob):
            d = te - tb
            if start <= d < end:
                key = (abs(d), i)
                if best is None or key < best[0]:
                    best = (key, i)
        if best is not None:
            pairs.append((best[1], j))
    return pairs


def binary_entropy(x):
    if x in (0, 1):
        return 0.0
    return -x * math.log2(x) - (1 - x) * math.log2(1 - x)


def bb84_tagged_rate(p_det, e, leak, p_e):
    a = (p_det - p_e) / p_det
    if a <= 0 or e / a > 0.5:
        return 0.0
    return max(0.0, a * p_det * (1 - binary_entropy(e / a)) - leak)


def profile_cdf(t, rise, decay, quench, residual):
    """CDF of (1 - e^{-t/r}) e^{-t/d} on [0, q] plus an exponential tail, by quadrature."""
    from scipy.integrate import quad

    def dens(s):
        return (1 - math.exp(-s / rise)) * math.exp(-s / decay)

    total = quad(dens, 0, quench)[0]
    if t <= 0:
        return 0.0
    if t <= quench:
        return (1 - residual) * quad(dens, 0, t)[0] / total
    return (1 - residual) + residual * (1 - math.exp(-(t - quench) / rise))


def sequential_dead_time(times, dead):
    kept, last = [], None
    for t in times:
        if last is None or t - last >= dead:
            kept.append(t)
            last = t
    return kept


def binomial_sigma(n, p):
    return math.sqrt(n * p * (1 - p))
