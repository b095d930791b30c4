"""Expected wall-clock cost of training rounds.

A round costs the downlink of every personalized stream, the expected
compute time of the slowest client and one uplink slot:

    m_t * T_dl + (T_min + H_m / mu) + ul_multiplier * rho * T_dl

Computation times are shifted exponentials, so the slowest of ``m`` clients
takes ``T_min + H_m / mu`` on average. Downlink streams are serialized by
default (``dl_serialization``); uploads from different clients share the
channel and cost a single slot unless every client uploads several models
(``ul_multiplier``). This decomposition is a modelling choice.
"""

import csv
from dataclasses import dataclass
from fractions import Fraction

from .errors import ValidationError


@dataclass(frozen=True)
class CommSystem:
    rho: float
    T_dl: float
    T_min: float
    mu_inv: float
    m: int
    dl_serialization: bool = True
    ul_multiplier: float = 1

    def __post_init__(self):
        if not self.rho > 0 or not self.T_dl > 0:
            raise ValidationError("rho and T_dl must be positive")
        if self.T_min < 0 or self.mu_inv < 0:
            raise ValidationError("T_min and mu_inv must be non-negative")
        if self.m < 1:
            raise ValidationError("m must be >= 1")
        if not self.ul_multiplier > 0:
            raise ValidationError("ul_multiplier must be positive")


def harmonic_number(m, exact=False):
    if exact:
        return sum((Fraction(1, i) for i in range(1, m + 1)), Fraction(0))
    return sum(1.0 / i for i in range(1, m + 1))


def expected_compute_time(sys, exact=False):
    """Mean of the slowest client's compute time, ``T_min + H_m * mu_inv``.

    With ``exact=True`` the inputs are converted to fractions and the result
    is a :class:`fractions.Fraction`.
    """
    if exact:
        return Fraction(sys.T_min) + harmonic_number(sys.m, exact=True) * Fraction(sys.mu_inv)
    if sys.mu_inv == 0:
        return float(sys.T_min)
    return sys.T_min + harmonic_number(sys.m) * sys.mu_inv


def round_wall_time(sys, m_t, ul_multiplier=None):
    if not 1 <= m_t <= sys.m:
        raise ValidationError(f"need 1 <= m_t <= {sys.m}")
    ul = sys.ul_multiplier if ul_multiplier is None else ul_multiplier
    dl_streams = m_t if sys.dl_serialization else 1
    return dl_streams * sys.T_dl + expected_compute_time(sys) + ul * sys.rho * sys.T_dl


def rescale_timeline(log, sys, m_t, ul_multiplier=None):
    """``[(t * round_time / T_dl, mean_acc_t), ...]`` for every logged round."""
    if not log.summary:
        raise ValidationError("run log has no rounds")
    ul = log.uplink_multiplier if ul_multiplier is None else ul_multiplier
    per_round = round_wall_time(sys, m_t, ul) / sys.T_dl
    return [(row["round"] * per_round, row["mean_acc"]) for row in log.summary]


def write_timeline(rows, path):
    """``rows`` are ``(t_over_Tdl, mean_acc, algorithm, m_t)`` tuples."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t_over_Tdl", "mean_acc", "algorithm", "m_t"])
        for t, acc, algo, m_t in rows:
            writer.writerow([format(t, ".17g"), format(acc, ".17g"), algo, m_t])
