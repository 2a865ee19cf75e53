"""HKY85 substitution model and tree likelihoods.

Nucleotide order is A, C, G, T (codes 0..3; code 4 marks missing data).
The rate matrix is scaled so one unit of branch length equals one
expected substitution per site at stationarity, which keeps branch
lengths in the same units as the species tree.

Trees are the nested tuples produced by history replay:

    ("L", label)                      leaf
    ("N", ((child, length), ...))     internal node

with lengths on the child edges and the root prior applied at the top.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

A, C, G, T = 0, 1, 2, 3
MISSING = 4
_PURINES = (A, G)

BASE_CODES = {"A": A, "C": C, "G": G, "T": T, "a": A, "c": C, "g": G, "t": T}


class SubstitutionError(ValueError):
    pass


@dataclass(frozen=True)
class HkyParams:
    kappa: float
    pi: tuple[float, float, float, float]

    def __post_init__(self):
        if not self.kappa > 0:
            raise SubstitutionError("kappa must be positive")
        if len(self.pi) != 4 or any(not p > 0 for p in self.pi):
            raise SubstitutionError("pi must be four positive frequencies")
        if abs(sum(self.pi) - 1.0) > 1e-8:
            raise SubstitutionError("pi must sum to 1")


def hky_rate_matrix(hky: HkyParams) -> np.ndarray:
    """Normalized HKY rate matrix Q with -sum(pi_i * Q_ii) == 1."""
    pi = np.asarray(hky.pi)
    q = np.empty((4, 4))
    for i in range(4):
        for j in range(4):
            if i == j:
                continue
            rate = pi[j]
            if (i in _PURINES) == (j in _PURINES):
                rate *= hky.kappa
            q[i, j] = rate
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))
    scale = -float(np.dot(pi, np.diag(q)))
    return q / scale


def hky_transition(t: float, hky: HkyParams) -> np.ndarray:
    """Closed-form transition probability matrix P(t); rows sum to 1."""
    if t < 0:
        raise SubstitutionError("branch length must be nonnegative")
    pi_a, pi_c, pi_g, pi_t = hky.pi
    pi_r = pi_a + pi_g
    pi_y = pi_c + pi_t
    kappa = hky.kappa
    beta = 1.0 / (2.0 * pi_r * pi_y + 2.0 * kappa * (pi_a * pi_g + pi_c * pi_t))
    e2 = np.exp(-beta * t)
    pi = np.asarray(hky.pi)
    group = np.array([pi_r, pi_y, pi_r, pi_y])
    e3 = np.exp(-beta * t * (1.0 + group * (kappa - 1.0)))
    p = np.empty((4, 4))
    for j in range(4):
        pj, gj, e3j = pi[j], group[j], e3[j]
        same_group_off = pj + pj * (1.0 / gj - 1.0) * e2 - (pj / gj) * e3j
        diag = pj + pj * (1.0 / gj - 1.0) * e2 + ((gj - pj) / gj) * e3j
        cross = pj * (1.0 - e2)
        for i in range(4):
            if i == j:
                p[i, j] = diag
            elif (i in _PURINES) == (j in _PURINES):
                p[i, j] = same_group_off
            else:
                p[i, j] = cross
    return p


def encode_sequence(seq: str) -> np.ndarray:
    """Map a nucleotide string to codes; unknown characters are missing."""
    return np.array([BASE_CODES.get(ch, MISSING) for ch in seq], dtype=np.uint8)


_LEAF_ROWS = np.vstack([np.eye(4), np.ones(4)])


def pruning_log_likelihood(tree, alignment: dict, hky: HkyParams) -> float:
    """Felsenstein pruning over a segment tree.

    ``alignment`` maps leaf labels to equal-length uint8 code arrays.
    Missing data contributes a factor of 1. Per-node rescaling keeps the
    computation stable for long alignments.
    """

    def partial(node) -> tuple[np.ndarray, np.ndarray]:
        if node[0] == "L":
            codes = alignment[node[1]]
            liks = _LEAF_ROWS[codes]
            return liks, np.zeros(len(codes))
        acc = None
        log_scale = None
        for child, length in node[1]:
            child_liks, child_scale = partial(child)
            p = hky_transition(length, hky)
            contrib = child_liks @ p.T
            if acc is None:
                acc = contrib
                log_scale = child_scale
            else:
                acc = acc * contrib
                log_scale = log_scale + child_scale
        peak = acc.max(axis=1)
        peak = np.where(peak > 0, peak, 1.0)
        acc = acc / peak[:, None]
        return acc, log_scale + np.log(peak)

    liks, log_scale = partial(tree)
    pi = np.asarray(hky.pi)
    site = liks @ pi
    if np.any(site <= 0):
        return float("-inf")
    return float(np.sum(np.log(site) + log_scale))
