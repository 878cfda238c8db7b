"""Shared fixtures: the worked three-token example lattice and brute-force oracles.

The oracles enumerate every label sequence explicitly and never touch the
recursions under test; they are the reference for partition values, marginals,
k-best ordering, and finite-difference gradients.
"""

import itertools

import numpy as np
import pytest

from crfdistill.lattice import Lattice, Tagset, from_potential_tables

# Potentials of the worked example: 3 tokens, labels (F, T), start potential 1,
# pairwise potential tables for positions 1 and 2.
EX_START = [1.0, 1.0]
EX_PAIR_1 = [[2.0, 0.5], [0.5, 2.0]]
EX_PAIR_2 = [[1.0 / 3.0, 3.0], [4.0, 0.25]]

F, T = 0, 1

# Printed reference values (2-3 decimals in the source table).
EX_SEQ_PROBS = {
    (F, F, F): 0.035, (F, F, T): 0.316, (F, T, F): 0.105, (F, T, T): 0.007,
    (T, F, F): 0.009, (T, F, T): 0.079, (T, T, F): 0.422, (T, T, T): 0.026,
}
EX_TOP2 = [((T, T, F), 0.57), ((F, F, T), 0.43)]
EX_ALPHA = {F: [1.00, 2.50, 10.83], T: [1.00, 2.50, 8.13]}
EX_BETA = {F: [8.79, 3.33, 1.00], T: [10.17, 4.25, 1.00]}
EX_Q = {F: [0.46, 0.44, 0.57], T: [0.54, 0.56, 0.43]}


@pytest.fixture(scope="session")
def example_lattice() -> Lattice:
    return from_potential_tables([EX_PAIR_1, EX_PAIR_2], EX_START)


@pytest.fixture(scope="session")
def example_tagset() -> Tagset:
    return Tagset(("F", "T"))


def random_lattice(rng, n, v, scale=1.0, shared=True) -> Lattice:
    emissions = rng.normal(0.0, scale, size=(n, v))
    if shared:
        transitions = rng.normal(0.0, scale, size=(v + 1, v))
    else:
        transitions = rng.normal(0.0, scale, size=(n, v + 1, v))
    return Lattice(emissions, transitions)


# ---------------------------------------------------------------------------
# Enumeration oracles (independent of the recursions in crfdistill.lattice)
# ---------------------------------------------------------------------------

def oracle_trans_at(lat, pos):
    return lat.transitions if lat.transitions.ndim == 2 else lat.transitions[pos]


def oracle_path_score(lat, path):
    v = lat.num_labels
    s = lat.emissions[0, path[0]] + oracle_trans_at(lat, 0)[v, path[0]]
    for i in range(1, lat.n):
        s += lat.emissions[i, path[i]] + oracle_trans_at(lat, i)[path[i - 1], path[i]]
    return float(s)


def oracle_all_paths(lat):
    """All label sequences with their unnormalized log scores."""
    paths = list(itertools.product(range(lat.num_labels), repeat=lat.n))
    scores = np.array([oracle_path_score(lat, p) for p in paths])
    return paths, scores


def oracle_log_partition(lat):
    _, scores = oracle_all_paths(lat)
    m = scores.max()
    return float(m + np.log(np.exp(scores - m).sum()))


def oracle_marginals(lat):
    """q[i, j] by summing full-sequence probabilities with y_i = j fixed."""
    paths, scores = oracle_all_paths(lat)
    logz = oracle_log_partition(lat)
    probs = np.exp(scores - logz)
    q = np.zeros((lat.n, lat.num_labels))
    for p, pr in zip(paths, probs):
        for i, j in enumerate(p):
            q[i, j] += pr
    return q


def oracle_sorted_paths(lat):
    """Paths sorted by descending score, ties broken toward the lower label at
    the latest differing position (= ascending reversed-label tuple)."""
    paths, scores = oracle_all_paths(lat)
    order = sorted(range(len(paths)), key=lambda i: (-scores[i], tuple(reversed(paths[i]))))
    return [paths[i] for i in order], scores[order]


def fd_lattice_grad(loss_fn, lat, h=1e-6):
    """Central finite differences of loss_fn(lattice) w.r.t. all lattice scores."""
    def perturbed(arr_name, idx, delta):
        em = lat.emissions.copy()
        tr = lat.transitions.copy()
        (em if arr_name == "e" else tr)[idx] += delta
        return Lattice(em, tr)

    g_em = np.zeros_like(lat.emissions)
    for idx in np.ndindex(*lat.emissions.shape):
        up = loss_fn(perturbed("e", idx, h))
        dn = loss_fn(perturbed("e", idx, -h))
        g_em[idx] = (up - dn) / (2 * h)
    g_tr = np.zeros_like(lat.transitions)
    for idx in np.ndindex(*lat.transitions.shape):
        up = loss_fn(perturbed("t", idx, h))
        dn = loss_fn(perturbed("t", idx, -h))
        g_tr[idx] = (up - dn) / (2 * h)
    return g_em, g_tr
