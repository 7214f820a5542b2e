"""Exact Gibbs variational principle and detailed balance on six points.

Two particles on the octahedron vertices with the full O(1) basis: every
weight is rational, so stationarity of the free energy at the Gibbs measure
and detailed balance of the Metropolis kernel are checked in Fractions.
"""
import numpy as np

from p1gibbs.partition import gibbs_variational_check
from p1gibbs.sampler import OCTAHEDRON, detailed_balance_exact, toy_chain, toy_transition_matrix, toy_weights

r = gibbs_variational_check()
print("Z =", r["Z"], "| stationary:", r["stationary_exact"], "| min value exact:", r["normalized_exact"])

W = toy_weights(OCTAHEDRON, 1, 1)
states, T = toy_transition_matrix(W, 6)
print("detailed balance holds exactly:", detailed_balance_exact(W, T))

Z = sum(W.values())
exact = np.array([float(W[(i, j)] / Z) for i in range(6) for j in range(6)])
freq, se = toy_chain(n_steps=10 ** 6, seed=0)
print("max |freq - exact| / se =", np.max(np.abs(freq - exact)[exact > 0] / se[exact > 0]).round(2))
