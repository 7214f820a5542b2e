"""Partition functions: exact closed forms, refinement traces and Monte Carlo.

With an orthonormal basis and exponent one on ||det||^2 the integral is N!
(Andreief).  Away from that point the tensor quadrature trace and the
importance-sampling estimate should agree; the free energy per particle
approaches its large-N limit slowly.
"""
import math
import warnings

from p1gibbs.geometry import fs_orthonormal_basis
from p1gibbs.partition import asymptotic_free_energy_check, z_exact, z_mc

warnings.simplefilter("ignore")

r = z_exact(3, 2, 2.0, fs_orthonormal_basis(2))
print(f"N=3, alpha=1: Z = {r.value:.6f} (3! = {math.factorial(3)})")
r = z_exact(3, 2, 1.0, fs_orthonormal_basis(2))
print("N=3, alpha=1/2 refinement trace:")
for row in r.trace:
    print(f"  level {row['level']:3d}  Z = {row['estimate']:.8f}  ratio = {row['ratio']}")
m = z_mc(3, 2, 1.0, fs_orthonormal_basis(2), n_samples=200000, seed=1)
print(f"Monte Carlo: {m.value:.5f} +- {m.stderr:.5f}")

chk = asymptotic_free_energy_check([2, 4, 8], 1.0, n_samples=200000)
for row in chk["rows"]:
    print(f"k={row['k']}: -(1/(beta N)) log Z = {row['value']:.4f} (limit 0), gap {row['gap']:.4f}")
