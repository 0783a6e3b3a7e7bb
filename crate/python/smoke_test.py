"""Smoke test for the blockrg Python bindings.

Build and install first:
    pip install maturin
    pip install --no-build-isolation -e crates/py
"""

import math
import sys

import blockrg_py as b

failures = []


def check(name, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    if not ok:
        failures.append(name)


# a_k against the closed form and the recursion
a, L = 1.0, 3
gaps = []
for k in range(1, 20):
    closed = a * (1 - L**-2) / (1 - L ** (-2 * k))
    gaps.append(abs(b.a_k(a, L, k) - closed))
    nxt = b.a_k(a, L, k + 1)
    ak = b.a_k(a, L, k)
    gaps.append(abs(nxt - ak * a / (ak + a * L**-2)) / nxt)
check("a_k", max(gaps) < 1e-14, f"max gap {max(gaps):.1e}")

ids = b.free_step_identities(1, 3, 3, samples=20)
worst = max(v for k, v in ids.items() if k != "samples")
check("free step identities", worst < 1e-9, f"worst {worst:.1e} over {ids['samples']} fields")

rs = [10.0**e for e in range(-4, 7)]
errs = b.resolvent_errors(1, 3, 2, rs)
check("resolvent identity", max(e for _, e in errs) < 1e-8, f"{len(errs)} values of r")

# fixed polyominoes with n cells, times n placements covering the origin
polyominoes = [1, 2, 6, 19, 63, 216]
rep = b.polymer_counts(2, 2, 6)
counts = [row["count"] for row in rep["rows"]]
expected = [n * p for n, p in zip(range(1, 7), polyominoes)]
check("polymer counts", counts == expected, f"{counts}")

# one polymer on one cube: log Xi = log E[exp(c0 + c1 phi)]
measure = [(-1.0, 0.25), (0.0, 0.5), (1.0, 0.25)]
c0, c1 = -0.05, 0.1
cluster, brute = b.cluster_log_partition([([4], [c0, c1])], measure)
direct = math.log(sum(w * math.exp(c0 + c1 * x) for x, w in measure))
check("single polymer log Xi", abs(cluster - direct) < 1e-13 and abs(brute - direct) < 1e-13,
      f"cluster {cluster:.15f}, oracle {direct:.15f}")

gas = [([0, 1], [0.02, 0.01]), ([1, 2], [-0.01, 0.02]), ([5], [0.015, -0.01, 0.005])]
cluster, brute = b.cluster_log_partition(gas, measure)
check("cluster vs brute force", abs(cluster - brute) < 1e-10, f"gap {abs(cluster - brute):.1e}")

flow = b.surrogate_flow(levels=20, l=3, lambda_=1.0, delta=8, d=3, beta=0.1)
conv = flow["convergence"]
check("surrogate flow", conv["converged"] and conv["contraction_ratio"] <= 0.5 and flow["vacuum"]["holds"],
      f"ratio {conv['contraction_ratio']:.3f} after {conv['iterations']} iterations")

step = b.micro_step(1e-3)
check("micro step", step["lambda_next"] == 27 * 1e-3 and abs(step["log_xi_cluster"] - step["log_xi_direct"]) < 1e-7,
      f"lambda_next {step['lambda_next']}, mu_next {step['mu_next']:.3e}")

try:
    b.a_k(1.0, 3, 0)
    check("invalid parameter raises", False, "no exception")
except ValueError as e:
    check("invalid parameter raises", True, str(e))

sys.exit(1 if failures else 0)
