"""Storage, traffic and the generalisation bound, without training anything.

    python demos/costs_and_bound.py
"""

from adaptfed import Arch
from adaptfed.analysis import BoundInputs, cost_report, theorem1_rhs

arch = Arch()
print("server-side personalised scalars (generator counted separately)")
print(f"{'N':>6s} {'adaptfed N*D':>14s} {'vanilla N*B*3*d^2':>19s}")
for n in (10, 50, 104, 200, 1000):
    a, v = cost_report(arch, n, "adaptfed"), cost_report(arch, n, "vanilla-tailored")
    print(f"{n:6d} {a.personalization_storage:14d} {v.personalization_storage:19d}")
full, low = cost_report(arch, 50, "adaptfed"), cost_report(arch, 50, "adaptfed", rank=2)
print(f"\ngenerator {full.hypernet_total} scalars; vanilla storage overtakes it from N = {full.crossover}")
print(f"per-client download of generated weights: full {full.personal_down}, rank-2 {low.personal_down}")

print("\nbound terms for M=1000, N=10, d=50, delta=0.05 (Lipschitz terms zero)")
terms = theorem1_rhs(BoundInputs(M=1000, N=10, d_vc=50, delta=0.05))
for name in ("sampling", "complexity", "generator", "shared", "total"):
    print(f"  {name:10s} {getattr(terms, name):.6f}")
