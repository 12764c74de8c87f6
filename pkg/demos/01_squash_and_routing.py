"""
Squashing and routing-by-agreement, on numbers small enough to follow
=====================================================================

Two ideas carry the whole classifier: a nonlinearity that encodes
"existence" in a vector's length, and an iteration that decides which
parent capsule each child should report to.  This script pins both down
with hand-sized tensors.
"""

import numpy as np

from hsicaps import dynamic_routing, squash

np.set_printoptions(precision=4, suppress=True)

# --- the squashing nonlinearity --------------------------------------------
# A vector of norm h keeps its direction and moves to norm h^2 / (1 + h^2).
# Short vectors get crushed toward zero, long ones saturate just below 1.

print("squash: input norm -> output norm")
for h in (0.1, 0.5, 1.0, 2.0, 5.0, 1000.0):
    vec = np.array([h, 0.0])
    out = squash(vec)
    print(f"  {h:8.1f} -> {np.linalg.norm(out):.6f}")
print("  (norm 1 lands exactly on 0.5; the curve never reaches 1)\n")

# --- routing on a rigged example -------------------------------------------
# Three child capsules vote for two classes.  The transformation matrices
# are rigged: every child's prediction for class 1 points the same way,
# while the class 2 predictions disagree with each other.  Agreement should
# pull the coupling toward class 1 as the iterations proceed.

children = np.array(
    [
        [[1.0, 0.0]],
        [[0.8, 0.2]],
        [[0.9, -0.1]],
    ]
)  # (positions=3, arrays=1, dim=2)

matrices = np.zeros((1, 3, 2, 2, 2))  # (arrays, positions, classes, out_dim, dim)
matrices[0, :, 0] = [[2.0, 0.0], [0.0, 2.0]]  # class 1: same map everywhere
matrices[0, 0, 1] = [[0.0, 2.0], [2.0, 0.0]]  # class 2: three clashing maps
matrices[0, 1, 1] = [[-2.0, 0.0], [0.0, -2.0]]
matrices[0, 2, 1] = [[0.0, -2.0], [-2.0, 0.0]]

print("routing: coupling of each child to class 1, per iteration count")
for iterations in (1, 2, 3, 4):
    acts, state = dynamic_routing(children, matrices, iterations)
    print(f"  r={iterations}: {state.coupling[0, :, 0]}")
print("  (r=1 is the uniform start; agreement then concentrates mass)\n")

acts, state = dynamic_routing(children, matrices, 3)
lengths = np.linalg.norm(acts, axis=-1)
print(f"class capsule lengths after 3 iterations: {lengths}")
print(f"predicted class: {int(np.argmax(lengths)) + 1}")
print("coupling rows always sum to 1:", state.coupling.sum(axis=-1).ravel())
