"""Two-mode phase portraits of the cubic lattice model.

Adjacent modes (1, 2) meet at a hyperbolic origin with two straight
heteroclinic lines; modes two sites apart (1, 3) only rotate around a centre.
Switching on the dissipative coupling turns the four centres into attractors.
"""

import os
import sys

from hetshadow.model import ck_model, nonhamiltonian_example
from hetshadow.render import portrait, write_portrait

out = sys.argv[1] if len(sys.argv) > 1 else "out/demos"
os.makedirs(out, exist_ok=True)

for label, model, j, k in (("ck", ck_model(3), 1, 2), ("ck", ck_model(3), 1, 3),
                           ("nh", nonhamiltonian_example(3), 1, 2)):
    data = portrait(model, j, k)
    kinds = {}
    for e in data["equilibria"]:
        kinds[e["kind"]] = kinds.get(e["kind"], 0) + 1
    base = os.path.join(out, f"{label}_{j}{k}")
    write_portrait(base + ".svg", base + ".csv", data)
    print(f"{label} modes ({j},{k}): {kinds}")
    for d in data["lines"]:
        print(f"  invariant line through the origin along {d.real:+.4f}{d.imag:+.4f}i")
    print(f"  -> {base}.svg")
