"""Verify the covering-relation chain for three modes and show where it breaks.

At a short travel time the sets are too large for the charts: the passage
near the last circle pushes them out of the chart domain, and the report
names that link. At T = 8 every
link holds, with entry and exit margins printed per link.
"""

import os
import sys

from hetshadow.model import ck_model
from hetshadow.shadow import ChainConfig, verify_chain, write_report

out = sys.argv[1] if len(sys.argv) > 1 else "out/demos"
os.makedirs(out, exist_ok=True)
model = ck_model(3)

for T in (2.0, 8.0):
    rep = verify_chain(model, ChainConfig(3, 0.05, T))
    print(f"T = {T:g}: {'all links pass' if rep.passed else 'failed at ' + ', '.join(rep.failed)}")
    for v in rep.links:
        note = "" if v["passed"] else f"  ({v['message']})"
        print(f"  {v['name']:12s} entry {v['entry_margin']:+.3e}  exit {v['exit_margin']:+.3e}{note}")
    if rep.suggestion:
        print("  hint:", rep.suggestion)
    write_report(os.path.join(out, f"chain_T{T:g}.json"), rep)

print("\nh-set radii at T = 8 (coefficients of e^-T for micro, e^-2T for nano):")
for j, led in rep.ledger.items():
    for key in ("in", "out"):
        row = ", ".join(f"{name}={v['coefficient']:.3g} {v['scale']}" for name, v in led.get(key, {}).items())
        print(f"  chart {j} N_{key}: {row}")
