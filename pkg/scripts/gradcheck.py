"""Finite-difference report for every op and the composed pipeline."""
import sys
import time

from dynafuse.gradcheck import run_all

t = time.time()
results = run_all(trials=10)
for r in results:
    print(r.line())
print(f"{sum(r.ok for r in results)}/{len(results)} passed in {time.time() - t:.1f}s")
sys.exit(0 if all(r.ok for r in results) else 1)
