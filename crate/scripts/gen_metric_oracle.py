"""Writes the 50-digit reference values used by the metric acceptance check.

Logits are drawn at several scales so that both the ordinary path and the
1e-12 probability clamp are exercised.
"""

import json
import random
import sys

import mpmath

mpmath.mp.dps = 50
CLAMP = mpmath.mpf("1e-12")


def main(out):
    rng = random.Random(20240917)
    cases = []
    for i in range(1000):
        scale = [0.1, 1.0, 5.0, 40.0][i % 4]
        logits = [rng.uniform(-scale, scale), rng.uniform(-scale, scale)]
        target = rng.randrange(2)
        a, b = (mpmath.mpf(x) for x in logits)
        m = max(a, b)
        z = mpmath.exp(a - m) + mpmath.exp(b - m)
        p = [mpmath.exp(a - m) / z, mpmath.exp(b - m) / z]
        ce = -mpmath.log(max(p[target], CLAMP))
        cases.append({"logits": logits, "target": target, "probabilities": [float(x) for x in p], "ce": ce})
    n = len(cases)
    mean = mpmath.fsum(c["ce"] for c in cases) / n
    std = mpmath.sqrt(mpmath.fsum((c["ce"] - mean) ** 2 for c in cases) / n)
    for c in cases:
        c["ce"] = float(c["ce"])
    json.dump({"cases": cases, "ce_mean": float(mean), "ce_std": float(std)}, open(out, "w"), separators=(",", ":"))


if __name__ == "__main__":
    main(sys.argv[1])
