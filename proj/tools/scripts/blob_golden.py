"""Writes the w = 0 blob render used as a golden file by the unit tests."""
import math
import sys

H = W = 32
BLOBS = 3
bg = 1.0 / (1.0 + math.exp(1.5))        # sigmoid(0 - 1.5)
colour = 1.0 / (1.0 + math.exp(-1.0))   # sigmoid(0 + 1)
scale = 0.12                            # 0.12 * exp(0.6 * tanh(0))
gain = 8.0

out = []
for c in range(3):
    for y in range(H):
        for x in range(W):
            px, py = (x + 0.5) / W, (y + 0.5) / H
            a = gain * math.exp(-((px - 0.5) ** 2 + (py - 0.5) ** 2) / (2 * scale * scale))
            out.append((bg + BLOBS * a * colour) / (1 + BLOBS * a))

with open(sys.argv[1], "w") as f:
    for v in out:
        f.write(f"{v:.17g}\n")
