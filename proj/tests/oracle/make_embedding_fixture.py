#!/usr/bin/env python3
"""Writes a 5000 x 512 embedding file plus a byte-level expectation file.

The expectations are read straight off the payload bytes with struct, not
with the loader under test:
  expect.json = {"count", "dim", "ids": [first, last],
                 "rows": {"<r>": [hex of each float32, ...]}}
"""
import json
import os
import struct
import sys

import numpy as np

COUNT, DIM = 5000, 512
SPOT_ROWS = [0, 1, 2499, 4999]


def main(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(20240607)
    matrix = rng.standard_normal((COUNT, DIM)).astype("<f4")
    ids = [f"img{i:05d}" for i in range(COUNT)]

    payload = matrix.tobytes(order="C")
    header = b"ICEB" + struct.pack("<II", COUNT, DIM)
    with open(os.path.join(out_dir, "big.bin"), "wb") as f:
        f.write(header + payload)
    with open(os.path.join(out_dir, "big.ids.json"), "w") as f:
        json.dump(ids, f)

    with open(os.path.join(out_dir, "big.bin"), "rb") as f:
        raw = f.read()
    assert raw[:4] == b"ICEB"
    count, dim = struct.unpack("<II", raw[4:12])
    rows = {}
    for r in SPOT_ROWS:
        start = 12 + r * dim * 4
        rows[str(r)] = [raw[start + 4 * k:start + 4 * k + 4].hex() for k in range(dim)]
    with open(os.path.join(out_dir, "big.expect.json"), "w") as f:
        json.dump({"count": count, "dim": dim, "ids": [ids[0], ids[-1]], "rows": rows}, f)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else ".")
