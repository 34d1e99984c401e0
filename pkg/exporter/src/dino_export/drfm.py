"""Writer for the DRFM patch-feature-map container.

Layout: magic "DRFM", version u32 LE = 1, H' u32, W' u32, C u32, dtype u8
(0 = float32), 3 reserved bytes, then H'*W'*C float32 LE values in row-major
order (v, then u, then channel).
"""

import struct

import numpy as np

_HEADER = struct.Struct("<4sIIIIB3x")
MAGIC = b"DRFM"
VERSION = 1


def write_drfm(grid: np.ndarray, path) -> None:
    if grid.ndim != 3:
        raise ValueError(f"feature grid must be (H', W', C), got {grid.shape}")
    h, w, c = grid.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, h, w, c, 0))
        fh.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())
