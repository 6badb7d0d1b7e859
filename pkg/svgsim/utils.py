# Copyright 2016-2020 Christoph Reiter
# SPDX-License-Identifier: MIT

import os
from typing import Union

import numpy as np


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def ensure_parent_dir(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def pgm_bytes(bitmap: np.ndarray) -> bytes:
    """Binary PGM (P5) with one pixel per entry, 255 = set, 0 = unset"""

    if bitmap.ndim != 2:
        raise ValueError("bitmap must be 2-D")
    rows, cols = bitmap.shape
    header = b"P5\n%d %d\n255\n" % (cols, rows)
    pixels = np.where(np.asarray(bitmap, dtype=bool), 255, 0).astype(np.uint8)
    return header + pixels.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    magic, size, maxval, pixels = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError("not an 8-bit binary PGM")
    cols, rows = (int(v) for v in size.split())
    return np.frombuffer(pixels, dtype=np.uint8).reshape(rows, cols) == 255


def write_bytes(path: str, data: bytes) -> None:
    ensure_parent_dir(path)
    with open(path, "wb") as h:
        h.write(data)


def write_text(path: str, text: Union[str, bytes]) -> None:
    if isinstance(text, str):
        text = text.encode("utf-8")
    write_bytes(path, text)
