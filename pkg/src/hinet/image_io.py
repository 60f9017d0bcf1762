"""8-bit RGB PNG round trips: [0, 255] bytes <-> [0, 1] float tensors."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .tensor import Tensor


def load_png(path) -> Tensor:
    """Read a PNG as a 1x3xHxW tensor with values in [0, 1]."""
    with Image.open(path) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.float32)
    chw = np.transpose(rgb, (2, 0, 1)) / np.float32(255.0)
    return Tensor(chw[None], _checked=True)


def save_png(tensor: Tensor, path) -> None:
    """Clip to [0, 1], quantize to 8 bits and write RGB PNG."""
    if tensor.shape.n != 1 or tensor.shape.c != 3:
        raise ValueError(f"save_png expects a 1x3xHxW tensor, got {tuple(tensor.shape)}")
    arr = np.clip(tensor.data[0], 0.0, 1.0) * 255.0
    quantized = np.rint(arr).astype(np.uint8)
    Image.fromarray(np.transpose(quantized, (1, 2, 0)), mode="RGB").save(path)
