"""Image file I/O: binary PPM (P6, 8-bit) natively, PNG via Pillow."""

from __future__ import annotations

import numpy as np


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels, dtype=float) * 255.0),
                   0, 255).astype(np.uint8)


def write_ppm(path, pixels: np.ndarray) -> None:
    """Write an HxWx3 float image in [0, 1] as binary PPM."""
    img = to_uint8(pixels)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM back to HxWx3 floats in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    # header: magic, width, height, maxval, separated by whitespace/comments
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"not a binary PPM: magic {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1  # single whitespace after maxval
    raw = np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8)
    if raw.size != w * h * 3:
        raise ValueError("truncated PPM payload")
    return raw.reshape(h, w, 3).astype(float) / maxval


def write_png(path, pixels: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(pixels), mode="RGB").save(path, format="PNG")


def write_image(path, pixels: np.ndarray) -> None:
    """Dispatch on suffix: .png via Pillow, anything else as PPM."""
    if str(path).lower().endswith(".png"):
        write_png(path, pixels)
    else:
        write_ppm(path, pixels)


def read_image(path) -> np.ndarray:
    if str(path).lower().endswith(".ppm"):
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0
