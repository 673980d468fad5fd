"""Image IO: PFM (portable float map) and 8-bit PNG.

PFM convention: header "PF\n<width> <height>\n<scale>\n" followed by float32
rows stored bottom-to-top; negative scale marks little-endian data. We always
write scale -1.0.
"""

import numpy as np
from pathlib import Path
from PIL import Image


def write_pfm(path, img):
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PFM writer expects HxWx3")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(img).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic not in (b"PF", b"Pf"):
            raise ValueError(f"not a PFM file: {path}")
        channels = 3 if magic == b"PF" else 1
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(w * h * channels * 4), dtype=dtype)
    img = data.reshape(h, w, channels) if channels == 3 else data.reshape(h, w)
    img = np.flipud(img).astype(np.float64)
    if abs(scale) not in (0.0, 1.0):
        img = img * abs(scale)
    return np.ascontiguousarray(img)


def write_png(path, img_u8):
    img_u8 = np.asarray(img_u8)
    if img_u8.dtype != np.uint8:
        raise ValueError("PNG writer expects uint8")
    Image.fromarray(img_u8).save(Path(path))


def read_png(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    return np.asarray(Image.open(path).convert("RGB"))
