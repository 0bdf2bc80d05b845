"""PNG loading/saving and pseudo-RGB composition.

Images are float64 numpy arrays in [0, 1], shaped (H, W) for single-band
data and (H, W, 3) for color. Loaders clamp to [0, 1] and reject anything
that is not an 8- or 16-bit grayscale or 8-bit RGB raster.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image as PILImage

__all__ = ["load_image", "save_image", "compose_pseudo_rgb", "validate_image"]


class UnsupportedImageError(ValueError):
    pass


def validate_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise ValueError(f"{name}: expected (H, W) or (H, W, 3), got {img.shape}")
    if img.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} contains non-finite values")
    return img


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Load an 8/16-bit grayscale or 8-bit RGB raster, scaled to [0, 1]."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such image file: {path}")
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise UnsupportedImageError(f"cannot decode {path}: {exc}") from exc
    if mode == "L":
        out = arr.astype(np.float64) / 255.0
    elif mode in ("I;16", "I;16B", "I;16L"):
        out = arr.astype(np.float64) / 65535.0
    elif mode == "I":
        # Pillow promotes some 16-bit grayscale PNGs to 32-bit ints.
        if arr.max(initial=0) > 65535:
            raise UnsupportedImageError(f"{path}: bit depth beyond 16 not supported")
        out = arr.astype(np.float64) / 65535.0
    elif mode == "RGB":
        out = arr.astype(np.float64) / 255.0
    else:
        raise UnsupportedImageError(f"{path}: unsupported mode {mode!r} "
                                    "(need 8/16-bit grayscale or 8-bit RGB)")
    return np.clip(out, 0.0, 1.0)


def save_image(img: np.ndarray, path: str | os.PathLike, bitdepth: int = 8) -> None:
    """Write a [0, 1] image as PNG. 16-bit output only for grayscale."""
    img = validate_image(img)
    img = np.clip(img, 0.0, 1.0)
    if bitdepth == 8:
        data = np.round(img * 255.0).astype(np.uint8)
        pil = PILImage.fromarray(data, mode="RGB" if img.ndim == 3 else "L")
    elif bitdepth == 16:
        if img.ndim != 2:
            raise ValueError("16-bit output supported for grayscale only")
        data = np.round(img * 65535.0).astype(np.uint16)
        pil = PILImage.fromarray(data)
    else:
        raise ValueError(f"bitdepth must be 8 or 16, got {bitdepth}")
    pil.save(path, format="PNG")


def compose_pseudo_rgb(red: np.ndarray, green: np.ndarray,
                       red_edge: np.ndarray) -> np.ndarray:
    """Stack single-band rasters into the (red, green, red-edge) composite
    used for pose estimation in multispectral captures. Planes are copied
    bit-exactly into channels 0/1/2."""
    planes = []
    for name, band in (("red", red), ("green", green), ("red_edge", red_edge)):
        band = np.asarray(band, dtype=np.float64)
        if band.ndim == 3 and band.shape[2] == 1:
            band = band[:, :, 0]
        if band.ndim != 2:
            raise ValueError(f"{name} band must be single-channel, got {band.shape}")
        planes.append(band)
    if not (planes[0].shape == planes[1].shape == planes[2].shape):
        raise ValueError("band dimensions differ: "
                         f"{[p.shape for p in planes]}")
    return np.stack(planes, axis=-1)
