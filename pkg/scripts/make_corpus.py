"""Regenerate the desk corpus in tests/data from scikit-image's bundled photos.

Each crop is the 128x128 window (stride 32) with the largest mean squared
Laplacian of its luma, i.e. the busiest texture in the photo.
"""
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage import data

from flair.imageio import write_png

SOURCES = ("chelsea", "astronaut", "coffee", "rocket")
SIZE, STRIDE = 128, 32
OUT = Path(__file__).resolve().parents[1] / "tests" / "data"


def busiest_crop(img: np.ndarray) -> np.ndarray:
    luma = img @ np.array([0.299, 0.587, 0.114])
    lap = ndimage.laplace(luma) ** 2
    best, best_rc = -1.0, (0, 0)
    for r in range(0, img.shape[0] - SIZE + 1, STRIDE):
        for c in range(0, img.shape[1] - SIZE + 1, STRIDE):
            score = lap[r + 1:r + SIZE - 1, c + 1:c + SIZE - 1].mean()
            if score > best:
                best, best_rc = score, (r, c)
    r, c = best_rc
    return img[r:r + SIZE, c:c + SIZE]


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name in SOURCES:
        img = getattr(data, name)()[..., :3].astype(np.float64) / 255.0
        write_png(OUT / f"{name}.png", busiest_crop(img))
        print(OUT / f"{name}.png")


if __name__ == "__main__":
    main()
