"""Client dataset synthesis and binary PPM/PGM image persistence."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def synthetic_images(n, shape, seed):
    """N seeded images with smooth structure: per channel, the sum of three
    random Gaussian blobs, normalized per image to [0, 1]."""
    c, h, w = shape
    rng = np.random.default_rng([seed, 0xDA7A])
    yy, xx = np.mgrid[0:h, 0:w]
    images = np.empty((n, c, h, w))
    for i in range(n):
        img = np.zeros((c, h, w))
        for ch in range(c):
            for _ in range(3):
                cy = rng.uniform(0, h - 1)
                cx = rng.uniform(0, w - 1)
                sig = rng.uniform(0.12, 0.4) * max(h, w)
                amp = rng.uniform(0.3, 1.0)
                img[ch] += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2)
                                        / (2.0 * sig ** 2))
        lo, hi = img.min(), img.max()
        images[i] = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    return images


def synthetic_labels(n, n_classes, seed):
    rng = np.random.default_rng([seed, 0x1AB5])
    return rng.integers(0, n_classes, size=n)


def make_dataset(source, shape, n, seed, n_classes=10):
    """Client dataset: ``source`` is "synthetic" or an image directory.

    Directory mode loads the first N PPM/PGM files in lexicographic order
    and derives labels from the seed (labels are not stored in images).
    """
    if source == "synthetic":
        x = synthetic_images(n, shape, seed)
    else:
        folder = Path(source)
        files = sorted(p for p in folder.iterdir()
                       if p.suffix.lower() in (".ppm", ".pgm"))
        if len(files) < n:
            raise ValueError(
                f"{folder}: found {len(files)} PPM/PGM images, need {n}")
        imgs = []
        for path in files[:n]:
            img = read_image(path)
            if img.shape != tuple(shape):
                raise ValueError(
                    f"{path}: image shape {img.shape} != configured {tuple(shape)}")
            imgs.append(img)
        x = np.stack(imgs)
    y = synthetic_labels(n, n_classes, seed)
    return x, y


# ---------------------------------------------------------------------------
# binary PPM (P6) and PGM (P5), 8-bit, linear [0, 1] mapping


def write_image(path, img):
    """Write a (C, H, W) float image in [0, 1] as binary PPM/PGM."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"want (1|3, H, W) image, got {img.shape}")
    c, h, w = img.shape
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        if c == 3:
            fh.write(f"P6\n{w} {h}\n255\n".encode())
            fh.write(data.transpose(1, 2, 0).tobytes())
        else:
            fh.write(f"P5\n{w} {h}\n255\n".encode())
            fh.write(data[0].tobytes())


def _read_token(raw, pos):
    while True:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        break
    start = pos
    while pos < len(raw) and not raw[pos:pos + 1].isspace():
        pos += 1
    return raw[start:pos], pos


def read_image(path):
    """Read a binary PPM/PGM into a (C, H, W) float array in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, pos = _read_token(raw, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported format {magic!r}")
    w, pos = _read_token(raw, pos)
    h, pos = _read_token(raw, pos)
    maxval, pos = _read_token(raw, pos)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images supported")
    pos += 1  # single whitespace after header
    c = 3 if magic == b"P6" else 1
    n = w * h * c
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=pos)
    if c == 3:
        img = pixels.reshape(h, w, 3).transpose(2, 0, 1)
    else:
        img = pixels.reshape(1, h, w)
    return img.astype(np.float64) / 255.0


def write_batch(out_dir, images, prefix="recon"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        path = out / f"{prefix}_{i:03d}.ppm" if img.shape[0] == 3 \
            else out / f"{prefix}_{i:03d}.pgm"
        write_image(path, img)
        paths.append(path)
    return paths
