"""Procedural class-conditional image data.

Each class is an oriented sinusoidal grating: the superclass picks the
orientation and the class-within-superclass picks the spatial frequency,
so the label hierarchy is visible in pixel space. Pixel noise is additive
Gaussian on top of the [-1, 1] pattern (not clipped, which keeps the
closed-form pixel statistics exact).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .tensor import ConfigError


@dataclass
class SynthSpec:
    num_classes: int = 8
    num_superclasses: int = 4
    image_size: int = 16
    patch_size: int = 4
    noise_std: float = 0.1
    hflip: bool = False

    def __post_init__(self):
        if self.num_classes % self.num_superclasses != 0:
            raise ConfigError(
                f"{self.num_classes} classes not divisible by {self.num_superclasses} superclasses")
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image_size must be divisible by patch_size")

    @property
    def classes_per_superclass(self) -> int:
        return self.num_classes // self.num_superclasses


def superclass_of(spec: SynthSpec, labels: np.ndarray) -> np.ndarray:
    return np.asarray(labels) // spec.classes_per_superclass


def class_pattern(spec: SynthSpec, cls: int) -> np.ndarray:
    """Noise-free [-1, 1] grating for one class."""
    s = cls // spec.classes_per_superclass
    w = cls % spec.classes_per_superclass
    theta = np.pi * s / spec.num_superclasses
    freq = 2.0 * (w + 1)
    coords = (np.arange(spec.image_size) + 0.5) / spec.image_size
    u, v = np.meshgrid(coords, coords, indexing="xy")
    return np.sin(2.0 * np.pi * freq * (u * np.cos(theta) + v * np.sin(theta)))


def all_templates(spec: SynthSpec) -> np.ndarray:
    return np.stack([class_pattern(spec, c) for c in range(spec.num_classes)])


def generate_batch(spec: SynthSpec, b: int, seed: int, step: int = 0):
    """Returns (images [b,1,H,W] float32, labels [b], superclass [b]).

    Pure function of (spec, seed, step): labels are uniform over classes,
    images are the class grating plus N(0, noise_std^2) pixels. The hflip
    flag mirrors each image with probability 1/2; note that mirroring an
    oriented grating maps orientation theta to pi - theta, so with flips
    on, classes are only identifiable up to that symmetry.
    """
    gen = rng.stream(seed, "synth-data", step)
    labels = gen.integers(0, spec.num_classes, size=b)
    templates = all_templates(spec)
    images = templates[labels].copy()
    if spec.hflip:
        flip = gen.random(b) < 0.5
        images[flip] = images[flip, :, ::-1]
    if spec.noise_std > 0:
        images = images + spec.noise_std * gen.standard_normal(images.shape)
    images = images[:, None, :, :].astype(np.float32)
    return images, labels, superclass_of(spec, labels)


def dump_dataset(spec: SynthSpec, n: int, seed: int, out_prefix) -> tuple[str, str]:
    """Write n samples as a raw-tensor file plus a CSV label index.

    Returns (tensor_path, index_path). The tensor file uses the package's
    named-tensor container with a single "images" entry.
    """
    from .checkpoint import save_checkpoint  # local import avoids a cycle

    images, labels, supers = generate_batch(spec, n, seed)
    tensor_path = f"{out_prefix}.ntc"
    index_path = f"{out_prefix}_labels.csv"
    save_checkpoint(tensor_path, {"images": images},
                    {"n": n, "seed": seed, "noise_std": spec.noise_std})
    with open(index_path, "w") as fh:
        fh.write("sample_id,label,superclass\n")
        for i in range(n):
            fh.write(f"{i},{int(labels[i])},{int(supers[i])}\n")
    return tensor_path, index_path


def oracle_classify(images: np.ndarray, spec: SynthSpec) -> np.ndarray:
    """Nearest-template labels by maximum normalized correlation.

    Ties resolve to the lowest class index (argmax takes the first hit).
    """
    images = np.asarray(images, dtype=np.float64)
    flat = images.reshape(images.shape[0], -1)
    t = all_templates(spec).reshape(spec.num_classes, -1)
    t_norm = t / np.linalg.norm(t, axis=1, keepdims=True)
    img_norm = np.linalg.norm(flat, axis=1, keepdims=True)
    scores = (flat / np.maximum(img_norm, 1e-12)) @ t_norm.T
    return np.argmax(scores, axis=1)
