"""Stochastic augmentation policies for pretraining and the three transfer tasks.

A policy is an immutable, ordered list of ops. Randomness always comes from
an explicit ``numpy.random.Generator`` so that every worker can own its own
stream (see :func:`worker_rng`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .data import TARGET_SIZE

POLICY_NAMES = ("pretrain", "task1", "task2", "task3")


@dataclass(frozen=True)
class AugmentOp:
    name: str
    params: dict = field(default_factory=dict)
    p: float = 1.0


@dataclass(frozen=True)
class AugmentPolicy:
    name: str
    ops: tuple[AugmentOp, ...]
    image_size: tuple[int, int] = TARGET_SIZE

    def to_dict(self) -> dict:
        return {"name": self.name, "image_size": list(self.image_size),
                "ops": [{"name": op.name, "p": op.p, "params": _plain(op.params)} for op in self.ops]}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentPolicy":
        ops = tuple(AugmentOp(o["name"], {k: tuple(v) if isinstance(v, list) else v
                                          for k, v in o.get("params", {}).items()}, float(o.get("p", 1.0)))
                    for o in d["ops"])
        for op in ops:
            if op.name not in _OPS:
                raise ValueError(f"unknown augmentation op {op.name!r}")
        return cls(d["name"], ops, tuple(d.get("image_size", TARGET_SIZE)))

    def with_probabilities(self, p: float) -> "AugmentPolicy":
        return AugmentPolicy(self.name, tuple(AugmentOp(o.name, o.params, p) for o in self.ops), self.image_size)


def _plain(params):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}


def make_policy(name: str, image_size: tuple[int, int] = TARGET_SIZE) -> AugmentPolicy:
    """Default policies.

    ``pretrain`` is a grayscale adaptation of the SimCLR recipe (colour ops
    dropped); the task policies follow the fine-tuning descriptions, with
    unstated ranges fixed to mild defaults.
    """
    if name == "pretrain":
        ops = (
            AugmentOp("random_resized_crop", {"scale": (0.2, 1.0), "ratio": (3 / 4, 4 / 3)}, 1.0),
            AugmentOp("hflip", {}, 0.5),
            AugmentOp("intensity_jitter", {"brightness": 0.4, "contrast": 0.4}, 0.8),
            # sigma is expressed for a 224-pixel short side and rescaled with the image
            AugmentOp("gaussian_blur", {"sigma": (0.1, 2.0)}, 0.5),
        )
    elif name == "task1":
        ops = (
            AugmentOp("hflip", {}, 0.5),
            AugmentOp("rotate", {"degrees": 10.0}, 1.0),
            AugmentOp("gamma", {"gamma": (0.7, 1.3)}, 0.5),
            AugmentOp("brightness", {"delta": 0.2}, 0.5),
        )
    elif name == "task2":
        ops = (
            AugmentOp("rotate", {"degrees": 30.0}, 1.0),
            AugmentOp("hflip", {}, 0.5),
            AugmentOp("shear", {"max_shear": 0.2}, 0.5),
            AugmentOp("gaussian_noise", {"sigma": 0.05}, 0.5),
        )
    elif name == "task3":
        ops = (
            AugmentOp("scale", {"range": (0.9, 1.1)}, 0.5),
            AugmentOp("shift", {"max_fraction": 0.1}, 0.5),
            AugmentOp("rotate", {"degrees": 15.0}, 0.5),
            AugmentOp("hflip", {}, 0.5),
        )
    else:
        raise ValueError(f"unknown policy {name!r}; expected one of {POLICY_NAMES}")
    return AugmentPolicy(name, ops, tuple(image_size))


def noop_policy(image_size: tuple[int, int] = TARGET_SIZE) -> AugmentPolicy:
    return make_policy("pretrain", image_size).with_probabilities(0.0)


def worker_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for ``(seed, *stream)``, e.g. ``(seed, epoch, step)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


# -- geometric primitives ----------------------------------------------------
# Each returns (matrix, offset) mapping output (row, col) to input coordinates.

def _about_center(linear: np.ndarray, shape) -> tuple[np.ndarray, np.ndarray]:
    c = (np.asarray(shape, dtype=np.float64) - 1) / 2
    return linear, c - linear @ c


def _warp(arr: np.ndarray, matrix, offset, order: int, mode: str = "constant") -> np.ndarray:
    return ndimage.affine_transform(arr, matrix, offset=offset, output_shape=arr.shape,
                                    order=order, mode=mode, cval=0.0)


def _rotate_geom(shape, rng, params):
    a = math.radians(rng.uniform(-params["degrees"], params["degrees"]))
    m = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return _about_center(m, shape)


def _shear_geom(shape, rng, params):
    s = rng.uniform(-params["max_shear"], params["max_shear"])
    return _about_center(np.array([[1.0, 0.0], [s, 1.0]]), shape)


def _scale_geom(shape, rng, params):
    lo, hi = params["range"]
    k = rng.uniform(lo, hi)
    return _about_center(np.eye(2) / k, shape)


def _shift_geom(shape, rng, params):
    f = params["max_fraction"]
    d = rng.uniform(-f, f, size=2) * np.asarray(shape)
    return np.eye(2), -d


def _crop_geom(shape, rng, params):
    h, w = shape
    area = h * w
    lo, hi = params["scale"]
    log_r = (math.log(params["ratio"][0]), math.log(params["ratio"][1]))
    for _ in range(10):
        target = area * rng.uniform(lo, hi)
        r = math.exp(rng.uniform(*log_r))
        cw = math.sqrt(target * r)
        ch = math.sqrt(target / r)
        if 1 <= cw <= w and 1 <= ch <= h:
            top = rng.uniform(0, h - ch)
            left = rng.uniform(0, w - cw)
            break
    else:
        ch, cw = float(h), float(w)
        top = left = 0.0
    sy, sx = ch / h, cw / w
    m = np.diag([sy, sx])
    offset = np.array([top + 0.5 * sy - 0.5, left + 0.5 * sx - 0.5])
    return m, offset


_GEOMETRIC = {
    "rotate": _rotate_geom,
    "shear": _shear_geom,
    "scale": _scale_geom,
    "shift": _shift_geom,
    "random_resized_crop": _crop_geom,
}


# -- intensity ops -----------------------------------------------------------

def _gamma(img, rng, params):
    g = rng.uniform(*params["gamma"])
    return np.power(np.clip(img, 0.0, 1.0), g)


def _brightness(img, rng, params):
    return img + rng.uniform(-params["delta"], params["delta"])


def _intensity_jitter(img, rng, params):
    b = 1.0 + rng.uniform(-params["brightness"], params["brightness"])
    c = 1.0 + rng.uniform(-params["contrast"], params["contrast"])
    img = img * b
    mean = img.mean()
    return (img - mean) * c + mean


def _gaussian_blur(img, rng, params):
    sigma = rng.uniform(*params["sigma"]) * min(img.shape) / 224.0
    return ndimage.gaussian_filter(img, sigma, mode="reflect")


def _gaussian_noise(img, rng, params):
    return img + rng.normal(0.0, params["sigma"], size=img.shape)


_INTENSITY = {
    "gamma": _gamma,
    "brightness": _brightness,
    "intensity_jitter": _intensity_jitter,
    "gaussian_blur": _gaussian_blur,
    "gaussian_noise": _gaussian_noise,
}

_OPS = {"hflip": None, **_GEOMETRIC, **_INTENSITY}


def _check(policy: AugmentPolicy, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 2 or tuple(image.shape) != tuple(policy.image_size):
        raise ValueError(f"policy {policy.name!r} expects a {tuple(policy.image_size)} image, "
                         f"got shape {image.shape}")
    return image


def apply(policy: AugmentPolicy, image: np.ndarray, rng: np.random.Generator,
          mask: Optional[np.ndarray] = None):
    """Augment one image (and optionally its label mask with identical geometry).

    Every op consumes its Bernoulli draw whether or not it fires, so the
    stream position does not depend on earlier outcomes.
    """
    image = _check(policy, image)
    out = image.astype(np.float64, copy=True)
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != image.shape:
            raise ValueError(f"mask shape {mask.shape} does not match image shape {image.shape}")
        mask_out = mask.copy()
    for op in policy.ops:
        fire = rng.random() < op.p
        if not fire:
            continue
        if op.name == "hflip":
            out = out[:, ::-1].copy()
            if mask is not None:
                mask_out = mask_out[:, ::-1].copy()
        elif op.name in _GEOMETRIC:
            matrix, offset = _GEOMETRIC[op.name](out.shape, rng, op.params)
            # crops stay inside the frame; other warps expose zero-filled corners
            edge = "nearest" if op.name == "random_resized_crop" else "constant"
            out = _warp(out, matrix, offset, order=1, mode=edge)
            if mask is not None:
                mask_out = _warp(mask_out, matrix, offset, order=0, mode=edge).astype(mask.dtype)
        else:
            out = _INTENSITY[op.name](out, rng, op.params)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    if mask is not None:
        return out, mask_out
    return out


def make_views(image: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator):
    """Two independent draws of :func:`apply`: the instance positive pair."""
    return apply(policy, image, rng), apply(policy, image, rng)


def augment_batch(policy: AugmentPolicy, images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([apply(policy, im, rng) for im in images])
