"""Shared builders for small synthetic inputs."""

import numpy as np

from ovdet.autodiff import Tensor
from ovdet.backbone import FeatureLevel, MultiScaleFeatures
from ovdet.text import ClassEmbeddingBank


def unit_rows(rng, n, d):
    e = rng.normal(size=(n, d))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def make_bank(rng, n_valid, d, n_pad=0, requires_grad=False):
    e = np.concatenate([unit_rows(rng, n_valid, d), np.zeros((n_pad, d))])
    valid = np.array([True] * n_valid + [False] * n_pad)
    return ClassEmbeddingBank(Tensor(e, requires_grad=requires_grad), valid,
                              list(range(n_valid)) + [None] * n_pad,
                              [f"class {i}" for i in range(n_valid)] + [None] * n_pad)


def make_features(rng, b=1, c=8, grids=((4, 4), (2, 2), (1, 1))):
    levels = [FeatureLevel(Tensor(rng.normal(size=(b, h * w, c))), h, w, 8 * 2 ** i)
              for i, (h, w) in enumerate(grids)]
    return MultiScaleFeatures(levels)
