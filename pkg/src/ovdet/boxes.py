"""Box conversions, IoU and GIoU in numpy and differentiable forms."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_TINY = 1e-12


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    x0, y0, x1, y1 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def xywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2], b[..., :2] + b[..., 2:]], axis=-1)


def _as_xyxy(b, fmt: str) -> np.ndarray:
    if fmt == "xyxy":
        return np.asarray(b, dtype=np.float64)
    if fmt == "cxcywh":
        return cxcywh_to_xyxy(b)
    if fmt == "xywh":
        return xywh_to_xyxy(b)
    raise ValueError(f"unknown box format {fmt!r}")


def pairwise_iou(a, b, fmt: str = "xyxy", return_union: bool = False):
    """IoU matrix ``[N, K]``; zero-area boxes overlap nothing."""
    a = _as_xyxy(a, fmt).reshape(-1, 4)
    b = _as_xyxy(b, fmt).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    iou = np.where(union > 0, inter / np.maximum(union, _TINY), 0.0)
    return (iou, union) if return_union else iou


def pairwise_giou(a, b, fmt: str = "xyxy") -> np.ndarray:
    a = _as_xyxy(a, fmt).reshape(-1, 4)
    b = _as_xyxy(b, fmt).reshape(-1, 4)
    iou, union = pairwise_iou(a, b, return_union=True)
    lt = np.minimum(a[:, None, :2], b[None, :, :2])
    rb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    hull = wh[..., 0] * wh[..., 1]
    return iou - np.where(hull > 0, (hull - union) / np.maximum(hull, _TINY), 0.0)


def iou(a, b, fmt: str = "cxcywh") -> float:
    return float(pairwise_iou(a, b, fmt)[0, 0])


def giou_loss(a, b, fmt: str = "cxcywh") -> float:
    """``1 - GIoU``, in [0, 2]."""
    return float(1.0 - pairwise_giou(a, b, fmt)[0, 0])


def cxcywh_to_xyxy_t(b: Tensor) -> Tensor:
    c = b[..., 0:2]
    half = b[..., 2:4] * 0.5
    return ad.concat([c - half, c + half], axis=-1)


def giou_loss_t(pred: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise ``1 - GIoU`` for matched ``[M, 4]`` cxcywh rows; differentiable in ``pred``."""
    p = cxcywh_to_xyxy_t(pred)
    t = Tensor(cxcywh_to_xyxy(target))
    area_p = (p[..., 2] - p[..., 0]) * (p[..., 3] - p[..., 1])
    area_t = (t[..., 2] - t[..., 0]) * (t[..., 3] - t[..., 1])
    lt = ad.maximum(p[..., :2], t[..., :2])
    rb = ad.minimum(p[..., 2:], t[..., 2:])
    wh = ad.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_p + area_t - inter
    lt_h = ad.minimum(p[..., :2], t[..., :2])
    rb_h = ad.maximum(p[..., 2:], t[..., 2:])
    wh_h = rb_h - lt_h
    hull = wh_h[..., 0] * wh_h[..., 1]
    giou = inter / (union + _TINY) - (hull - union) / (hull + _TINY)
    return 1.0 - giou
