"""Central finite-difference checks for every differentiable operation.

Each case builds a scalar function of some leaf tensors from a seed.  The
analytic gradient from :func:`ovdet.autodiff.backward` is compared with
``(f(x + eps) - f(x - eps)) / (2 eps)`` using the max-norm relative error
``|a - n|_inf / max(|a|_inf, |n|_inf, tiny)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import FeatureLevel, MultiScaleFeatures
from .boxes import giou_loss_t
from .decoder import ContrastiveHead, QuerySet, TextGuidedDecoder, contrastive_scores, decoder_forward, tg_qe
from .encoder import CollaborationEncoder, FusionParams, tg_fe, vg_tr
from .losses import Assignment, alignment_loss
from .text import ClassEmbeddingBank

EPS = 1e-4
TOL = 1e-4
TINY = 1e-30

Builder = Callable[[np.random.Generator], Tuple[Callable[[], Tensor], List[Tensor]]]


@dataclass
class GradResult:
    case: str
    seed: int
    error: float
    n_coords: int

    @property
    def passed(self) -> bool:
        return self.error < TOL


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), TINY)
    return float(diff / scale)


def check_gradients(fn: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = EPS,
                    max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None
                    ) -> Tuple[float, int]:
    """Return (max relative error, number of coordinates probed).

    ``max_coords`` caps the probed coordinates per leaf; they are then drawn
    at random from ``rng``.
    """
    for t in leaves:
        t.grad = None
    out = fn()
    ad.backward(out)
    analytic, numeric = [], []
    for t in leaves:
        grad = t.grad if t.grad is not None else np.zeros(t.shape)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            with ad.no_grad():
                hi = fn().item()
            flat[i] = orig - eps
            with ad.no_grad():
                lo = fn().item()
            flat[i] = orig
            numeric.append((hi - lo) / (2 * eps))
            analytic.append(grad.reshape(-1)[i])
    a, n = np.array(analytic), np.array(numeric)
    return relative_error(a, n), len(a)


def _leaf(rng, shape, lo=-1.0, hi=1.0, away_from=None, gap=0.05) -> Tensor:
    x = rng.uniform(lo, hi, size=shape)
    if away_from is not None:
        for k in np.atleast_1d(away_from):
            near = np.abs(x - k) < gap
            x[near] = k + np.sign(x[near] - k + 1e-12) * gap
    return Tensor(x, requires_grad=True)


def _unary(op, lo=-1.0, hi=1.0, away=None) -> Builder:
    def build(rng):
        x = _leaf(rng, (3, 4), lo, hi, away)
        w = rng.normal(size=(3, 4))
        return (lambda: ad.sum_(op(x) * w)), [x]
    return build


def _binary(op, lo_b=-1.0, hi_b=1.0, shape_b=(3, 4), apart=False) -> Builder:
    def build(rng):
        a = _leaf(rng, (3, 4))
        b = _leaf(rng, shape_b, lo_b, hi_b)
        if apart:  # keep a and b separated so max/min stay differentiable
            b.data = np.where(np.abs(a.data - b.data) < 0.05, a.data + 0.1, b.data) if b.shape == a.shape else b.data
        w = rng.normal(size=(3, 4))
        return (lambda: ad.sum_(op(a, b) * w)), [a, b]
    return build


def _randomize_zeros(module, rng):
    """Give zero-initialised parameters random values so every path carries gradient."""
    for p in module.parameters():
        if not p.data.any():
            p.data = rng.uniform(-0.3, 0.3, size=p.shape)
    return module


def _bank(rng, s: int, d: int, n_pad: int = 0, batched: Optional[int] = None) -> ClassEmbeddingBank:
    e = rng.normal(size=(s, d))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    if n_pad:
        e[-n_pad:] = 0.0
    if batched:
        e = np.broadcast_to(e, (batched, s, d)).copy()
    valid = np.ones(s, bool)
    if n_pad:
        valid[-n_pad:] = False
    slots = [i if valid[i] else None for i in range(s)]
    return ClassEmbeddingBank(Tensor(e, requires_grad=True), valid, slots, [])


def _case_matmul(rng):
    a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5))
    w = rng.normal(size=(2, 3, 5))
    return (lambda: ad.sum_(ad.matmul(a, b) * w)), [a, b]


def _case_bmm(rng):
    a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (2, 4, 2))
    w = rng.normal(size=(2, 3, 2))
    return (lambda: ad.sum_(ad.matmul(a, b) * w)), [a, b]


def _case_reductions(rng):
    x = _leaf(rng, (3, 4, 2))
    w = rng.normal(size=(3, 2))
    return (lambda: ad.sum_(ad.sum_(x, axis=1) * w) + ad.mean(x) * 3.0
            + ad.sum_(ad.mean(x, axis=0, keepdims=True) * w[0])), [x]


def _case_max(rng):
    x = Tensor(rng.permutation(24).reshape(4, 6) * 0.1 + rng.uniform(0, 0.01, (4, 6)), requires_grad=True)
    mask = rng.random(6) < 0.7
    mask[0] = True
    w = rng.normal(size=4)
    return (lambda: ad.sum_(ad.max_(x, axis=-1, mask=mask) * w) + ad.sum_(ad.max_(x, axis=0))), [x]


def _case_softmax(rng):
    x = _leaf(rng, (3, 5), -2, 2)
    mask = np.array([True, False, True, True, False])
    w = rng.normal(size=(3, 5))
    return (lambda: ad.sum_(ad.softmax_rows(x, mask) * w) + ad.sum_(ad.softmax_rows(x, axis=0) * w)), [x]


def _case_l2norm(rng):
    x = _leaf(rng, (3, 5), -2, 2)
    w = rng.normal(size=(3, 5))
    return (lambda: ad.sum_(ad.l2_normalize_rows(x) * w)), [x]


def _case_layernorm(rng):
    x, g, b = _leaf(rng, (2, 3, 6), -2, 2), _leaf(rng, (6,), 0.5, 1.5), _leaf(rng, (6,))
    w = rng.normal(size=(2, 3, 6))
    return (lambda: ad.sum_(ad.layer_norm(x, g, b) * w)), [x, g, b]


def _case_shapes(rng):
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 3))
    rows = rng.integers(0, 3, size=(2, 4))
    w1, w2, w3 = rng.normal(size=(4, 3)), rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 4, 1))

    def fn():
        cat = ad.concat([a, b], axis=0)
        st = ad.stack([a, b], axis=-1)
        t = ad.transpose(ad.reshape(a, (3, 2)), (1, 0))
        idx = ad.index(b, (slice(None), [0, 2, 2]))
        g = ad.gather_rows(ad.reshape(a, (2, 3, 1)), rows)
        return (ad.sum_(cat * w1) + ad.sum_(st * w2) + ad.sum_(t * a) + ad.sum_(idx * idx)
                + ad.sum_(g * w3) + ad.sum_(a.T * w1[:3, :2]))
    return fn, [a, b]


def _case_where(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    cond = rng.random((3, 4)) < 0.5
    w = rng.normal(size=(3, 4))
    return (lambda: ad.sum_(ad.where(cond, a * b, ad.exp(b)) * w)), [a, b]


def _case_tg_fe(rng, gate=True):
    c, d, m, s = 6, 5, 7, 4
    params = _randomize_zeros(FusionParams(rng, c, d, 3), rng)
    x = _leaf(rng, (2, m, c))
    text = _bank(rng, s, d, n_pad=1)
    w = rng.normal(size=(2, m, c))

    def fn():
        out, g = tg_fe(x, text, params, gate)
        return ad.sum_(out * w) + ad.sum_(g)
    return fn, [x, text.embeddings] + params.tg_fe.parameters()


def _features(rng, b=2, c=6, sizes=((4, 4), (2, 2))) -> MultiScaleFeatures:
    levels = [FeatureLevel(_leaf(rng, (b, h * w, c)), h, w, 8 * 2 ** i) for i, (h, w) in enumerate(sizes)]
    return MultiScaleFeatures(levels)


def _case_vg_tr(rng):
    c, d, s = 6, 5, 4
    params = _randomize_zeros(FusionParams(rng, c, d, 3), rng)
    feats = _features(rng, 2, c)
    text = _bank(rng, s, d, n_pad=1)
    w = rng.normal(size=(2, s, d))
    return (lambda: ad.sum_(vg_tr(text, feats, params).embeddings * w)), \
        [text.embeddings] + [lv.tokens for lv in feats.levels] + params.vg_tr.parameters()


def _case_tg_qe(rng):
    c, d, s = 6, 5, 4
    dec = _randomize_zeros(TextGuidedDecoder(rng, c, d, 3, n_layers=1, n_queries=3), rng)
    q = _leaf(rng, (2, 3, c))
    text = _bank(rng, s, d, n_pad=1, batched=2)
    w = rng.normal(size=(2, 3, c))
    return (lambda: ad.sum_(tg_qe(q, text, dec.tg_qe)[0] * w)), [q, text.embeddings] + dec.tg_qe.parameters()


def _case_head(rng):
    c, d, s = 6, 5, 4
    head = ContrastiveHead(rng, c, d)
    q = _leaf(rng, (2, 3, c))
    text = _bank(rng, s, d, n_pad=1)
    w = rng.normal(size=(2, 3, s)) * text.valid_mask

    def fn():
        sc = contrastive_scores(q, text, head)
        return ad.sum_(ad.where(text.valid_mask, sc, 0.0) * w)
    return fn, [q, text.embeddings] + head.parameters()


def _case_alignment(rng):
    n, s = 5, 4
    scores = _leaf(rng, (n, s), -3, 3)
    k = int(rng.integers(1, 4))
    qs = rng.choice(n, k, replace=False)
    pairs = Assignment([(int(q), i) for i, q in enumerate(qs)])
    ious = rng.uniform(0.1, 0.95, size=k)
    slots = rng.integers(0, s - 1, size=k)
    valid = np.array([True] * (s - 1) + [False])
    return (lambda: alignment_loss(scores, pairs, ious, slots, valid)), [scores]


def _case_giou(rng):
    m = 4
    cxcy = rng.uniform(0.3, 0.7, size=(m, 2))
    wh = rng.uniform(0.1, 0.4, size=(m, 2))
    pred = Tensor(np.concatenate([cxcy, wh], 1), requires_grad=True)
    tgt = np.concatenate([cxcy + rng.uniform(-0.15, 0.15, (m, 2)), wh * rng.uniform(0.6, 1.4, (m, 2))], 1)
    # keep edges apart so min/max stay differentiable
    return (lambda: ad.sum_(giou_loss_t(pred, tgt))), [pred]


def _case_encoder(rng):
    c, d, s = 6, 5, 3
    enc = _randomize_zeros(CollaborationEncoder(rng, c, d, 3, n_levels=2), rng)
    feats = _features(rng, 1, c)
    text = _bank(rng, s, d, n_pad=1)
    w1, w2 = rng.normal(size=(1, 20, c)), rng.normal(size=(1, s, d))

    def fn():
        st = enc(feats, text)
        return ad.sum_(st.features.flat() * w1) + ad.sum_(st.text.embeddings * w2)
    return fn, [text.embeddings] + [lv.tokens for lv in feats.levels] + enc.parameters()


def _case_decoder(rng):
    c, d, s, n = 6, 5, 3, 3
    dec = _randomize_zeros(TextGuidedDecoder(rng, c, d, 3, n_layers=2, n_queries=n, n_freq=2), rng)
    feats = _features(rng, 1, c)
    text = _bank(rng, s, d, n_pad=1, batched=1)
    anchors = np.concatenate([rng.uniform(0.2, 0.8, (20, 2)), np.full((20, 2), 0.2)], 1)
    from .encoder import EnhancedState
    state = EnhancedState(feats, text, [])
    content = _leaf(rng, (1, n, c))
    ref = _leaf(rng, (1, n, 4), -1, 1)
    w_box, w_log = rng.normal(size=(1, n, 4)), rng.normal(size=(1, n, s)) * text.valid_mask

    def fn():
        qs = QuerySet(content, ref, np.zeros((1, n), np.int64), Tensor(np.zeros((1, n, s))))
        total = Tensor(np.array(0.0))
        for out in decoder_forward(state, qs, dec, anchors):
            total = total + ad.sum_(out.boxes * w_box) + ad.sum_(ad.where(text.valid_mask, out.logits, 0.0) * w_log)
        return total
    return fn, [content, ref, text.embeddings] + [lv.tokens for lv in feats.levels] + dec.parameters()


CASES: Dict[str, Tuple[Builder, Optional[int]]] = {
    "add": (_binary(ad.add, shape_b=(4,)), None),
    "sub": (_binary(ad.sub), None),
    "mul": (_binary(ad.mul, shape_b=(3, 1)), None),
    "div": (_binary(ad.div, 0.5, 2.0), None),
    "power": (_unary(lambda x: ad.power(x, 2.5), 0.2, 2.0), None),
    "exp": (_unary(ad.exp), None),
    "log": (_unary(ad.log, 0.2, 3.0), None),
    "sqrt": (_unary(ad.sqrt, 0.2, 3.0), None),
    "sin": (_unary(ad.sin, -3, 3), None),
    "cos": (_unary(ad.cos, -3, 3), None),
    "sigmoid": (_unary(ad.sigmoid, -4, 4), None),
    "silu": (_unary(ad.silu, -4, 4), None),
    "relu": (_unary(ad.relu, away=0.0), None),
    "abs": (_unary(ad.abs_, away=0.0), None),
    "clip": (_unary(lambda x: ad.clip(x, -0.5, 0.5), away=(-0.5, 0.5)), None),
    "maximum": (_binary(ad.maximum, apart=True), None),
    "minimum": (_binary(ad.minimum, apart=True), None),
    "where": (_case_where, None),
    "matmul": (_case_matmul, None),
    "batched_matmul": (_case_bmm, None),
    "reductions": (_case_reductions, None),
    "max": (_case_max, None),
    "softmax": (_case_softmax, None),
    "l2_normalize": (_case_l2norm, None),
    "layer_norm": (_case_layernorm, None),
    "shape_ops": (_case_shapes, None),
    "tg_fe": (_case_tg_fe, None),
    "tg_fe_ungated": (lambda rng: _case_tg_fe(rng, gate=False), None),
    "vg_tr": (_case_vg_tr, None),
    "tg_qe": (_case_tg_qe, None),
    "contrastive_head": (_case_head, None),
    "alignment_loss": (_case_alignment, None),
    "giou_loss": (_case_giou, None),
    "encoder": (_case_encoder, 12),
    "decoder": (_case_decoder, 8),
}


def run_suite(seeds_per_case: int = 3, base_seed: int = 0, cases: Optional[Sequence[str]] = None
              ) -> List[GradResult]:
    results = []
    for ci, name in enumerate(cases or CASES):
        build, cap = CASES[name]
        for k in range(seeds_per_case):
            seed = base_seed + 1000 * ci + k
            rng = np.random.default_rng(seed)
            fn, leaves = build(rng)
            err, n = check_gradients(fn, leaves, EPS, cap, rng)
            results.append(GradResult(name, seed, err, n))
    return results


def main_report(seeds_per_case: int = 3) -> Tuple[List[GradResult], float]:
    t0 = time.perf_counter()
    res = run_suite(seeds_per_case)
    return res, time.perf_counter() - t0
