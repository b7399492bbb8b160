import numpy as np
import pytest

from ovdet import autodiff as ad
from ovdet.autodiff import Tensor
from ovdet.decoder import (CapacityError, ContrastiveHead, LayerOutput, QuerySet, TextGuidedDecoder,
                           contrastive_scores, decode_detections, decoder_forward, select_queries, tg_qe)
from ovdet.encoder import EnhancedState
from ovdet.gradcheck import check_gradients
from ovdet.nn import MLP

from helpers import make_bank, make_features

C, D = 8, 6


def identity_head(rng, alpha=5.0, beta=-2.0):
    head = ContrastiveHead(rng, D, D, alpha, beta)
    head.proj.weight.data = np.eye(D)
    head.proj.bias.data = np.zeros(D)
    return head


def randomize(module, rng, scale=0.3):
    for p in module.parameters():
        p.data = p.data + rng.uniform(-scale, scale, size=p.shape)
    return module


class TestContrastiveScores:
    def test_parallel_orthogonal_and_half(self):
        rng = np.random.default_rng(0)
        head = identity_head(rng)
        t = np.zeros((3, D))
        t[0, 0] = 1.0
        t[1, 1] = 1.0
        t[2, :2] = [0.5, np.sqrt(0.75)]
        from ovdet.text import ClassEmbeddingBank
        bank = ClassEmbeddingBank(Tensor(t), np.ones(3, bool), [0, 1, 2], [])
        q = np.zeros((1, 1, D))
        q[0, 0, 0] = 2.0
        s = contrastive_scores(Tensor(q), bank, head).data[0, 0]
        assert s[0] == pytest.approx(3.0)     # alpha + beta
        assert s[1] == pytest.approx(-2.0)    # beta
        assert s[2] == pytest.approx(0.5)
        assert 1 / (1 + np.exp(-s[2])) == pytest.approx(0.6225, abs=1e-4)

    def test_padding_is_masked(self):
        rng = np.random.default_rng(1)
        head = ContrastiveHead(rng, C, D)
        s = contrastive_scores(Tensor(rng.normal(size=(2, 4, C))), make_bank(rng, 2, D, n_pad=2), head)
        assert (s.data[..., 2:] == ad.MASK_FILL).all()
        p = 1 / (1 + np.exp(-s.data[..., :2]))
        assert ((p > 0) & (p < 1)).all()

    def test_scalar_parameters(self):
        head = ContrastiveHead(np.random.default_rng(0), C, D)
        assert head.alpha.data.size == 1 and head.beta.data.size == 1
        assert head.alpha.requires_grad and head.beta.requires_grad


def _state(rng, n_valid=3, n_pad=0, b=1):
    return EnhancedState(make_features(rng, b, C), make_bank(rng, n_valid, D, n_pad), [])


def _box_head(rng):
    return MLP(rng, (C, C, 4))


class TestSelectQueries:
    def test_saturation_sorted(self):
        rng = np.random.default_rng(0)
        st = _state(rng)
        head = ContrastiveHead(rng, C, D)
        m = st.features.num_tokens
        q = select_queries(st, head, m, _box_head(rng), np.full((m, 4), 0.5))
        assert sorted(q.token_index[0]) == list(range(m))
        best = contrastive_scores(st.features.flat(), st.text, head).data.max(-1)[0]
        assert (np.diff(best[q.token_index[0]]) <= 0).all()

    def test_ties_prefer_lower_index(self):
        rng = np.random.default_rng(1)
        feats = make_features(rng, 1, C)
        for lvl in feats.levels:
            lvl.tokens.data[:] = 1.0   # identical tokens -> identical scores
        st = EnhancedState(feats, make_bank(rng, 2, D), [])
        head = ContrastiveHead(rng, C, D)
        q = select_queries(st, head, 4, _box_head(rng), np.full((21, 4), 0.5))
        assert q.token_index[0].tolist() == [0, 1, 2, 3]

    def test_unique_maximum_first(self):
        rng = np.random.default_rng(2)
        head = identity_head(rng)
        feats = make_features(rng, 1, D, grids=((3, 3),))
        bank = make_bank(rng, 2, D)
        tokens = -np.tile(bank.embeddings.data[0], (9, 1)) + rng.normal(0, 0.01, (9, D))
        tokens[7] = bank.embeddings.data[0]
        feats.levels[0].tokens.data = tokens[None]
        q = select_queries(EnhancedState(feats, bank, []), head, 3, MLP(rng, (D, D, 4)), np.full((9, 4), 0.5))
        assert q.token_index[0, 0] == 7

    def test_capacity(self):
        rng = np.random.default_rng(3)
        st = _state(rng)
        with pytest.raises(CapacityError):
            select_queries(st, ContrastiveHead(rng, C, D), 22, _box_head(rng), np.full((21, 4), 0.5))

    def test_padding_never_wins(self):
        rng = np.random.default_rng(4)
        st = _state(rng, 2, 3)
        head = ContrastiveHead(rng, C, D)
        q = select_queries(st, head, 5, _box_head(rng), np.full((21, 4), 0.5))
        assert (q.scores.data[..., 2:] == ad.MASK_FILL).all()
        assert (q.scores.data[..., :2] > -1e3).all()


class TestTgQe:
    def _dec(self, rng):
        return randomize(TextGuidedDecoder(rng, C, D, 4, n_layers=2, n_queries=3), rng)

    def test_zero_values(self):
        rng = np.random.default_rng(0)
        dec = self._dec(rng)
        dec.tg_qe.W_v.data[:] = 0.0
        q = Tensor(rng.normal(size=(1, 3, C)))
        out, gate = tg_qe(q, make_bank(rng, 2, D), dec.tg_qe)
        assert np.array_equal(out.data, q.data)
        assert gate.shape == (1, 3)

    def test_saturated_gate(self):
        rng = np.random.default_rng(1)
        dec = self._dec(rng)
        bank = make_bank(rng, 2, D)
        q = Tensor(np.ones((1, 3, C)))
        # align queries against both classes so that every logit is hugely negative
        dec.tg_qe.W_q.data = np.full((C, 4), 1.0)
        dec.tg_qe.W_k.data = np.zeros((D, 4))
        dec.tg_qe.W_k.data[:, :] = 0.0
        keys = bank.embeddings.data @ dec.tg_qe.W_k.data
        assert not keys.any()
        logits = np.full((1, 3, 2), -1e4)
        from ovdet.encoder import gated_injection
        out, _ = gated_injection(q, Tensor(logits), ad.matmul(bank.embeddings, dec.tg_qe.W_v), bank.valid_mask)
        assert np.max(np.abs(out.data - q.data)) < 1e-6

    def test_scalar_case(self):
        rng = np.random.default_rng(2)
        dec = self._dec(rng)
        dec.tg_qe.W_q.data[:] = 0.0
        bank = make_bank(rng, 1, D)
        q = Tensor(rng.normal(size=(1, 1, C)))
        out, gate = tg_qe(q, bank, dec.tg_qe)
        out = out.data[0, 0]
        assert gate.data.item() == 0.5
        np.testing.assert_allclose(out, q.data[0, 0] + 0.5 * bank.embeddings.data[0] @ dec.tg_qe.W_v.data,
                                   atol=1e-15)

    def test_padding_invariance(self):
        rng = np.random.default_rng(3)
        dec = self._dec(rng)
        q = Tensor(rng.normal(size=(2, 3, C)))
        bank = make_bank(rng, 3, D)
        a, ga = tg_qe(q, bank, dec.tg_qe)
        for extra in (1, 4, 8):
            b, gb = tg_qe(q, bank.padded(extra), dec.tg_qe)
            assert np.max(np.abs(b.data - a.data)) < 1e-9
            assert np.max(np.abs(gb.data - ga.data)) < 1e-9

    def test_shared_across_layers(self):
        dec = TextGuidedDecoder(np.random.default_rng(0), C, D, 4, n_layers=3)
        names = [n for n, _ in dec.named_parameters() if "tg_qe" in n]
        assert names == ["tg_qe.W_q", "tg_qe.W_k", "tg_qe.W_v"]


class TestDecoderForward:
    def _run(self, rng, dec, st, n=3, n_layers=None):
        m = st.features.num_tokens
        anchors = np.concatenate([rng.uniform(0.1, 0.9, (m, 2)), rng.uniform(0.05, 0.3, (m, 2))], 1)
        q = select_queries(st, dec.head, n, dec.enc_box_head, anchors)
        return q, decoder_forward(st, q, dec, anchors, n_layers)

    def test_zeroed_updates_keep_reference_boxes(self):
        rng = np.random.default_rng(0)
        dec = TextGuidedDecoder(rng, C, D, 4, n_layers=1, n_queries=3)
        q, outs = self._run(rng, dec, _state(rng))
        assert len(outs) == 1
        np.testing.assert_array_equal(outs[0].boxes.data, q.reference_boxes.data)

    def test_boxes_in_unit_range(self):
        rng = np.random.default_rng(1)
        dec = randomize(TextGuidedDecoder(rng, C, D, 4, n_layers=3, n_queries=4), rng, 2.0)
        _, outs = self._run(rng, dec, _state(rng, b=2), 4)
        assert len(outs) == 3
        for o in outs:
            assert ((o.boxes.data >= 0) & (o.boxes.data <= 1)).all()

    def test_needs_a_layer(self):
        rng = np.random.default_rng(2)
        dec = TextGuidedDecoder(rng, C, D, 4, n_layers=1)
        with pytest.raises(ValueError):
            self._run(rng, dec, _state(rng), n_layers=0)

    def test_small_instance_gradients(self):
        rng = np.random.default_rng(3)
        dec = randomize(TextGuidedDecoder(rng, C, D, 4, n_layers=1, n_queries=2, n_freq=2), rng)
        feats = make_features(rng, 1, C, grids=((2, 2),))
        feats.levels[0].tokens.requires_grad = True
        bank = make_bank(rng, 2, D, requires_grad=True)
        st = EnhancedState(feats, bank, [])
        anchors = np.array([[0.25, 0.25, 0.5, 0.5], [0.75, 0.25, 0.5, 0.5],
                            [0.25, 0.75, 0.5, 0.5], [0.75, 0.75, 0.5, 0.5]])
        content = Tensor(rng.normal(size=(1, 2, C)), requires_grad=True)
        ref = Tensor(rng.normal(size=(1, 2, 4)), requires_grad=True)
        wb, wl = rng.normal(size=(1, 2, 4)), rng.normal(size=(1, 2, 2))

        def fn():
            qs = QuerySet(content, ref, np.zeros((1, 2), np.int64), Tensor(np.zeros((1, 2, 2))))
            o = decoder_forward(st, qs, dec, anchors)[-1]
            return ad.sum_(o.boxes * wb) + ad.sum_(o.logits * wl)
        err, _ = check_gradients(fn, [content, ref, feats.levels[0].tokens, bank.embeddings] + dec.parameters())
        assert err < 1e-4

    def test_decode_drops_padding(self):
        rng = np.random.default_rng(4)
        bank = make_bank(rng, 2, D, n_pad=2)
        logits = np.concatenate([rng.normal(size=(1, 3, 2)), np.full((1, 3, 2), ad.MASK_FILL)], -1)
        [ds] = decode_detections(LayerOutput(Tensor(np.full((1, 3, 4), 0.5)), Tensor(logits)), bank)
        assert ds.scores.shape == (3, 2)
        assert ds.class_ids == [0, 1]
        assert None not in ds.class_names
