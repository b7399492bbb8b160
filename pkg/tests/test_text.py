from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ovdet.text import (BASE, NOVEL, CapacityError, ClassVocabulary, SamplingPolicy, embed_class_names,
                        embed_names, load_vocabulary, normalize_name, sample_slot_classes,
                        sample_training_classes, save_vocabulary, token_vector)

NAMES = ["red circle", "red square", "blue square", "green triangle", "blue circle"]


def cos(a, b):
    return float(a @ b / np.linalg.norm(a) / np.linalg.norm(b))


class TestVocabulary:
    def test_names_are_normalised(self):
        v = ClassVocabulary(("  Red   Circle ",), (BASE,))
        assert v.names == ("red circle",)

    @pytest.mark.parametrize("names,roles", [
        ((), ()),
        (("a", "a"), (BASE, BASE)),
        (("a", ""), (BASE, BASE)),
        (("a",), (NOVEL,)),
        (("a",), ("other",)),
    ])
    def test_invalid(self, names, roles):
        with pytest.raises(ValueError):
            ClassVocabulary(names, roles)

    def test_roles(self):
        v = ClassVocabulary.from_names(NAMES, novel=["blue circle"])
        assert v.novel_indices == [4]
        assert v.base_indices == [0, 1, 2, 3]
        assert v.role_of("Blue Circle") == NOVEL

    def test_file_round_trip(self, tmp_path):
        v = ClassVocabulary.from_names(NAMES, novel=["red square"])
        save_vocabulary(v, tmp_path / "vocab.txt")
        assert (tmp_path / "vocab.txt").read_text().splitlines()[1] == "red square\tnovel"
        assert load_vocabulary(tmp_path / "vocab.txt") == v


class TestEmbedding:
    def test_same_name_same_row(self):
        e = embed_names(["red circle", "red circle"], 32)
        assert np.array_equal(e[0], e[1])
        assert cos(e[0], e[1]) == pytest.approx(1.0)

    def test_shared_token_is_closer(self):
        e = embed_names(["red circle", "red square", "blue square"], 64)
        assert cos(e[0], e[1]) > cos(e[0], e[2])

    def test_unit_rows(self):
        bank = embed_class_names(NAMES, 16)
        np.testing.assert_allclose(np.linalg.norm(bank.embeddings.data, axis=1), 1.0, atol=1e-9)
        assert bank.valid_mask.all()

    def test_additive_composition(self):
        d = 48
        expected = token_vector("red", d) + token_vector("circle", d)
        np.testing.assert_allclose(embed_names(["red circle"], d)[0], expected / np.linalg.norm(expected))

    def test_pure_function(self):
        assert np.array_equal(embed_names(NAMES, 24), embed_names(list(NAMES), 24))

    def test_contract_errors(self):
        with pytest.raises(ValueError):
            embed_names([], 16)
        with pytest.raises(ValueError):
            embed_names(["a"], 4)

    def test_normalize_name(self):
        assert normalize_name("Red\tCIRCLE") == "red circle"


class TestSampling:
    def test_saturation_is_permutation(self):
        v = ClassVocabulary.from_names(NAMES)
        bank, slot_of = sample_training_classes(v, range(5), SamplingPolicy(5, seed=3), d=16)
        assert sorted(bank.slot_to_class) == list(range(5))
        assert bank.valid_mask.all()
        assert set(slot_of) == set(range(5))

    def test_exhaustion_pads(self):
        v = ClassVocabulary.from_names(NAMES[:3])
        bank, _ = sample_training_classes(v, [0], SamplingPolicy(5, seed=0), d=16)
        assert bank.n_valid == 3 and bank.n_slots == 5
        pad = ~bank.valid_mask
        assert not bank.embeddings.data[pad].any()
        assert all(bank.slot_to_class[i] is None for i in np.flatnonzero(pad))

    def test_capacity_error(self):
        v = ClassVocabulary.from_names(NAMES)
        with pytest.raises(CapacityError):
            sample_training_classes(v, [0, 1, 2], SamplingPolicy(2))

    def test_deterministic(self):
        v = ClassVocabulary.from_names(NAMES)
        a, _ = sample_training_classes(v, [1], SamplingPolicy(4, seed=9), d=16)
        b, _ = sample_training_classes(v, [1], SamplingPolicy(4, seed=9), d=16)
        assert a.slot_to_class == b.slot_to_class
        assert np.array_equal(a.embeddings.data, b.embeddings.data)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 10 ** 6), st.data())
    def test_positives_always_present(self, n_classes, seed, data):
        positives = data.draw(st.sets(st.integers(0, n_classes - 1), max_size=n_classes))
        n_slots = data.draw(st.integers(max(1, len(positives)), 12))
        slots = sample_slot_classes(n_classes, positives, n_slots, np.random.default_rng(seed))
        assert len(slots) == n_slots
        assert set(positives) <= set(s for s in slots if s is not None)
        real = [s for s in slots if s is not None]
        assert len(real) == len(set(real)) == min(n_slots, n_classes)

    def test_slot_zero_is_uniform(self):
        rng = np.random.default_rng(0)
        counts = Counter(sample_slot_classes(5, [], 5, rng)[0] for _ in range(10_000))
        for c in range(5):
            assert abs(counts[c] / 10_000 - 0.2) <= 0.02

    def test_pool_restricts_negatives(self):
        slots = sample_slot_classes(6, [0], 6, np.random.default_rng(1), pool=[0, 1, 2])
        assert set(s for s in slots if s is not None) == {0, 1, 2}
