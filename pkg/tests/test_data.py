import json
import logging
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ovdet.data import (GenerationError, IngestionError, ObjectAnn, SceneSpec, TileSpec, generate_scenes,
                        load_annotations, load_image, save_dataset, shape_mask, tile_image, tile_offsets)

SMALL = SceneSpec(canvas=64, shapes=("square", "ring", "triangle"), objects=(2, 4), size=(8 / 64, 16 / 64),
                  novel=("red triangle",), seed=5)


def all_objects(records):
    return [o for r in records for o in r.objects]


class TestGenerate:
    def test_empty(self):
        assert generate_scenes(SMALL, 0) == ([], [])

    def test_deterministic(self):
        a_img, a_rec = generate_scenes(SMALL, 6)
        b_img, b_rec = generate_scenes(SMALL, 6)
        assert a_rec == b_rec
        assert all(np.array_equal(x, y) for x, y in zip(a_img, b_img))

    def test_seed_changes_output(self):
        other = SceneSpec(**{**SMALL.__dict__, "seed": 6})
        assert generate_scenes(SMALL, 3)[1] != generate_scenes(other, 3)[1]

    def test_novel_withheld_from_training(self):
        _, train = generate_scenes(SMALL, 60, "train")
        _, evals = generate_scenes(SMALL, 20, "eval")
        assert "red triangle" not in {o.class_name for o in all_objects(train)}
        assert "red triangle" in {o.class_name for o in all_objects(evals)}

    def test_objects_inside_canvas(self):
        _, recs = generate_scenes(SMALL, 30)
        for o in all_objects(recs):
            x, y, w, h = o.bbox
            assert x >= 0 and y >= 0 and x + w <= 64 and y + h <= 64 and w > 0 and h > 0

    def test_overlap_bounded(self):
        from ovdet.data import _box_iou_xywh
        _, recs = generate_scenes(SMALL, 30)
        for r in recs:
            for i, a in enumerate(r.objects):
                for b in r.objects[i + 1:]:
                    assert _box_iou_xywh(a.bbox, b.bbox) <= SMALL.max_overlap

    def test_class_balance(self):
        spec = SceneSpec(canvas=96, shapes=("square", "ring", "circle"), colors=("red", "green", "blue"),
                         objects=(2, 5), size=(8 / 96, 20 / 96), novel=("blue ring",), seed=1)
        _, recs = generate_scenes(spec, 500)
        counts = Counter(o.class_name for o in all_objects(recs))
        base = spec.vocabulary().names_with_role("base")
        uniform = sum(counts.values()) / len(base)
        for n in base:
            assert 0.5 * uniform <= counts[n] <= 1.5 * uniform

    def test_infeasible_placement(self):
        spec = SceneSpec(canvas=16, shapes=("square",), colors=("red",), objects=(6, 6), size=(0.9, 0.9),
                         max_overlap=0.0, max_retries=5)
        with pytest.raises(GenerationError, match="max_overlap"):
            generate_scenes(spec, 1)

    def test_empty_sets(self):
        with pytest.raises(ValueError):
            generate_scenes(SceneSpec(shapes=()), 1)

    def test_shape_masks(self):
        for shape in ("circle", "square", "triangle", "cross", "ring"):
            m = shape_mask(shape, 12)
            assert m.shape == (12, 12) and m.any()


class TestTiling:
    def test_grid(self):
        tiles = tile_image(np.zeros((1600, 1600, 3), np.uint8), [], TileSpec(800, 800))
        assert [t.offset for t in tiles] == [(0, 0), (800, 0), (0, 800), (800, 800)]
        assert all(t.image.shape == (800, 800, 3) for t in tiles)

    def test_contained_box(self):
        tiles = tile_image(np.zeros((1600, 1600, 3), np.uint8), [ObjectAnn("a", (900, 100, 50, 40))])
        hits = [(t.offset, t.objects) for t in tiles if t.objects]
        assert hits == [((800, 0), [ObjectAnn("a", (100, 100, 50, 40))])]

    def test_straddling_box(self):
        tiles = tile_image(np.zeros((1600, 1600, 3), np.uint8), [ObjectAnn("a", (760, 100, 80, 40))])
        kept = {t.offset: t.objects for t in tiles if t.objects}
        assert kept == {(0, 0): [ObjectAnn("a", (760, 100, 40, 40))],
                        (800, 0): [ObjectAnn("a", (0, 100, 40, 40))]}

    def test_sliver_dropped(self):
        tiles = tile_image(np.zeros((1600, 1600, 3), np.uint8), [ObjectAnn("a", (790, 100, 100, 40))])
        assert {t.offset for t in tiles if t.objects} == {(800, 0)}

    def test_last_row_shifted_inward(self):
        assert tile_offsets(1000, 800, 800) == [0, 200]
        assert tile_offsets(1600, 800, 400) == [0, 400, 800]

    def test_small_image_padded(self):
        [t] = tile_image(np.full((300, 500, 3), 7, np.uint8), [], TileSpec(800, 800))
        assert t.image.shape == (800, 800, 3)
        assert t.image[:300, :500].min() == 7 and t.image[300:].max() == 0

    def test_stride_contract(self):
        with pytest.raises(ValueError):
            TileSpec(800, 900)
        with pytest.raises(ValueError):
            TileSpec(800, 0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_clipped_boxes_stay_inside_originals(self, seed):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(100, 400, size=2)
        objs = []
        for _ in range(6):
            bw, bh = rng.integers(2, 80, size=2)
            objs.append(ObjectAnn("a", (float(rng.integers(0, w - 1)), float(rng.integers(0, h - 1)),
                                        float(bw), float(bh))))
        spec = TileSpec(int(rng.integers(40, 150)), int(rng.integers(1, 40)), float(rng.uniform(0.1, 0.9)))
        for t in tile_image(np.zeros((h, w), np.uint8), objs, spec):
            ox, oy = t.offset
            for k in t.objects:
                x, y, bw, bh = k.bbox
                assert 0 <= x and 0 <= y and x + bw <= spec.tile and y + bh <= spec.tile
                assert any(o.bbox[0] <= x + ox and o.bbox[1] <= y + oy and
                           x + ox + bw <= o.bbox[0] + o.bbox[2] and y + oy + bh <= o.bbox[1] + o.bbox[3]
                           for o in objs)


def _coco(tmp_path, anns, width=50, height=40, cats=({"id": 1, "name": "red square"},)):
    doc = {"images": [{"id": 3, "file_name": "a.png", "width": width, "height": height}],
           "annotations": anns, "categories": list(cats)}
    p = tmp_path / "ann.json"
    p.write_text(json.dumps(doc))
    return p


class TestLoad:
    def test_minimal(self, tmp_path):
        loaded = load_annotations(_coco(tmp_path, [{"id": 1, "image_id": 3, "category_id": 1,
                                                    "bbox": [1, 2, 10, 5]}]))
        assert len(loaded.records) == 1
        assert loaded.vocabulary.names == ("red square",)
        assert loaded.records[0].objects == [ObjectAnn("red square", (1.0, 2.0, 10.0, 5.0))]
        assert loaded.clipped == 0

    def test_clipping_counted(self, tmp_path, caplog):
        anns = [{"id": 1, "image_id": 3, "category_id": 1, "bbox": [45, 30, 10, 20]},
                {"id": 2, "image_id": 3, "category_id": 1, "bbox": [-4, 0, 10, 10]}]
        with caplog.at_level(logging.WARNING):
            loaded = load_annotations(_coco(tmp_path, anns))
        assert loaded.clipped == 2
        assert sum("clipped" in r.message for r in caplog.records) == 2
        assert loaded.records[0].objects[0].bbox == (45.0, 30.0, 5.0, 10.0)
        assert loaded.records[0].objects[1].bbox == (0.0, 0.0, 6.0, 10.0)

    def test_undefined_category(self, tmp_path):
        with pytest.raises(IngestionError, match="undefined category id 9"):
            load_annotations(_coco(tmp_path, [{"id": 1, "image_id": 3, "category_id": 9, "bbox": [1, 1, 2, 2]}]))

    def test_box_outside_image(self, tmp_path):
        with pytest.raises(IngestionError, match=r"annotations\[0\]"):
            load_annotations(_coco(tmp_path, [{"id": 1, "image_id": 3, "category_id": 1, "bbox": [60, 1, 2, 2]}]))

    def test_unparseable(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{")
        with pytest.raises(IngestionError):
            load_annotations(p)

    def test_round_trip(self, tmp_path):
        images, records = generate_scenes(SMALL, 4, "eval")
        path = save_dataset(tmp_path, images, records, SMALL.vocabulary())
        loaded = load_annotations(path)
        assert loaded.records == records
        assert loaded.vocabulary == SMALL.vocabulary()
        assert np.array_equal(load_image(tmp_path / "images" / records[2].file_name), images[2])
