import numpy as np
import pytest

from ovdet import autodiff as ad
from ovdet.autodiff import Tensor
from ovdet.backbone import Backbone, ImageBatch, patchify
from ovdet.gradcheck import check_gradients


def features(pixels, channels=8, seed=0):
    return Backbone(np.random.default_rng(seed), channels)(ImageBatch(Tensor(pixels)))


def test_level_grids():
    f = features(np.random.default_rng(0).random((2, 3, 64, 64)))
    assert [(l.height, l.width, l.stride) for l in f.levels] == [(8, 8, 8), (4, 4, 16), (2, 2, 32)]
    assert {l.tokens.shape[-1] for l in f.levels} == {8}
    assert f.num_tokens == 84


@pytest.mark.parametrize("h,w", [(64, 96), (128, 128), (32, 160)])
def test_token_count(h, w):
    f = features(np.zeros((1, 3, h, w)))
    assert f.num_tokens == h * w * (1 / 64 + 1 / 256 + 1 / 1024)
    assert f.flat().shape == (1, f.num_tokens, 8)


def test_zero_image_zero_tokens():
    bb = Backbone(np.random.default_rng(1), 8)
    for stem in bb.stems:
        stem.proj.bias.data[:] = 0.0
    f = bb(ImageBatch(Tensor(np.zeros((1, 3, 64, 64)))))
    assert all(not l.tokens.data.any() for l in f.levels)


def test_size_not_divisible():
    with pytest.raises(ValueError):
        ImageBatch(Tensor(np.zeros((1, 3, 48, 64))))
    with pytest.raises(ValueError):
        ImageBatch(Tensor(np.zeros((1, 1, 64, 64))))


def test_from_hwc_scales_uint8():
    img = np.full((32, 32, 3), 255, np.uint8)
    assert ImageBatch.from_hwc([img]).pixels.data.max() == 1.0


def test_patchify_layout():
    x = np.arange(2 * 3 * 4 * 4, dtype=float).reshape(2, 3, 4, 4)
    p = patchify(Tensor(x), 2).data
    assert p.shape == (2, 4, 12)
    np.testing.assert_array_equal(p[1, 1], x[1, :, 0:2, 2:4].reshape(-1))


def test_translation_by_one_stride():
    rng = np.random.default_rng(2)
    img = rng.random((1, 3, 64, 64))
    a = features(img).levels[0].tokens.data.reshape(8, 8, -1)
    b = features(np.roll(img, 8, axis=3)).levels[0].tokens.data.reshape(8, 8, -1)
    np.testing.assert_allclose(b[:, 1:], a[:, :-1], atol=1e-12)


def test_anchors():
    f = features(np.zeros((1, 3, 64, 128)))
    a = f.anchors(64, 128)
    assert a.shape == (f.num_tokens, 4)
    np.testing.assert_allclose(a[0], [4 / 128, 4 / 64, 8 / 128, 8 / 64])


def test_pixel_gradients():
    rng = np.random.default_rng(3)
    bb = Backbone(rng, 4)
    pixels = Tensor(rng.random((1, 3, 32, 32)), requires_grad=True)
    w = [rng.normal(size=l) for l in ((1, 16, 4), (1, 4, 4), (1, 1, 4))]

    def fn():
        f = bb(ImageBatch(pixels))
        out = ad.sum_(f.levels[0].tokens * w[0])
        for lvl, wi in zip(f.levels[1:], w[1:]):
            out = out + ad.sum_(lvl.tokens * wi)
        return out
    err, n = check_gradients(fn, [pixels], max_coords=40, rng=rng)
    assert n == 40 and err < 1e-4
