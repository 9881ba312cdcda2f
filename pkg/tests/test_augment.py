import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchvote.augment import (AugmentProtocol, TangDraw, TangParams, VLDraw, VLParams, adjust_brightness, apply_tang,
                               apply_vl, flip, rotate90, rotate_free, tang_protocol, tdli_expand, vl_protocol,
                               zoom_height)
from patchvote.imagery import GridSpec, central_crop, resize, tile_grid
from patchvote.rng import Rng

from conftest import random_raster


def test_rotate90_index_permutation(gen):
    r = random_raster(gen, 50, 50)
    q = rotate90(r, 1)
    h, w = r.shape[:2]
    for y, x in gen.integers(0, 50, (200, 2)):
        # counterclockwise: source (y, x) lands at (w-1-x, y)
        assert np.array_equal(q[w - 1 - x, y], r[y, x])


def test_rotate90_shapes_and_group(gen):
    r = random_raster(gen, 30, 40)
    assert rotate90(r, 1).shape == (40, 30, 3)
    assert np.array_equal(rotate90(r, 0), r)
    x = r
    for _ in range(4):
        x = rotate90(x, 1)
    assert np.array_equal(x, r)
    with pytest.raises(ValueError):
        rotate90(r, 4)


def test_large_rotation_shape():
    assert rotate90(np.zeros((3000, 4000, 3), np.uint8), 1).shape == (4000, 3000, 3)


def test_flip_direct():
    r = np.array([[[1, 1, 1], [2, 2, 2]]], dtype=np.uint8)
    assert flip(r, "horizontal")[0, :, 0].tolist() == [2, 1]
    assert np.array_equal(flip(r, "vertical"), r)
    with pytest.raises(ValueError):
        flip(r, "diagonal")


@settings(max_examples=50, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), seed=st.integers(0, 2**32 - 1), k=st.integers(0, 3))
def test_dihedral_identities(h, w, seed, k):
    r = random_raster(np.random.default_rng(seed), h, w)
    for axis in ("horizontal", "vertical"):
        assert np.array_equal(flip(flip(r, axis), axis), r)
        assert np.array_equal(flip(rotate90(r, 2), axis), rotate90(flip(r, axis), 2))
    # a flip conjugates a rotation into its inverse
    assert np.array_equal(flip(rotate90(r, k), "horizontal"), rotate90(flip(r, "horizontal"), (4 - k) % 4))


def test_rotate_then_tile_commutes(gen):
    g = GridSpec(3, 4)
    r = random_raster(gen, 12, 16)
    before = tile_grid(r, g)
    after = tile_grid(rotate90(r, 1), g.transpose())
    for i in range(g.rows):
        for j in range(g.cols):
            assert np.array_equal(after.patch(g.cols - 1 - j, i), rotate90(before.patch(i, j), 1))


def test_tdli_count_and_order(gen):
    patches = [random_raster(gen, 6, 6) for _ in range(48)]
    out = tdli_expand(patches, Rng(0))
    assert len(out) == 192
    # every output is one of the 8 dihedral images of its source
    for n, q in enumerate(out):
        src, k = patches[n // 4], n % 4
        base = rotate90(src, k)
        assert any(np.array_equal(q, c) for c in (base, base[:, ::-1], base[::-1], base[::-1, ::-1]))


def test_tdli_without_flips_gives_the_rotations(gen, monkeypatch):
    class NoFlip:
        def random(self, shape):
            return np.ones(shape)

    monkeypatch.setattr(Rng, "stream", lambda self, tag, ordinal=0: NoFlip())
    p = random_raster(gen, 5, 5)
    out = tdli_expand([p], Rng(0))
    assert all(np.array_equal(out[k], rotate90(p, k)) for k in range(4))


def test_tdli_is_seeded(gen):
    ps = [random_raster(gen, 4, 4) for _ in range(5)]
    a, b = tdli_expand(ps, Rng(3), 9), tdli_expand(ps, Rng(3), 9)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_rotate_free_zero_and_right_angle(gen):
    r = random_raster(gen, 21, 21)
    assert np.array_equal(rotate_free(r, 0), r)
    diff = rotate_free(r, 90).astype(int) - rotate90(r, 1).astype(int)
    assert np.abs(diff).max() <= 1


@pytest.mark.parametrize("angle", [-45, -13.7, 5, 30, 45])
def test_rotate_free_keeps_constant(angle):
    r = np.full((15, 22, 3), 140, dtype=np.uint8)
    out = rotate_free(r, angle)
    assert out.shape == r.shape and (out == 140).all()


def test_brightness():
    r = np.full((2, 2, 3), 200, dtype=np.uint8)
    assert (adjust_brightness(r, 1.2) == 240).all()
    assert (adjust_brightness(np.full((1, 1, 3), 250, np.uint8), 1.2) == 255).all()
    assert np.array_equal(adjust_brightness(r, 1.0), r)
    with pytest.raises(ValueError):
        adjust_brightness(r, 1.3)


def test_zoom_height_dimensions(gen, monkeypatch):
    import patchvote.augment as aug

    seen = []
    real = aug.resize
    monkeypatch.setattr(aug, "resize", lambda r, w, h: seen.append((w, h)) or real(r, w, h))
    r = random_raster(gen, 100, 100)
    assert zoom_height(r, 0.8).shape == (100, 100, 3)
    assert zoom_height(r, 1.2).shape == (100, 100, 3)
    assert seen == [(100, 80), (100, 120)]
    assert np.array_equal(zoom_height(r, 1.0), r)


def test_vl_protocol_shapes_and_determinism(gen):
    img = random_raster(gen, 40, 50)
    params = VLParams(crop_size=32, out_size=16, copies=20)
    a = vl_protocol(img, Rng(1), 4, params)
    b = vl_protocol(img, Rng(1), 4, params)
    assert len(a) == 20 and all(x.shape == (16, 16, 3) for x in a)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        vl_protocol(img, Rng(1), 0, VLParams(crop_size=41))


def test_vl_degenerate_draw(gen):
    img = random_raster(gen, 40, 50)
    crop = central_crop(img, 32, 32)
    out = apply_vl(crop, VLDraw(1.0, False, 0.0), 16)
    assert np.array_equal(out, resize(crop, 16, 16))


def test_vl_default_geometry(gen):
    img = random_raster(gen, 3000, 4000)
    out = vl_protocol(img, Rng(0), 0, VLParams(copies=1))
    assert [o.shape for o in out] == [(299, 299, 3)]


def test_tang_protocol(gen):
    img = random_raster(gen, 30, 40)
    out = tang_protocol(img, Rng(2), 5)
    assert out.shape == (224, 224, 3)
    assert np.array_equal(out, tang_protocol(img, Rng(2), 5))
    # degenerate draw: only the flip and the resize remain
    ident = apply_tang(img, TangDraw(0.0, 1.0), 24)
    assert np.array_equal(ident, flip(resize(img, 24, 24), "horizontal"))
    assert tang_protocol(img, Rng(2), 0, TangParams(out_size=12)).shape == (12, 12, 3)


def test_protocol_names():
    assert AugmentProtocol("verly_lopes").kind == "vl"
    with pytest.raises(ValueError):
        AugmentProtocol("cutmix")
    with pytest.raises(ValueError):
        AugmentProtocol("vl", vl=VLParams(copies=0))


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), k=st.integers(0, 3), seed=st.integers(0, 2**32 - 1))
def test_rotate90_matches_numpy(h, w, k, seed):
    r = random_raster(np.random.default_rng(seed), h, w)
    assert np.array_equal(rotate90(r, k), np.rot90(r, k, axes=(0, 1)))


def test_half_turn_is_both_flips(gen):
    for _ in range(20):
        r = random_raster(gen, int(gen.integers(1, 12)), int(gen.integers(1, 12)))
        assert np.array_equal(rotate90(r, 2), flip(flip(r, "horizontal"), "vertical"))


@settings(max_examples=40, deadline=None)
@given(s=st.integers(2, 120), t=st.integers(1, 70), k=st.integers(1, 3), seed=st.integers(0, 2**32 - 1))
def test_rotation_commutes_with_square_resize(s, t, k, seed):
    # lets the harness flip/rotate patches after resizing them to the model input
    r = random_raster(np.random.default_rng(seed), s, s)
    assert np.array_equal(resize(rotate90(r, k), t, t), rotate90(resize(r, t, t), k))
    assert np.array_equal(resize(flip(r, "vertical"), t, t), flip(resize(r, t, t), "vertical"))
