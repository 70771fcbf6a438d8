import itertools

import numpy as np
import pytest

from coordaug import ddim
from coordaug.alignment import (
    align_step,
    bbox_to_latent_mask,
    cover_region,
    decode_latent,
    edit_latent,
    encode_image,
)
from coordaug.backends import AffineDenoiser, ConstantDenoiser, IdentityCodec, PromptStubDenoiser
from coordaug.errors import BackendError, DegenerateMaskError, ValidationError


def _cells_by_enumeration(bbox, f, h, w):
    x, y, bw, bh = bbox
    cells = set()
    for r, c in itertools.product(range(h), range(w)):
        # positive-area overlap of [c*f, (c+1)*f) x [r*f, (r+1)*f) with the box
        if min((c + 1) * f, x + bw) > max(c * f, x) and min((r + 1) * f, y + bh) > max(r * f, y):
            cells.add((r, c))
    return cells


def _cells(mask):
    return {tuple(map(int, rc)) for rc in np.argwhere(mask == 1)}


def test_full_image_bbox_degenerate():
    with pytest.raises(DegenerateMaskError):
        bbox_to_latent_mask([0, 0, 64, 64], (64, 64), (8, 8))


def test_single_cell():
    m = bbox_to_latent_mask([8, 8, 8, 8], (64, 64), (8, 8))
    assert _cells(m) == {(1, 1)} == _cells_by_enumeration((8, 8, 8, 8), 8, 8, 8)


def test_straddling_bbox():
    m = bbox_to_latent_mask([7, 7, 2, 2], (64, 64), (8, 8))
    assert _cells(m) == {(0, 0), (0, 1), (1, 0), (1, 1)} == _cells_by_enumeration((7, 7, 2, 2), 8, 8, 8)


def test_mask_matches_enumeration_random():
    rng = np.random.default_rng(0)
    for _ in range(200):
        x, y = rng.uniform(0, 60, size=2)
        bw, bh = rng.uniform(0.1, 64 - x), rng.uniform(0.1, 64 - y)
        bbox = (float(x), float(y), float(bw), float(bh))
        try:
            m = bbox_to_latent_mask(bbox, (64, 64), (8, 8))
        except DegenerateMaskError:
            assert len(_cells_by_enumeration(bbox, 8, 8, 8)) == 64
            continue
        assert _cells(m) == _cells_by_enumeration(bbox, 8, 8, 8)


def test_non_integer_factor():
    with pytest.raises(ValidationError):
        bbox_to_latent_mask([1, 1, 2, 2], (64, 60), (8, 8))


def test_align_step_extremes():
    a = np.random.default_rng(0).normal(size=(4, 3, 3))
    b = np.random.default_rng(1).normal(size=(4, 3, 3))
    assert np.array_equal(align_step(a, b, np.ones((3, 3))), a)
    assert np.array_equal(align_step(a, b, np.zeros((3, 3))), b)


def test_align_step_half_mask():
    a = np.array([[[1.0, 2.0]]])
    b = np.array([[[10.0, 20.0]]])
    assert align_step(a, b, np.array([[1.0, 0.0]])).tolist() == [[[1.0, 20.0]]]


def test_align_step_idempotent_and_shapes():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 4, 4))
    m = (rng.random((4, 4)) > 0.5).astype(float)
    once = align_step(a, b, m)
    assert np.array_equal(align_step(once, b, m), once)
    with pytest.raises(ValidationError):
        align_step(a, b[:, :3], m)


MASK = np.zeros((6, 6))
MASK[1:4, 2:5] = 1.0

DENOISERS = [
    ConstantDenoiser(0.3),
    AffineDenoiser(lambda u: 0.4 * u, lambda u: 0.2),
    PromptStubDenoiser(gain=0.1, strength=0.5),
]


@pytest.mark.parametrize("den", DENOISERS)
def test_environment_preserved_exactly(den):
    z0 = np.random.default_rng(5).normal(size=(4, 6, 6))
    s = ddim.make_schedule(15)
    out = edit_latent(z0, "A picture of [dog]", MASK, den, s, 7.5)
    env = MASK == 0
    assert np.array_equal(out[:, env], z0[:, env])


def test_object_region_equals_plain_reconstruction():
    den = AffineDenoiser(lambda u: 0.3, lambda u: 0.05)  # ignores the condition
    z0 = np.random.default_rng(6).normal(size=(3, 6, 6))
    s = ddim.make_schedule(40)
    out = edit_latent(z0, "A picture of [cat]", MASK, den, s, 7.5)
    plain = ddim.sample(ddim.invert(z0, den, s)[-1], den, s, "A picture of [cat]", 7.5)
    inside = MASK == 1
    # affine eps ignores neighbours, so the masked loop equals the unmasked one inside
    np.testing.assert_allclose(out[:, inside], plain[:, inside], atol=1e-12)


def test_zero_steps_returns_input():
    z0 = np.random.default_rng(7).normal(size=(2, 6, 6))
    out = edit_latent(z0, "p", MASK, ConstantDenoiser(1.0), ddim.NoiseSchedule.from_alpha_bar([0.99]))
    assert np.array_equal(out, z0)


def test_zero_denoiser_closed_form():
    z0 = np.random.default_rng(8).normal(size=(2, 6, 6))
    s = ddim.make_schedule(12)
    out = edit_latent(z0, "p", MASK, ConstantDenoiser(0.0), s, 3.0)
    # eps == 0: inversion scales by sqrt(ab_T/ab_0) and the reverse flow undoes it
    np.testing.assert_allclose(out, z0, atol=1e-12)


def test_degenerate_mask_rejected_before_denoiser():
    class Never:
        def predict(self, *a):
            raise AssertionError("denoiser must not be called")

    with pytest.raises(DegenerateMaskError):
        edit_latent(np.zeros((1, 2, 2)), "p", np.ones((2, 2)), Never(), ddim.make_schedule(3))


def test_without_alignment_environment_drifts():
    z0 = np.random.default_rng(9).normal(size=(2, 6, 6))
    s = ddim.make_schedule(10)
    den = PromptStubDenoiser(gain=0.1, strength=0.5)
    aligned = edit_latent(z0, "A picture of [x]", MASK, den, s, 7.5)
    free = edit_latent(z0, "A picture of [x]", MASK, den, s, 7.5, align=False)
    env, obj = MASK == 0, MASK == 1
    assert not np.allclose(free[:, env], z0[:, env])
    assert not np.allclose(free[:, obj], aligned[:, obj])


def test_identity_codec_exact():
    img = np.arange(256, dtype=np.uint8).reshape(16, 16)
    img = np.stack([img, img[::-1], img.T], axis=-1)
    z, f = encode_image(img, IdentityCodec())
    assert f == 1 and z.shape == (3, 16, 16)
    assert np.array_equal(decode_latent(z, IdentityCodec()), img)


def test_codec_failure_wrapped():
    class Down:
        def encode(self, image):
            raise ConnectionError("no route")

    with pytest.raises(BackendError):
        encode_image(np.zeros((2, 2, 3), np.uint8), Down())


def test_pixels_outside_cover_region_bit_identical():
    rng = np.random.default_rng(10)
    img = rng.integers(0, 256, size=(24, 24, 3), dtype=np.uint8)
    codec = IdentityCodec()
    z0, f = encode_image(img, codec)
    bbox = (5.5, 3.2, 7.1, 9.0)
    mask = bbox_to_latent_mask(bbox, (24, 24), z0.shape[-2:])
    out = decode_latent(edit_latent(z0, "A picture of [x]", mask, PromptStubDenoiser(0.1, 0.8), ddim.make_schedule(10)), codec)
    cover = cover_region(bbox, (24, 24), f)
    assert np.array_equal(out[~cover], img[~cover])
    assert not np.array_equal(out[cover], img[cover])
