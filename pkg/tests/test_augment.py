import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densefixmatch import augment as aug
from densefixmatch.autodiff import IGNORE


def rng(seed=0):
    return np.random.default_rng(seed)


def random_affine(r: np.random.Generator, size=16) -> aug.GeomTransform:
    g = aug.rotation(r.uniform(-30, 30), size)
    g = aug.compose(aug.shear(r.uniform(-0.3, 0.3), size), g)
    return aug.compose(aug.translation(r.uniform(-3, 3), r.uniform(-3, 3), size), g)


def blocky_labels(r: np.random.Generator, size=16, block=4, k=4) -> np.ndarray:
    coarse = r.integers(0, k, size=(size // block, size // block))
    return np.kron(coarse, np.ones((block, block), dtype=np.int64)).astype(np.uint8)


class TestSampleWeak:
    def test_no_flip_full_crop_is_identity(self):
        rec = aug.sample_weak(rng(), 16, 16, flip_prob=0.0)
        assert rec.geometric.allclose(aug.identity(16))
        assert rec.photometric == () and rec.cutout == ()

    def test_forced_flip_is_involution_on_labels(self):
        rec = aug.sample_weak(rng(), 12, 12, flip_prob=1.0)
        assert rec.geometric.allclose(aug.hflip(12))
        y = rng(1).integers(0, 5, size=(12, 12)).astype(np.uint8)
        once = aug.apply_geom_to_labels(rec.geometric, y)
        np.testing.assert_array_equal(once, y[:, ::-1])
        np.testing.assert_array_equal(aug.apply_geom_to_labels(rec.geometric, once), y)

    def test_same_seed_same_record(self):
        a = aug.sample_weak(rng(5), 48, 32)
        b = aug.sample_weak(rng(5), 48, 32)
        assert a.dumps() == b.dumps()

    def test_crop_inside_input(self):
        r = rng(2)
        for _ in range(200):
            top, left, h, w = aug.sample_weak(r, (20, 30), (8, 10)).crop_window
            assert 0 <= top <= 12 and 0 <= left <= 20 and (h, w) == (8, 10)

    def test_crop_larger_than_input(self):
        with pytest.raises(ValueError):
            aug.sample_weak(rng(), 16, 17)


class TestSampleStrong:
    def test_color_only_same_crop_keeps_weak_geometry(self):
        r = rng(3)
        weak = aug.sample_weak(r, 48, 32)
        strong = aug.sample_strong(r, 48, 32, weak, pool=aug.COLOR_OPS, crop_relation="same")
        assert strong.geometric.allclose(weak.geometric, atol=0.0)
        assert len(strong.photometric) == 2

    def test_same_crop_relation_shares_window(self):
        r = rng(4)
        for _ in range(50):
            weak = aug.sample_weak(r, 48, 32)
            strong = aug.sample_strong(r, 48, 32, weak, crop_relation="same")
            assert strong.crop_window == weak.crop_window

    def test_min_overlap_holds_by_direct_area(self):
        r = rng(5)
        for _ in range(1000):
            weak = aug.sample_weak(r, 48, 32)
            strong = aug.sample_strong(r, 48, 32, weak, crop_relation="min-overlap", min_overlap=0.25)
            a = np.zeros((48, 48), bool)
            b = np.zeros((48, 48), bool)
            t, l, h, w = weak.crop_window
            a[t:t + h, l:l + w] = True
            t, l, h, w = strong.crop_window
            b[t:t + h, l:l + w] = True
            assert np.count_nonzero(a & b) / np.count_nonzero(b) >= 0.25

    def test_min_overlap_infeasible(self):
        weak = aug.sample_weak(rng(), 100, 10)
        with pytest.raises(ValueError, match="overlap"):
            aug.sample_strong(rng(), 100, 10, weak, crop_relation="min-overlap", min_overlap=1.01)

    def test_empty_pool(self):
        weak = aug.sample_weak(rng(), 16, 16)
        with pytest.raises(ValueError):
            aug.sample_strong(rng(), 16, 16, weak, pool=())

    def test_cutout_boxes_in_bounds_and_sized(self):
        r = rng(6)
        for _ in range(300):
            weak = aug.sample_weak(r, 48, 32)
            rec = aug.sample_strong(r, 48, 32, weak)
            (b,) = rec.cutout
            assert 8 <= b.height <= 16 and 8 <= b.width <= 16
            assert b.top >= 0 and b.left >= 0 and b.top + b.height <= 32 and b.left + b.width <= 32

    def test_no_cutout(self):
        weak = aug.sample_weak(rng(), 16, 16)
        assert aug.sample_strong(rng(), 16, 16, weak, cutout=None).cutout == ()

    def test_geometric_pool_folds_into_matrix(self):
        r = rng(7)
        weak = aug.sample_weak(r, 16, 16, flip_prob=0.0)
        strong = aug.sample_strong(r, 16, 16, weak, pool=("rotate",), n_ops=1, crop_relation="same",
                                   magnitude_range=(1.0, 1.0))
        lin = strong.geometric.matrix[:2, :2]
        angle = math.degrees(math.atan2(lin[1, 0], lin[0, 0]))
        assert abs(abs(angle) - 30.0) < 1e-9
        assert strong.photometric == ()

    def test_deterministic(self):
        w1, w2 = aug.sample_weak(rng(9), 48, 32), aug.sample_weak(rng(9), 48, 32)
        s1 = aug.sample_strong(rng(10), 48, 32, w1)
        s2 = aug.sample_strong(rng(10), 48, 32, w2)
        assert s1.dumps() == s2.dumps()

    @pytest.mark.parametrize("subset,geom,color,cutout", [
        ("crop+color", False, True, False),
        ("crop+geom", True, False, False),
        ("crop+color+geom+cutout", True, True, True),
    ])
    def test_subsets(self, subset, geom, color, cutout):
        pool, use_cutout = aug.parse_subset(subset)
        assert (set(aug.GEOMETRIC_OPS) <= set(pool)) == geom
        assert (set(aug.COLOR_OPS) <= set(pool)) == color
        assert use_cutout == cutout


class TestApplyToImage:
    def test_identity_record(self):
        img = rng().random((3, 10, 12))
        np.testing.assert_array_equal(aug.apply_to_image(aug.identity_record((10, 12)), img), img)

    def test_flip_twice_exact(self):
        img = rng().random((3, 9, 14))
        rec = aug.AugRecord(aug.hflip((9, 14)))
        np.testing.assert_array_equal(aug.apply_to_image(rec, aug.apply_to_image(rec, img)), img)

    def test_brightness_clamps(self):
        img = np.full((3, 4, 4), 0.8)
        rec = aug.AugRecord(aug.identity(4), (aug.PhotometricOp("brightness", 1.0, 1),))
        np.testing.assert_array_equal(aug.apply_to_image(rec, img), 1.0)

    def test_cutout_fill(self):
        img = np.zeros((3, 8, 8))
        rec = aug.AugRecord(aug.identity(8), (), (aug.CutoutBox(2, 3, 4, 2),))
        out = aug.apply_to_image(rec, img)
        assert np.all(out[:, 2:6, 3:5] == 0.5)
        assert np.count_nonzero(out) == 3 * 8

    def test_out_of_bounds_reads_zero(self):
        img = np.ones((3, 6, 6))
        out = aug.apply_to_image(aug.AugRecord(aug.translation(0, 3, 6)), img)
        assert np.all(out[:, :, :3] == 0) and np.all(out[:, :, 3:] == 1)

    def test_crop_extracts_window(self):
        img = rng().random((3, 10, 10))
        out = aug.warp_image(aug.crop(2, 3, 4, 5, 10), img)
        np.testing.assert_array_equal(out, img[:, 2:6, 3:8])

    @pytest.mark.parametrize("kind", aug.PHOTOMETRIC_KINDS)
    def test_photometric_stays_in_unit_range(self, kind):
        img = rng(1).random((3, 8, 8))
        out = aug.PhotometricOp(kind, 1.0, -1, seed=3).apply(img)
        assert out.min() >= 0 and out.max() <= 1


class TestLabels:
    def test_identity(self):
        y = rng().integers(0, 4, size=(7, 9)).astype(np.uint8)
        np.testing.assert_array_equal(aug.apply_geom_to_labels(aug.identity((7, 9)), y), y)

    def test_crop_then_inverse(self):
        y = rng().integers(0, 4, size=(16, 16)).astype(np.uint8)
        g = aug.crop(0, 0, 8, 8, 16)
        back = aug.apply_geom_to_labels(aug.invert(g), aug.apply_geom_to_labels(g, y))
        np.testing.assert_array_equal(back[:8, :8], y[:8, :8])
        assert np.all(back[8:, :] == IGNORE) and np.all(back[:, 8:] == IGNORE)

    def test_rotation_corners_ignore(self):
        g = aug.rotation(45.0, 16)
        y = np.zeros((16, 16), dtype=np.uint8)
        out = aug.apply_geom_to_labels(g, y)
        # oracle: map each corner about the centre (7.5, 7.5) by hand
        c = 7.5
        for (r, col) in [(0, 0), (0, 15), (15, 0), (15, 15)]:
            x, yy = col - c, r - c
            sx = math.cos(math.pi / 4) * x - math.sin(math.pi / 4) * yy + c
            sy = math.sin(math.pi / 4) * x + math.cos(math.pi / 4) * yy + c
            assert not (-0.5 <= sx < 15.5 and -0.5 <= sy < 15.5)
            assert out[r, col] == IGNORE
        assert out[8, 8] == 0

    def test_ignore_source_propagates(self):
        y = np.zeros((4, 4), dtype=np.uint8)
        y[1, 2] = IGNORE
        out = aug.apply_geom_to_labels(aug.hflip(4), y)
        assert out[1, 1] == IGNORE and np.count_nonzero(out == IGNORE) == 1

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            aug.apply_geom_to_labels(aug.identity(4), np.zeros((5, 4), np.uint8))


class TestAlgebra:
    def test_invert_identity(self):
        assert aug.invert(aug.identity(5)).allclose(aug.identity(5))

    def test_invert_involution(self):
        r = rng(11)
        for _ in range(50):
            g = aug.compose(random_affine(r), aug.crop(2, 3, 16, 16, 24))
            assert aug.invert(aug.invert(g)).allclose(g, atol=1e-9)

    def test_invert_swaps_sizes(self):
        g = aug.crop(1, 2, 5, 6, (10, 12))
        inv = aug.invert(g)
        assert inv.out_size == (10, 12) and inv.in_size == (5, 6)

    def test_singular(self):
        with pytest.raises(ValueError):
            aug.GeomTransform(np.diag([1.0, 0.0, 1.0]), 4, 4)

    def test_compose_with_identity(self):
        g = random_affine(rng(1))
        assert aug.compose(g, aug.identity(16)).allclose(g)
        assert aug.compose(aug.identity(16), g).allclose(g)

    def test_translations_add(self):
        t = aug.compose(aug.translation(3, 0, 10), aug.translation(2, 0, 10))
        assert t.allclose(aug.translation(5, 0, 10))
        y = np.zeros((10, 10), np.uint8)
        y[0, 4] = 1
        out = aug.apply_geom_to_labels(t, y)
        assert out[5, 4] == 1

    def test_compose_round_trip_random_affine(self):
        r = rng(12)
        for _ in range(100):
            g = random_affine(r)
            y = r.integers(0, 6, size=(16, 16)).astype(np.uint8)
            out = aug.apply_geom_to_labels(aug.compose(g, aug.invert(g)), y)
            ok = out != IGNORE
            np.testing.assert_array_equal(out[ok], y[ok])
            assert ok.all()

    def test_compose_matches_sequential_on_interior(self):
        """One composed warp vs two nearest-neighbour warps.

        Compared only where the direct source pixel sits inside a constant
        3x3 patch of the label map, so the rounding of the intermediate warp
        cannot change the value read.
        """
        r = rng(13)
        compared = 0
        for _ in range(100):
            g1, g2 = random_affine(r), random_affine(r)
            y = blocky_labels(r)
            seq = aug.apply_geom_to_labels(g2, aug.apply_geom_to_labels(g1, y))
            one = aug.apply_geom_to_labels(aug.compose(g2, g1), y)
            sy, sx = aug.source_coords(aug.compose(g2, g1))
            rr, cc = np.floor(sy + 0.5).astype(int), np.floor(sx + 0.5).astype(int)
            pad = np.pad(y.astype(int), 1, constant_values=-1)
            interior = np.zeros_like(one, dtype=bool)
            for i in range(16):
                for j in range(16):
                    a, b = rr[i, j], cc[i, j]
                    if 1 <= a < 15 and 1 <= b < 15:
                        patch = pad[a:a + 3, b:b + 3]
                        interior[i, j] = np.all(patch == patch[1, 1])
            both = interior & (seq != IGNORE)
            np.testing.assert_array_equal(seq[both], one[both])
            compared += both.sum()
        assert compared > 1000


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_round_trip_property(seed):
    r = np.random.default_rng(seed)
    weak = aug.sample_weak(r, 24, 16)
    strong = aug.sample_strong(r, 24, 16, weak)
    g = strong.geometric
    y = r.integers(0, 4, size=g.out_size).astype(np.uint8)
    out = aug.apply_geom_to_labels(aug.compose(g, aug.invert(g)), y)
    ok = out != IGNORE
    np.testing.assert_array_equal(out[ok], y[ok])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_label_warp_never_invents_values(seed):
    r = np.random.default_rng(seed)
    weak = aug.sample_weak(r, 24, 16)
    strong = aug.sample_strong(r, 24, 16, weak, crop_relation="any")
    y = r.choice(np.array([0, 3, 7], dtype=np.uint8), size=(24, 24))
    out = aug.apply_geom_to_labels(strong.geometric, y)
    assert set(np.unique(out)) <= {0, 3, 7, IGNORE}


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_photometric_ops_leave_labels_alone(seed):
    r = np.random.default_rng(seed)
    weak = aug.sample_weak(r, 24, 16)
    strong = aug.sample_strong(r, 24, 16, weak, pool=aug.COLOR_OPS + aug.GEOMETRIC_OPS)
    stripped = aug.AugRecord(strong.geometric)
    y = r.integers(0, 4, size=(24, 24)).astype(np.uint8)
    np.testing.assert_array_equal(
        aug.apply_geom_to_labels(strong.geometric, y), aug.apply_geom_to_labels(stripped.geometric, y)
    )


def test_record_serialisation_round_trip():
    r = rng(21)
    weak = aug.sample_weak(r, 48, 32)
    rec = aug.sample_strong(r, 48, 32, weak)
    back = aug.AugRecord.from_dict(json.loads(rec.dumps()))
    assert back.dumps() == rec.dumps()
    img = r.random((3, 48, 48))
    np.testing.assert_array_equal(aug.apply_to_image(back, img), aug.apply_to_image(rec, img))
