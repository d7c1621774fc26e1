import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from totevision.data.datasets import (
    DatasetConfig,
    build_datasets,
    defect_split,
    derive_seed,
    file_hashes,
    ident_catalog,
    identification_split,
    load_defect,
    load_identification,
    load_manifest,
    load_segmentation,
    segmentation_split,
    split_counts,
)
from totevision.data.defects import (
    DEFECT_LABELS,
    count_components,
    inject_defect,
    make_pick_sample,
)
from totevision.data.picks import QueryBundle, generate_pick_triplet, reference_view
from totevision.data.render import make_catalog, rasterize
from totevision.data.rle import rle_area, rle_decode, rle_encode
from totevision.data.scenes import SceneSpec, generate_scene, regime_spec
from totevision.errors import ConfigError, DataError, UnplaceableSceneError

CATALOG = {o.id: o for o in make_catalog(40, seed=7)}


def _scene(count=4, seed=0, **kw):
    return generate_scene(SceneSpec(tuple(range(count)), count, seed, **kw), CATALOG)


class TestScenes:
    def test_single_object_mask_is_the_rasterized_shape(self):
        s = _scene(count=1, seed=3)
        expect = rasterize(CATALOG[0], s.poses[0], 64, 64)
        assert s.masks.shape == (1, 64, 64)
        assert np.array_equal(s.masks[0], expect)

    def test_same_spec_is_bitwise_identical(self):
        a, b = _scene(seed=11), _scene(seed=11)
        assert np.array_equal(a.image, b.image) and np.array_equal(a.masks, b.masks)
        assert np.array_equal(a.boxes, b.boxes) and a.identity_ids == b.identity_ids

    def test_different_seeds_differ(self):
        assert not np.array_equal(_scene(seed=1).image, _scene(seed=2).image)

    @pytest.mark.parametrize("seed", range(4))
    def test_visible_masks_are_shape_minus_later_occluders(self, seed):
        s = _scene(count=6, seed=seed)
        full = [rasterize(CATALOG[i], p, 64, 64) for i, p in zip(s.identity_ids, s.poses)]
        for k, m in enumerate(s.masks):
            later = np.zeros_like(m)
            for f in full[k + 1 :]:
                later |= f
            assert np.array_equal(m, full[k] & ~later)

    @pytest.mark.parametrize("seed", range(6))
    def test_occlusion_bound_and_nonzero_area(self, seed):
        s = _scene(count=8, seed=seed, occlusion_max=0.3)
        for i, p, m in zip(s.identity_ids, s.poses, s.masks):
            full = rasterize(CATALOG[i], p, 64, 64)
            assert m.sum() > 0
            assert m.sum() >= 0.7 * full.sum() - 1e-9
        # visible masks never overlap
        assert s.masks.sum(0).max() <= 1

    def test_boxes_are_tight(self):
        s = _scene(count=5, seed=2)
        for m, (x1, y1, x2, y2) in zip(s.masks, s.boxes):
            ys, xs = np.nonzero(m)
            assert (x1, y1, x2, y2) == (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)

    def test_thirty_small_objects_is_consistent(self):
        def attempt():
            try:
                s = _scene(count=30, seed=5, min_size=6.0, scale=0.3)
                return ("placed", s.masks.sum())
            except UnplaceableSceneError as e:
                return ("unplaceable", str(e))

        first = attempt()
        assert first[0] in ("placed", "unplaceable")
        assert attempt() == first

    def test_invalid_specs(self):
        with pytest.raises(DataError):
            SceneSpec((0,), 0, 0)
        with pytest.raises(DataError):
            SceneSpec((0,), 1, 0, occlusion_max=0.6)
        with pytest.raises(DataError):
            SceneSpec((), 1, 0)
        with pytest.raises(DataError):
            generate_scene(SceneSpec((999,), 1, 0), CATALOG)

    def test_regimes(self):
        pool = sorted(CATALOG)
        same = regime_spec("same_object", 4, pool)
        assert len(same.identity_ids) == 1 and same.count >= 2
        assert regime_spec("zoomed_out", 4, pool).scale < regime_spec("mixed", 4, pool).scale
        with pytest.raises(DataError):
            regime_spec("crowded", 0, pool)

    def test_object_size_scales_with_canvas(self):
        lo, hi = CATALOG[0].size_range
        for size in (64, 128):
            sizes = [_scene(count=1, seed=s, image_size=size).poses[0].size * 64 / size for s in range(10)]
            assert lo <= min(sizes) and max(sizes) <= hi


class TestPickTriplets:
    def test_zero_jitter_views_match_reference_up_to_placement(self):
        ident = make_catalog(3, seed=1)[2]
        trip = generate_pick_triplet(ident, seed=4, jitter=0.0)
        ref_mask = trip.object_masks[0]
        for view, m in zip(trip.query.images, trip.object_masks[1:]):
            ys, xs = np.nonzero(m)
            rys, rxs = np.nonzero(ref_mask)
            dy, dx = ys.min() - rys.min(), xs.min() - rxs.min()
            assert abs(dy) <= 4 and abs(dx) <= 4
            assert np.array_equal(np.roll(ref_mask, (dy, dx), axis=(0, 1)), m)
            shifted = np.roll(trip.reference, (dy, dx), axis=(0, 1))
            assert np.array_equal(view[m], shifted[m])

    def test_fixed_seed_is_reproducible(self):
        ident = make_catalog(1, seed=2)[0]
        a, b = generate_pick_triplet(ident, 8), generate_pick_triplet(ident, 8)
        assert np.array_equal(a.query.images, b.query.images) and np.array_equal(a.reference, b.reference)

    def test_reference_is_canonical(self):
        ident = make_catalog(1, seed=2)[0]
        ref, _ = reference_view(ident)
        assert np.array_equal(generate_pick_triplet(ident, 1).reference, ref)
        assert np.array_equal(generate_pick_triplet(ident, 2).reference, ref)

    def test_sixty_four_identities_have_consistent_labels(self):
        idents = make_catalog(64, seed=3)
        trips = [generate_pick_triplet(o, seed=o.id, clutter_pool=idents) for o in idents]
        views = []
        for o, t in zip(idents, trips):
            assert t.query.identity_id == o.id
            assert t.query.images.shape == (3, 64, 64, 3)
            views += [(o.id, t.reference.tobytes())] + [(o.id, v.tobytes()) for v in t.query.images]
        assert len(views) == 256
        for (ia, va), (ib, vb) in itertools.combinations(views, 2):
            if ia != ib:
                assert va != vb

    def test_bundle_shape_checked(self):
        with pytest.raises(ValueError):
            QueryBundle(np.zeros((2, 8, 8, 3), np.uint8), "p", 0)
        single = QueryBundle(np.zeros((3, 8, 8, 3), np.uint8), "p", 0).single()
        assert single.images.shape[0] == 1


class TestDefects:
    CAT = make_catalog(12, seed=5)

    def test_nominal_passthrough(self):
        s = make_pick_sample(self.CAT[0], 3)
        assert inject_defect(s, "nominal", self.CAT, 3) is s

    @pytest.mark.parametrize("seed", range(5))
    def test_multi_pick_has_two_identities(self, seed):
        s = inject_defect(make_pick_sample(self.CAT[seed], seed), "multi_pick", self.CAT, seed)
        assert s.label == "multi_pick"
        assert len(set(s.identity_ids)) >= 2 and len(s.masks) >= 2
        assert count_components(s.masks.any(0)) >= 2

    @pytest.mark.parametrize("seed", range(5))
    def test_package_defect_fragments(self, seed):
        s = inject_defect(make_pick_sample(self.CAT[seed], seed), "package_defect", self.CAT, seed)
        assert s.label == "package_defect" and len(set(s.identity_ids)) == 1
        assert count_components(s.masks[0]) >= 2

    def test_unknown_label(self):
        with pytest.raises(ValueError):
            inject_defect(make_pick_sample(self.CAT[0], 0), "dented", self.CAT)

    def test_defect_split_is_balanced(self):
        samples = defect_split(DatasetConfig(), "val", per_class=4)
        labels = [s.label for s in samples]
        assert all(labels.count(lab) == 4 for lab in DEFECT_LABELS)


class TestRle:
    @settings(max_examples=80, deadline=None)
    @given(arrays(np.bool_, st.tuples(st.integers(1, 12), st.integers(1, 12))))
    def test_round_trip(self, mask):
        rle = rle_encode(mask)
        assert np.array_equal(rle_decode(rle), mask)
        assert rle_area(rle) == mask.sum()
        assert sum(rle["counts"]) == mask.size

    def test_column_major_starts_with_zeros(self):
        m = np.array([[1, 0], [1, 1]], bool)
        assert rle_encode(m) == {"size": [2, 2], "counts": [0, 2, 1, 1]}

    def test_bad_counts(self):
        with pytest.raises(ValueError):
            rle_decode({"size": [2, 2], "counts": [1, 1]})


class TestDatasets:
    SMALL = DatasetConfig(
        seg_scenes=20,
        seen_identities=8,
        unseen_identities=4,
        picks_per_identity={"train": 2, "val": 1, "test": 1},
        container_size=4,
        defect_per_class={"train": 2, "val": 1, "test": 1},
        defect_catalog_size=8,
        seg_catalog_size=20,
    )

    def test_split_counts(self):
        assert split_counts(1000, (0.8, 0.1, 0.1)) == {"train": 800, "val": 100, "test": 100}
        with pytest.raises(ConfigError):
            DatasetConfig(split_ratios=(0.5, 0.2, 0.2))

    def test_derived_seeds_are_disjoint_across_splits(self):
        seeds = {derive_seed(0, "segmentation", sp, i) for sp in ("train", "val", "test") for i in range(300)}
        assert len(seeds) == 900

    def test_unseen_identities_disjoint_from_train(self):
        cfg = DatasetConfig()
        seen, unseen = ident_catalog(cfg)
        train_ids = {s.query.identity_id for s in identification_split(self.SMALL, "train")}
        unseen_ids = {s.query.identity_id for s in identification_split(self.SMALL, "test_unseen")}
        assert not train_ids & unseen_ids
        assert not {o.id for o in seen} & {o.id for o in unseen}
        assert len(seen) == 64 and len(unseen) == 32

    def test_config_round_trip(self):
        cfg = DatasetConfig(seed=3, image_size=128)
        assert DatasetConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            DatasetConfig.from_dict({"colour": 1})

    def test_build_is_idempotent_and_reproducible(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert build_datasets(self.SMALL, a) is True
        first = file_hashes(a)
        assert build_datasets(self.SMALL, a) is False
        assert file_hashes(a) == first
        build_datasets(self.SMALL, b)
        assert file_hashes(b) == first
        n_seg = sum(1 for k in first if k.startswith("train/segmentation/") and k.endswith(".png"))
        assert n_seg == 16

    def test_round_trip_through_disk(self, tmp_path):
        build_datasets(self.SMALL, tmp_path)
        seg = load_segmentation(tmp_path, "val")
        mem = segmentation_split(self.SMALL, "val")
        assert len(seg) == len(mem) == 2
        for x, y in zip(seg, mem):
            assert np.array_equal(x.image, y.image) and np.array_equal(x.masks, y.masks)
            assert np.array_equal(x.boxes, y.boxes) and x.identity_ids == y.identity_ids
        ident = load_identification(tmp_path, "test_unseen")
        mem_i = identification_split(self.SMALL, "test_unseen")
        assert [s.query.pick_id for s in ident] == sorted(s.query.pick_id for s in mem_i)
        by_id = {s.query.pick_id: s for s in mem_i}
        for s in ident:
            assert np.array_equal(s.query.images, by_id[s.query.pick_id].query.images)
            assert s.container == by_id[s.query.pick_id].container
        assert [s.label for s in load_defect(tmp_path, "test")] == list(DEFECT_LABELS)
        manifest = load_manifest(tmp_path)
        members = manifest["identification"]["containers"]["test_unseen"]
        assert sorted(i for m in members.values() for i in m) == [o["id"] for o in manifest["identification"]["unseen"]]

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataError):
            load_segmentation(tmp_path, "train")
        with pytest.raises(DataError):
            load_manifest(tmp_path)
