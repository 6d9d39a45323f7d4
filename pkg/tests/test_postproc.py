import numpy as np
import pytest

from mitoseg.postproc import LabelVolume, PostConfig, connected_components_3d, extract_instances, grow_instances, seed_mask

from oracles import flood_fill_components, same_partition


class TestPostConfig:
    def test_threshold_bounds(self):
        with pytest.raises(ValueError):
            PostConfig(semantic_threshold=1.0)
        with pytest.raises(ValueError):
            PostConfig(boundary_threshold=0.0)

    def test_connectivity_enum(self):
        with pytest.raises(ValueError):
            PostConfig(connectivity=18)


class TestLabelVolume:
    def test_contiguity_enforced(self):
        arr = np.zeros((2, 2, 2), dtype=np.int32)
        arr[0, 0, 0] = 2
        with pytest.raises(ValueError, match="contiguous"):
            LabelVolume.from_array(arr)

    def test_sizes(self):
        arr = np.zeros((1, 2, 3), dtype=np.int32)
        arr[0, 0] = [1, 1, 2]
        vol = LabelVolume.from_array(arr)
        assert vol.sizes().tolist() == [2, 1]


class TestSeedMask:
    def test_all_confident_foreground(self):
        cfg = PostConfig()
        out = seed_mask(np.ones((2, 3, 3)), np.zeros((2, 3, 3)), cfg)
        assert out.all()

    def test_boundary_high_blocks_all(self):
        cfg = PostConfig()
        out = seed_mask(np.ones((2, 3, 3)), np.ones((2, 3, 3)), cfg)
        assert not out.any()

    def test_disk_with_rim(self):
        cfg = PostConfig()
        sem = np.zeros((1, 7, 7))
        bnd = np.zeros((1, 7, 7))
        sem[0, 1:6, 1:6] = 0.95  # 5x5 disk
        bnd[0, 1:6, 1:6] = 0.9
        bnd[0, 2:5, 2:5] = 0.1  # interior left quiet
        out = seed_mask(sem, bnd, cfg)
        want = np.zeros((1, 7, 7), dtype=bool)
        want[0, 2:5, 2:5] = True
        assert np.array_equal(out, want)


class TestConnectedComponents:
    def test_empty_mask(self):
        vol = connected_components_3d(np.zeros((3, 3, 3), dtype=bool))
        assert vol.instance_count == 0 and not vol.labels.any()

    def test_corner_touching_voxels(self):
        mask = np.zeros((2, 2, 2), dtype=bool)
        mask[0, 0, 0] = True
        mask[1, 1, 1] = True
        assert connected_components_3d(mask, 26).instance_count == 1
        assert connected_components_3d(mask, 6).instance_count == 2

    def test_scan_order_labeling(self):
        mask = np.zeros((1, 3, 5), dtype=bool)
        mask[0, 0, 4] = True  # first in scan order
        mask[0, 2, 0] = True
        vol = connected_components_3d(mask, 26)
        assert vol.labels[0, 0, 4] == 1
        assert vol.labels[0, 2, 0] == 2

    @pytest.mark.parametrize("connectivity", [6, 26])
    def test_matches_flood_fill_oracle(self, connectivity):
        rng = np.random.default_rng(connectivity)
        for _ in range(200):
            mask = rng.random((16, 16, 16)) < rng.uniform(0.05, 0.6)
            got = connected_components_3d(mask, connectivity)
            want, n = flood_fill_components(mask, connectivity)
            assert got.instance_count == n
            assert same_partition(got.labels, want, mask)

    def test_label_contiguity_invariant(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            mask = rng.random((8, 8, 8)) < 0.3
            vol = connected_components_3d(mask, 26)
            present = np.unique(vol.labels)
            assert present.max(initial=0) == vol.instance_count
            assert len(present[present > 0]) == vol.instance_count


class TestGrowInstances:
    def cfg(self, **kw):
        base = dict(min_instance_size=0)
        base.update(kw)
        return PostConfig(**base)

    def test_no_unlabeled_foreground_is_fixpoint(self):
        rng = np.random.default_rng(4)
        mask = rng.random((6, 6, 6)) < 0.3
        seeds = connected_components_3d(mask, 26)
        sem = mask.astype(float)  # foreground exactly the seeds
        out = grow_instances(seeds, sem, self.cfg())
        assert np.array_equal(out.labels, seeds.labels)

    def test_ring_takes_seed_label(self):
        sem = np.zeros((1, 7, 7))
        sem[0, 1:6, 1:6] = 1.0
        seeds_arr = np.zeros((1, 7, 7), dtype=np.int32)
        seeds_arr[0, 3, 3] = 1
        out = grow_instances(LabelVolume.from_array(seeds_arr), sem, self.cfg())
        assert (out.labels[sem > 0.8] == 1).all()
        assert out.labels[0, 0, 0] == 0

    def test_equidistant_tie_goes_to_smaller_label(self):
        sem = np.zeros((1, 1, 7))
        sem[0, 0, :] = 1.0
        seeds_arr = np.zeros((1, 1, 7), dtype=np.int32)
        seeds_arr[0, 0, 0] = 1
        seeds_arr[0, 0, 6] = 2
        out = grow_instances(LabelVolume.from_array(seeds_arr), sem, self.cfg(connectivity=6))
        assert out.labels[0, 0].tolist() == [1, 1, 1, 1, 2, 2, 2]  # voxel 3 equidistant, smaller id wins

    def test_never_relabels_and_never_claims_background(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            sem = rng.random((5, 8, 8))
            seeds = connected_components_3d(sem > 0.9, 26)
            out = grow_instances(seeds, sem, self.cfg())
            moved = (seeds.labels > 0) & (out.labels != seeds.labels)
            assert not moved.any()
            assert not (out.labels[sem <= 0.8] > 0).any()

    def test_min_size_filter_and_recompaction(self):
        sem = np.zeros((1, 5, 9))
        sem[0, 1:4, 1:4] = 1.0  # 9-voxel blob
        sem[0, 2, 7] = 1.0  # single-voxel speck
        seeds = connected_components_3d(sem > 0.8, 26)
        assert seeds.instance_count == 2
        out = grow_instances(seeds, sem, self.cfg(min_instance_size=4))
        assert out.instance_count == 1
        assert (out.labels[0, 1:4, 1:4] == 1).all()
        assert out.labels[0, 2, 7] == 0

    def test_islands_without_seed_stay_background(self):
        sem = np.zeros((1, 5, 5))
        sem[0, 0, :2] = 1.0
        sem[0, 4, 3:] = 1.0
        seeds_arr = np.zeros((1, 5, 5), dtype=np.int32)
        seeds_arr[0, 0, 0] = 1
        out = grow_instances(LabelVolume.from_array(seeds_arr), sem, self.cfg())
        assert out.labels[0, 0, :2].tolist() == [1, 1]
        assert not out.labels[0, 4].any()


class TestPipeline:
    def test_extract_instances_end_to_end(self):
        sem = np.zeros((2, 9, 9))
        bnd = np.zeros((2, 9, 9))
        sem[:, 1:4, 1:4] = 0.99
        sem[:, 6:8, 6:8] = 0.99
        bnd[:, 1, :] = 0.9  # boundary strip shaves the first blob's seeds
        out = extract_instances(sem, bnd, PostConfig(min_instance_size=0))
        assert out.instance_count == 2
        assert (out.labels[:, 1:4, 1:4] == out.labels[0, 2, 2]).all()
