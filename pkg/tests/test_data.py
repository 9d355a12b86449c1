import numpy as np
import pytest

from netrecon.data import (CohortSplit, LoadError, NetworkAtlas, ParcelTimeSeries,
                           SegmentSpec, align_to_networks, empty_mask_plan,
                           invert_alignment, load_atlas, load_recording,
                           make_mask_plan, make_random_mask_plan, read_manifest,
                           sample_segments, split_subjects, tokenize, untokenize,
                           write_atlas, write_recording)


def write_csv(path, values, subject="s1", session=0, label="CN", age="63.5"):
    with open(path, "w") as fh:
        fh.write(f"# subject={subject} session={session} label={label} age={age}\n")
        for row in values:
            fh.write(",".join(str(v) for v in row) + "\n")


class TestRecordingIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        values = rng.normal(size=(64, 16))
        rec = ParcelTimeSeries("sub7", 2, "MCI", 71.5, values)
        write_recording(tmp_path / "r.csv", rec)
        back = load_recording(tmp_path / "r.csv")
        assert back.subject_id == "sub7"
        assert back.session_index == 2
        assert back.label == "MCI"
        assert back.age_years == 71.5
        np.testing.assert_array_equal(back.values, values)

    def test_t_total_recorded(self, tmp_path):
        write_csv(tmp_path / "r.csv", np.zeros((64, 8)))
        rec = load_recording(tmp_path / "r.csv")
        assert rec.values.shape == (64, 8)

    def test_nan_cell_names_coordinates(self, tmp_path):
        values = np.zeros((4, 3))
        values[2, 1] = np.nan
        write_csv(tmp_path / "r.csv", values)
        with pytest.raises(LoadError, match="row 2, column 1"):
            load_recording(tmp_path / "r.csv")

    def test_wrong_parcel_count(self, tmp_path):
        write_csv(tmp_path / "r.csv", np.zeros((4, 1000)))
        with pytest.raises(LoadError, match="1000.*1024"):
            load_recording(tmp_path / "r.csv", expected_parcels=1024)

    def test_missing_header(self, tmp_path):
        (tmp_path / "r.csv").write_text("1.0,2.0\n3.0,4.0\n")
        with pytest.raises(LoadError, match="header"):
            load_recording(tmp_path / "r.csv")

    def test_ragged_rows_rejected(self, tmp_path):
        (tmp_path / "r.csv").write_text(
            "# subject=a session=0 label=CN age=NA\n1.0,2.0\n3.0\n")
        with pytest.raises(LoadError, match="row 1"):
            load_recording(tmp_path / "r.csv")

    def test_age_na(self, tmp_path):
        write_csv(tmp_path / "r.csv", np.zeros((2, 2)), age="NA")
        assert load_recording(tmp_path / "r.csv").age_years is None


class TestAtlas:
    def test_1024_parcels_7_networks(self, tmp_path):
        # sizes are patch multiples, one 48-parcel network
        sizes = [48, 160, 144, 176, 128, 192, 176]
        membership = np.repeat(np.arange(7), sizes)
        write_atlas(tmp_path / "a.tsv", NetworkAtlas(membership))
        atlas = load_atlas(tmp_path / "a.tsv", spatial_patch=16)
        assert atlas.parcel_count == 1024
        assert sorted(atlas.permutation.tolist()) == list(range(1024))
        assert atlas.padded_count % 16 == 0
        assert atlas.padded_count == 1024

    def test_48_parcel_network_three_columns(self, tmp_path):
        sizes = [48, 160, 144, 176, 128, 192, 176]
        atlas = NetworkAtlas(np.repeat(np.arange(7), sizes), spatial_patch=16)
        assert atlas.pad_per_network[0] == 0
        assert atlas.columns_of_network(0).size == 3

    def test_17_parcel_network_padding(self):
        atlas = NetworkAtlas(np.repeat([0, 1], [17, 16]), spatial_patch=16)
        assert atlas.pad_per_network[0] == 15
        assert atlas.columns_of_network(0).size == 2

    def test_duplicate_parcel_rejected(self, tmp_path):
        (tmp_path / "a.tsv").write_text("0\t0\tnetA\n0\t1\tnetB\n")
        with pytest.raises(LoadError, match="duplicate"):
            load_atlas(tmp_path / "a.tsv")

    def test_gapped_parcel_ids_rejected(self, tmp_path):
        (tmp_path / "a.tsv").write_text("0\t0\tnetA\n2\t0\tnetA\n")
        with pytest.raises(LoadError, match="0..1"):
            load_atlas(tmp_path / "a.tsv")

    def test_noncontiguous_network_ids_rejected(self):
        with pytest.raises(LoadError, match="missing"):
            NetworkAtlas(np.array([0, 0, 2, 2]))

    def test_names_round_trip(self, tmp_path):
        atlas = NetworkAtlas(np.array([0, 0, 1, 1]), spatial_patch=2,
                             names={0: "visual", 1: "limbic"})
        write_atlas(tmp_path / "a.tsv", atlas)
        back = load_atlas(tmp_path / "a.tsv", spatial_patch=2)
        assert back.names == {0: "visual", 1: "limbic"}


class TestAlignment:
    def test_identity_layout_passthrough(self):
        atlas = NetworkAtlas(np.repeat([0, 1], [4, 4]), spatial_patch=4)
        x = np.arange(24.0).reshape(3, 8)
        np.testing.assert_array_equal(align_to_networks(x, atlas), x)

    def test_round_trip_exact(self):
        rng = np.random.default_rng(1)
        membership = rng.integers(0, 3, size=20)
        while len(np.unique(membership)) < 3:
            membership = rng.integers(0, 3, size=20)
        atlas = NetworkAtlas(membership, spatial_patch=4)
        for _ in range(100):
            x = rng.normal(size=(5, 20))
            aligned = align_to_networks(x, atlas)
            np.testing.assert_array_equal(invert_alignment(aligned, atlas), x)

    def test_pad_columns_zero(self):
        atlas = NetworkAtlas(np.repeat([0, 1], [3, 4]), spatial_patch=4)
        x = np.random.default_rng(2).normal(size=(6, 7))
        aligned = align_to_networks(x, atlas)
        assert aligned.shape == (6, 8)
        np.testing.assert_array_equal(aligned[:, atlas.pad_mask], 0.0)

    def test_dimension_mismatch(self):
        atlas = NetworkAtlas(np.array([0, 0, 1, 1]), spatial_patch=2)
        with pytest.raises(LoadError):
            align_to_networks(np.zeros((3, 5)), atlas)


class TestSegments:
    def test_forced_offset_when_exact_length(self, tiny_atlas, tiny_spec):
        rng = np.random.default_rng(0)
        aligned = rng.normal(size=(8, 16))
        spec = SegmentSpec(T=8, P_t=4, P_c=4, segments_per_recording=10)
        segs = sample_segments(aligned, spec, np.random.default_rng(0))
        assert len(segs) == 10
        for s in segs[1:]:
            np.testing.assert_array_equal(s, segs[0])

    def test_same_seed_same_offsets(self):
        aligned = np.random.default_rng(3).normal(size=(50, 8))
        spec = SegmentSpec(T=8, P_t=4, P_c=4, segments_per_recording=5)
        a = sample_segments(aligned, spec, np.random.default_rng(11))
        b = sample_segments(aligned, spec, np.random.default_rng(11))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_zscore_moments(self):
        aligned = np.random.default_rng(4).normal(3.0, 2.5, size=(40, 6))
        spec = SegmentSpec(T=8, P_t=4, P_c=2, segments_per_recording=3)
        for seg in sample_segments(aligned, spec, np.random.default_rng(0)):
            np.testing.assert_allclose(seg.mean(axis=0), 0.0, atol=1e-6)
            np.testing.assert_allclose(seg.std(axis=0), 1.0, atol=1e-6)

    def test_constant_column_zeroed(self):
        aligned = np.ones((20, 4))
        spec = SegmentSpec(T=8, P_t=4, P_c=2, segments_per_recording=2)
        for seg in sample_segments(aligned, spec, np.random.default_rng(0)):
            np.testing.assert_array_equal(seg, 0.0)

    def test_short_recording_skipped_with_warning(self, caplog):
        spec = SegmentSpec(T=64, P_t=16, P_c=2, segments_per_recording=2)
        with caplog.at_level("WARNING"):
            assert sample_segments(np.zeros((10, 4)), spec, np.random.default_rng(0)) == []
        assert "skipped" in caplog.text


class TestTokenize:
    def test_paper_scale_counts(self):
        sizes = [48, 160, 144, 176, 128, 192, 176]
        atlas = NetworkAtlas(np.repeat(np.arange(7), sizes), spatial_patch=16)
        spec = SegmentSpec(T=64, P_t=16, P_c=16)
        seg = np.random.default_rng(0).normal(size=(64, 1024))
        grid = tokenize(seg, spec, atlas)
        assert grid.token_count == 256
        assert grid.tokens.shape == (4, 64, 256)

    def test_round_trip(self, tiny_atlas, tiny_spec):
        seg = np.random.default_rng(1).normal(size=(8, 16))
        grid = tokenize(seg, tiny_spec, tiny_atlas)
        np.testing.assert_array_equal(untokenize(grid, tiny_spec), seg)

    def test_layout_anchor(self, tiny_atlas, tiny_spec):
        seg = np.random.default_rng(2).normal(size=(8, 16))
        grid = tokenize(seg, tiny_spec, tiny_atlas)
        assert grid.tokens[0, 0, 0] == seg[0, 0]

    def test_misaligned_rejected(self, tiny_atlas):
        spec = SegmentSpec(T=8, P_t=4, P_c=4)
        with pytest.raises(ValueError):
            tokenize(np.zeros((7, 16)), spec, tiny_atlas)
        with pytest.raises(ValueError):
            tokenize(np.zeros((8, 12)), spec, tiny_atlas)


class TestMaskPlans:
    def test_network_mask_counts(self):
        # 48-parcel network in a 4x64 grid: 3 columns x 4 rows
        sizes = [48, 160, 144, 176, 128, 192, 176]
        atlas = NetworkAtlas(np.repeat(np.arange(7), sizes), spatial_patch=16)
        spec = SegmentSpec(T=64, P_t=16, P_c=16)
        grid = tokenize(np.zeros((64, 1024)), spec, atlas)
        plan = make_mask_plan(atlas, grid, 0)
        assert plan.n_masked == 12
        assert plan.n_unmasked == 244

    def test_partition(self, tiny_atlas, tiny_spec):
        grid = tokenize(np.zeros((8, 16)), tiny_spec, tiny_atlas)
        for net in range(3):
            plan = make_mask_plan(tiny_atlas, grid, net)
            merged = np.sort(np.concatenate([plan.masked_indices,
                                             plan.unmasked_indices]))
            np.testing.assert_array_equal(merged, np.arange(grid.token_count))

    def test_single_column_network(self, tiny_atlas, tiny_spec):
        grid = tokenize(np.zeros((8, 16)), tiny_spec, tiny_atlas)
        plan = make_mask_plan(tiny_atlas, grid, 0)   # 4 parcels -> 1 column
        assert plan.n_masked == grid.rows

    def test_unknown_network(self, tiny_atlas, tiny_spec):
        grid = tokenize(np.zeros((8, 16)), tiny_spec, tiny_atlas)
        with pytest.raises(ValueError, match="unknown network"):
            make_mask_plan(tiny_atlas, grid, 9)

    def test_coverage_over_all_networks(self, tiny_atlas, tiny_spec):
        grid = tokenize(np.zeros((8, 16)), tiny_spec, tiny_atlas)
        masked_cols = set()
        for net in range(tiny_atlas.network_count):
            plan = make_mask_plan(tiny_atlas, grid, net)
            expected = tiny_atlas.columns_of_network(net).size * grid.rows
            assert plan.n_masked == expected
            masked_cols.update((plan.masked_indices % grid.cols).tolist())
        assert masked_cols == set(range(grid.cols))

    def test_random_plan_boundary(self, tiny_atlas, tiny_spec):
        grid = tokenize(np.zeros((8, 16)), tiny_spec, tiny_atlas)
        plan = make_random_mask_plan(grid, grid.token_count - 1,
                                     np.random.default_rng(0))
        assert plan.n_unmasked == 1

    def test_random_plan_deterministic_no_dups(self, tiny_atlas, tiny_spec):
        grid = tokenize(np.zeros((8, 16)), tiny_spec, tiny_atlas)
        a = make_random_mask_plan(grid, 3, np.random.default_rng(5))
        b = make_random_mask_plan(grid, 3, np.random.default_rng(5))
        np.testing.assert_array_equal(a.masked_indices, b.masked_indices)
        assert len(set(a.masked_indices.tolist())) == 3

    def test_random_plan_count_range(self, tiny_atlas, tiny_spec):
        grid = tokenize(np.zeros((8, 16)), tiny_spec, tiny_atlas)
        with pytest.raises(ValueError):
            make_random_mask_plan(grid, 0, np.random.default_rng(0))
        with pytest.raises(ValueError):
            make_random_mask_plan(grid, grid.token_count, np.random.default_rng(0))

    def test_empty_plan(self, tiny_atlas, tiny_spec):
        grid = tokenize(np.zeros((8, 16)), tiny_spec, tiny_atlas)
        plan = empty_mask_plan(grid)
        assert plan.n_masked == 0
        assert plan.n_unmasked == grid.token_count


def make_recordings(n_subjects, sessions=1):
    out = []
    for s in range(n_subjects):
        for k in range(sessions):
            out.append(ParcelTimeSeries(f"sub{s:03d}", k, "CN", None,
                                        np.zeros((4, 2))))
    return out


class TestSplits:
    def test_ten_subjects_8_1_1(self):
        split = split_subjects(make_recordings(10), seed=0)
        assert (len(split.train), len(split.val), len(split.test)) == (8, 1, 1)

    def test_sessions_follow_subject(self):
        recs = make_recordings(6, sessions=5)
        split = split_subjects(recs, seed=1)
        for rec in recs:
            homes = [rec.subject_id in group
                     for group in (split.train, split.val, split.test)]
            assert sum(homes) == 1

    def test_same_seed_same_split(self):
        recs = make_recordings(12)
        a = split_subjects(recs, seed=42)
        b = split_subjects(recs, seed=42)
        assert (a.train, a.val, a.test) == (b.train, b.val, b.test)

    def test_too_few_subjects(self):
        with pytest.raises(ValueError):
            split_subjects(make_recordings(2), seed=0)

    def test_hygiene_over_50_seeds(self):
        recs = make_recordings(17, sessions=2)
        for seed in range(50):
            split = split_subjects(recs, seed=seed)
            sets = [set(split.train), set(split.val), set(split.test)]
            assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
            assert sets[0] | sets[1] | sets[2] == {r.subject_id for r in recs}

    def test_proportions_within_one_subject(self):
        for n in (5, 10, 13, 20, 37):
            split = split_subjects(make_recordings(n), seed=3)
            assert abs(len(split.train) - 0.8 * n) <= 1
            assert abs(len(split.val) - 0.1 * n) <= 1
            assert abs(len(split.test) - 0.1 * n) <= 1


class TestManifest:
    def test_relative_paths_resolve(self, tmp_path):
        sub = tmp_path / "rec"
        sub.mkdir()
        write_csv(sub / "a.csv", np.zeros((2, 2)))
        (tmp_path / "manifest.txt").write_text("rec/a.csv\n")
        paths = read_manifest(tmp_path / "manifest.txt")
        assert paths[0].exists()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_manifest(tmp_path / "nope.txt")
