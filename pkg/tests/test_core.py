import json

import numpy as np
import pytest

from fovsearch.core import (ActionGrid, BadMagicError, Fixation, GridRangeError,
                            Scanpath, SchemaError, SearchTrial, TruncatedError,
                            VersionError, action_to_fixation, fixation_to_action,
                            load_trials, read_tensor_container, save_trials,
                            write_tensor_container, FFMW_MAGIC, load_pyramid,
                            save_pyramid, FeaturePyramid)

GRID = ActionGrid()


class TestActionGrid:
    def test_dimensions(self):
        assert GRID.n_actions == 640
        assert GRID.cell_h == 16 and GRID.cell_w == 16

    def test_corner_cell(self):
        assert fixation_to_action(Fixation(0, 0)) == 0

    def test_last_cell(self):
        assert fixation_to_action(Fixation(500, 310)) == 639

    def test_boundary_pixel_belongs_to_next_cell(self):
        assert fixation_to_action(Fixation(16, 0)) == 1
        assert fixation_to_action(Fixation(15.999, 0)) == 0

    def test_center_of_first_cell(self):
        assert action_to_fixation(0) == Fixation(8.0, 8.0)

    def test_center_of_last_cell(self):
        assert action_to_fixation(639) == Fixation(504.0, 312.0)

    def test_round_trip_all_actions(self):
        for a in range(640):
            assert fixation_to_action(action_to_fixation(a)) == a

    def test_every_pixel_maps_to_one_action(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            x = rng.uniform(0, 512 - 1e-9)
            y = rng.uniform(0, 320 - 1e-9)
            a = fixation_to_action(Fixation(x, y))
            assert 0 <= a < 640
            row, col = divmod(a, 32)
            assert col * 16 <= x < (col + 1) * 16
            assert row * 16 <= y < (row + 1) * 16

    def test_out_of_bounds_errors_name_coordinate(self):
        with pytest.raises(GridRangeError, match="x"):
            fixation_to_action(Fixation(512, 0))
        with pytest.raises(GridRangeError, match="y"):
            fixation_to_action(Fixation(0, -1))
        with pytest.raises(GridRangeError):
            action_to_fixation(640)


class TestTrialLoading:
    def _write(self, tmp_path, records):
        path = tmp_path / "trials.json"
        path.write_text(json.dumps(records))
        return path

    def test_empty_array(self, tmp_path):
        assert load_trials(self._write(tmp_path, [])) == []

    def test_basic_record(self, tmp_path):
        recs = [{"image": "im1", "task": "cup", "subject": 3, "present": False,
                 "X": [256.0, 30.0], "Y": [160.0, 40.0], "split": "train"}]
        trials = load_trials(self._write(tmp_path, recs))
        assert len(trials) == 1
        t = trials[0]
        assert t.image_id == "im1" and t.task == "cup" and t.subject == 3
        assert len(t.scanpath) == 2
        assert t.scanpath.fixations[1] == Fixation(30.0, 40.0)

    def test_xy_length_mismatch(self, tmp_path):
        recs = [{"image": "a", "task": "cup", "subject": 0, "present": False,
                 "X": [1, 2], "Y": [1], "split": "train"}]
        with pytest.raises(SchemaError, match="X/Y"):
            load_trials(self._write(tmp_path, recs))

    def test_rescales_source_size(self, tmp_path):
        recs = [{"image": "a", "task": "cup", "subject": 0, "present": False,
                 "X": [840.0], "Y": [525.0], "split": "train",
                 "source_size": [1680, 1050]}]
        t = load_trials(self._write(tmp_path, recs))[0]
        f = t.scanpath.fixations[0]
        assert f.x == pytest.approx(840 * 512 / 1680)
        assert f.y == pytest.approx(525 * 320 / 1050)

    def test_unknown_keys_ignored(self, tmp_path):
        recs = [{"image": "a", "task": "cup", "subject": 0, "present": False,
                 "X": [10], "Y": [10], "split": "test", "T": [120], "junk": 1}]
        assert len(load_trials(self._write(tmp_path, recs))) == 1

    def test_error_names_record_index_and_field(self, tmp_path):
        recs = [{"image": "a", "task": "cup", "subject": 0, "present": False,
                 "X": [10], "Y": [10], "split": "train"},
                {"image": "b", "task": "cup", "subject": 0, "present": False,
                 "X": [10], "Y": [10], "split": "nope"}]
        with pytest.raises(SchemaError, match="record 1.*split"):
            load_trials(self._write(tmp_path, recs))

    def test_bbox_requires_present(self, tmp_path):
        recs = [{"image": "a", "task": "cup", "subject": 0, "present": False,
                 "X": [10], "Y": [10], "split": "train", "bbox": [0, 0, 10, 10]}]
        with pytest.raises(SchemaError, match="bbox"):
            load_trials(self._write(tmp_path, recs))

    def test_save_load_round_trip(self, tmp_path):
        trial = SearchTrial("im", "cup", 1, True,
                            Scanpath([Fixation(1.5, 2.5), Fixation(3.0, 4.0)], True),
                            bbox=(10.0, 20.0, 30.0, 40.0), split="valid")
        path = tmp_path / "t.json"
        save_trials(path, [trial], predicted=True)
        back = load_trials(path)[0]
        assert back.scanpath.fixations == trial.scanpath.fixations
        assert back.scanpath.terminated
        assert back.bbox == trial.bbox
        assert back.split == "valid"
        assert json.loads(path.read_text())[0]["predicted"] is True


class TestTensorContainer:
    def test_single_tensor_round_trip(self, tmp_path):
        path = tmp_path / "one.ffmp"
        t = np.array([[[0.5]]], dtype=np.float32)
        write_tensor_container(path, {"t": t})
        back = read_tensor_container(path)
        assert back["t"].shape == (1, 1, 1)
        assert back["t"][0, 0, 0] == 0.5
        # header: magic + version + count + (name_len + name + ndim + 3 dims)
        assert path.stat().st_size == 4 + 8 + 2 + 1 + 1 + 12 + 4

    def test_empty_container(self, tmp_path):
        path = tmp_path / "empty.ffmp"
        write_tensor_container(path, {})
        assert read_tensor_container(path) == {}

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ffmp"
        path.write_bytes(b"XXXX" + b"\0" * 16)
        with pytest.raises(BadMagicError, match="magic"):
            read_tensor_container(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "v9.ffmp"
        path.write_bytes(b"FFMP" + (9).to_bytes(4, "little") + (0).to_bytes(4, "little"))
        with pytest.raises(VersionError):
            read_tensor_container(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "ok.ffmp"
        write_tensor_container(path, {"t": np.ones((2, 3), dtype=np.float32)})
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(TruncatedError):
            read_tensor_container(path)

    def test_round_trip_random_shapes_byte_identical(self, tmp_path):
        rng = np.random.default_rng(42)
        for trial in range(25):
            tensors = {}
            for k in range(rng.integers(0, 4)):
                ndim = int(rng.integers(1, 4))
                shape = tuple(int(rng.integers(1, d)) for d in (9, 17, 17)[:ndim])
                tensors[f"t{k}"] = rng.standard_normal(shape).astype(np.float32)
            p1 = tmp_path / f"a{trial}.ffmp"
            p2 = tmp_path / f"b{trial}.ffmp"
            write_tensor_container(p1, tensors)
            back = read_tensor_container(p1)
            assert set(back) == set(tensors)
            for name in tensors:
                assert back[name].shape == tensors[name].shape
                assert np.array_equal(back[name], tensors[name])
            write_tensor_container(p2, back)
            assert p1.read_bytes() == p2.read_bytes()

    def test_ffmw_step_counter(self, tmp_path):
        path = tmp_path / "w.ffmw"
        write_tensor_container(path, {"w": np.zeros(3, np.float32)},
                               magic=FFMW_MAGIC, step=1234)
        tensors, step = read_tensor_container(path, magic=FFMW_MAGIC)
        assert step == 1234 and "w" in tensors


class TestPyramidContainer:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        levels = [rng.standard_normal((2, 320 // s, 512 // s)).astype(np.float32)
                  for s in (2, 4, 8, 16, 32)]
        pyr = FeaturePyramid(levels)
        path = tmp_path / "p.ffmp"
        save_pyramid(path, pyr)
        back = load_pyramid(path)
        for a, b in zip(pyr.levels, back.levels):
            assert np.array_equal(a, b)

    def test_wrong_level_dims_rejected(self):
        levels = [np.zeros((2, 160, 256), np.float32)] * 5
        with pytest.raises(ValueError, match="stride"):
            FeaturePyramid(levels)
