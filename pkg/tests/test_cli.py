import json

import numpy as np
import pytest
from PIL import Image

from fovsearch.cli import main
from fovsearch.core import TASKS, load_trials, read_tensor_container
from synth import write_toy_dataset


@pytest.fixture(scope="module")
def toy_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return write_toy_dataset(root), root


def _train_config(paths, **train):
    return {
        "trials": paths["trials"],
        "images_dir": paths["images"],
        "model": {"ffm_channels": 4, "head_hidden": 8, "term_hidden": 16,
                  "tasks": ["cup", "clock"]},
        "train": {"iterations": 2, "batch_size": 8, "seed": 3,
                  "value_mode": "expert", **train},
    }


class TestFoveate:
    def test_produces_outputs(self, toy_files, tmp_path):
        paths, _ = toy_files
        out_img = tmp_path / "fov.png"
        out_w = tmp_path / "w.ffmp"
        rc = main(["foveate", "--image", f"{paths['images']}/toy0.png",
                   "--fixations", "256,160", "--out-image", str(out_img),
                   "--out-weights", str(out_w)])
        assert rc == 0
        with Image.open(out_img) as img:
            assert img.size == (512, 320)
        weights = read_tensor_container(out_w)
        assert set(weights) == {"W1", "W2", "W3", "W4", "W5"}
        total = sum(w[0] for w in weights.values())
        assert np.abs(total - 1).max() <= 1e-5

    def test_bad_fixation_syntax_exit_2(self, toy_files, tmp_path):
        paths, _ = toy_files
        rc = main(["foveate", "--image", f"{paths['images']}/toy0.png",
                   "--fixations", "oops", "--out-image", str(tmp_path / "a.png"),
                   "--out-weights", str(tmp_path / "a.ffmp")])
        assert rc == 2


class TestTrain:
    def test_toy_run_writes_outputs(self, toy_files, tmp_path):
        paths, _ = toy_files
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(_train_config(paths)))
        out = tmp_path / "run"
        rc = main(["train", "--config", str(cfg), "--out-dir", str(out)])
        assert rc == 0
        assert (out / "checkpoint.ffmw").exists()
        log = (out / "log.csv").read_text().splitlines()
        assert log[0] == "step,L_irl,L_det,L_term,total,alpha,sigma"
        assert len(log) == 3

    def test_seed_reproducibility(self, toy_files, tmp_path):
        paths, _ = toy_files
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(_train_config(paths)))
        logs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert main(["train", "--config", str(cfg), "--out-dir", str(out),
                         "--seed", "11"]) == 0
            logs.append((out / "log.csv").read_bytes())
        assert logs[0] == logs[1]

    def test_missing_trials_path_exit_2(self, toy_files, tmp_path):
        paths, _ = toy_files
        raw = _train_config(paths)
        raw["trials"] = str(tmp_path / "missing.json")
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(raw))
        rc = main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "o")])
        assert rc == 2

    def test_describe(self, toy_files, tmp_path, capsys):
        paths, _ = toy_files
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(_train_config(paths)))
        assert main(["train", "--config", str(cfg), "--out-dir",
                     str(tmp_path / "x"), "--describe"]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["n_actions"] == 640
        assert summary["output_dims"] == [20, 32]


@pytest.fixture(scope="module")
def trained(toy_files, tmp_path_factory):
    paths, _ = toy_files
    root = tmp_path_factory.mktemp("trained")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(_train_config(paths)))
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--out-dir", str(out)]) == 0
    return out


class TestRollout:
    def test_greedy_deterministic_bytes(self, toy_files, trained, tmp_path):
        paths, _ = toy_files
        outs = []
        for name in ("p1.json", "p2.json"):
            out = tmp_path / name
            rc = main(["rollout", "--checkpoint", str(trained / "checkpoint.ffmw"),
                       "--model-config", str(trained / "model.json"),
                       "--trials", paths["trials"], "--images", paths["images"],
                       "--out", str(out), "--mode", "greedy",
                       "--max-new-absent", "3"])
            assert rc == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_caps_respected_and_present_stops_on_bbox(self, toy_files, trained,
                                                      tmp_path):
        paths, _ = toy_files
        records = json.loads(open(paths["trials"]).read())
        for rec in records[:3]:
            rec["present"] = True
            rec["bbox"] = [0, 0, 512, 320]
        mixed = tmp_path / "mixed.json"
        mixed.write_text(json.dumps(records))
        out = tmp_path / "preds.json"
        rc = main(["rollout", "--checkpoint", str(trained / "checkpoint.ffmw"),
                   "--model-config", str(trained / "model.json"),
                   "--trials", str(mixed), "--images", paths["images"],
                   "--out", str(out)])
        assert rc == 0
        preds = load_trials(out)
        for p in preds:
            cap = 6 if p.present else 10
            assert len(p.scanpath) - 1 <= cap
        # whole-image boxes stop after the first new fixation
        for p in preds:
            if p.present:
                assert len(p.scanpath) == 2 and p.scanpath.terminated


class TestEvaluate:
    def test_gt_against_itself(self, toy_files, tmp_path):
        paths, _ = toy_files
        out = tmp_path / "eval"
        rc = main(["evaluate", "--pred", paths["trials"], "--gt", paths["trials"],
                   "--out-dir", str(out)])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert report["aggregates"]["SS"] == 1.0
        assert report["aggregates"]["MAE"] == 0.0
        assert (out / "report.csv").exists()

    def test_label_maps_enable_semss(self, toy_files, tmp_path):
        paths, _ = toy_files
        lm_dir = tmp_path / "labels"
        lm_dir.mkdir()
        for i in range(3):
            arr = np.zeros((320, 512), np.uint8)
            arr[:160, :256] = 7
            Image.fromarray(arr, mode="L").save(lm_dir / f"toy{i}.png")
        out = tmp_path / "eval"
        rc = main(["evaluate", "--pred", paths["trials"], "--gt", paths["trials"],
                   "--label-maps", str(lm_dir), "--out-dir", str(out)])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert report["aggregates"]["SemSS"] == 1.0

    def test_plots_emitted(self, toy_files, trained, tmp_path):
        paths, _ = toy_files
        out = tmp_path / "eval"
        rc = main(["evaluate", "--pred", paths["trials"], "--gt", paths["trials"],
                   "--out-dir", str(out), "--plot-trials", "1",
                   "--checkpoint", str(trained / "checkpoint.ffmw"),
                   "--model-config", str(trained / "model.json"),
                   "--images", paths["images"]])
        assert rc == 0
        svgs = list(out.glob("scanpath_*.svg"))
        pngs = list(out.glob("priority_*.png"))
        assert svgs and pngs


class TestMakeDensity:
    def _trials_for_all_tasks(self, tmp_path):
        records = []
        rng = np.random.default_rng(0)
        for task in TASKS:
            records.append({
                "image": "a", "task": task, "subject": 0, "present": False,
                "X": [256.0] + list(rng.uniform(0, 511, 3)),
                "Y": [160.0] + list(rng.uniform(0, 319, 3)),
                "split": "train",
            })
        path = tmp_path / "t18.json"
        path.write_text(json.dumps(records))
        return path

    def test_eighteen_tasks_in_eighteen_maps_out(self, tmp_path):
        trials = self._trials_for_all_tasks(tmp_path)
        out = tmp_path / "density.ffmp"
        assert main(["make-density", "--trials", str(trials),
                     "--out", str(out)]) == 0
        tensors = read_tensor_container(out)
        assert len(tensors) == 18
        for name, arr in tensors.items():
            assert name in TASKS
            assert arr.shape == (20, 32)
            assert arr.sum() == pytest.approx(1.0, abs=1e-6)
            assert (arr > 0).all()

    def test_deterministic(self, tmp_path):
        trials = self._trials_for_all_tasks(tmp_path)
        a, b = tmp_path / "a.ffmp", tmp_path / "b.ffmp"
        main(["make-density", "--trials", str(trials), "--out", str(a)])
        main(["make-density", "--trials", str(trials), "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()
