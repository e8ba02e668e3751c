import json
import os

import pytest

from main import main
from trifuse.engine import run_pipeline
from trifuse.util import EXIT_CONFIG, EXIT_DATA, EXIT_OK


def read_bytes(*parts):
    with open(os.path.join(*parts), "rb") as f:
        return f.read()


class TestRunPipeline:
    def test_writes_every_artifact(self, tmp_path, small_config_file):
        out = str(tmp_path / "out")
        summary = run_pipeline(small_config_file, out_dir=out, plot=True)
        for name in ("results.jsonl", "roc_frame.txt", "roc_pixel.txt", "roc_plot.csv", "summary.json"):
            assert os.path.isfile(os.path.join(out, name)), name
        for name in ("label_list.txt", "action_list.txt", "autoencoder.tfae", "gmm.tfgm"):
            assert os.path.isfile(os.path.join(out, "models", name)), name
        for level in ("frame", "pixel"):
            assert set(summary[level]) == {"fused", "object", "action", "motion"}
            for entry in summary[level].values():
                assert 0.0 <= entry["auc"] <= 1.0 and 0.0 <= entry["eer"] <= 1.0
        assert summary["frame"]["fused"]["frames"] == 45
        with open(os.path.join(out, "summary.json")) as f:
            assert json.load(f)["config"]["seed"] == 7

    def test_same_seed_same_bytes(self, tmp_path, small_config_file):
        first, second = str(tmp_path / "a"), str(tmp_path / "b")
        run_pipeline(small_config_file, out_dir=first)
        run_pipeline(small_config_file, out_dir=second)
        for parts in (("results.jsonl",), ("roc_frame.txt",), ("roc_pixel.txt",), ("summary.json",),
                      ("models", "autoencoder.tfae"), ("models", "gmm.tfgm")):
            assert read_bytes(first, *parts) == read_bytes(second, *parts)

    @pytest.mark.parametrize("preset,seed", [("umn", 0), ("umn", 1), ("umn", 2),
                                             ("ped2", 0), ("ped2", 1), ("ped2", 2), ("ped2", 3)])
    def test_fusion_beats_single_branches(self, tmp_path, preset, seed):
        summary = run_pipeline(out_dir=str(tmp_path / "out"), preset=preset, seed=seed)
        frame = summary["frame"]
        assert frame["fused"]["auc"] >= 0.95
        for branch in ("object", "action", "motion"):
            assert frame["fused"]["auc"] >= frame[branch]["auc"] - 0.02


class TestCli:
    def test_gen_then_run_on_saved_data(self, tmp_path, small_config_file):
        data, out = str(tmp_path / "data"), str(tmp_path / "out")
        assert main(["gen", "-c", small_config_file, "-d", data])[1] == EXIT_OK
        assert os.path.isfile(os.path.join(data, "manifest.json"))
        assert main(["run", "-c", small_config_file, "-d", data, "-o", out])[1] == EXIT_OK
        synthetic = str(tmp_path / "synthetic")
        assert main(["run", "-c", small_config_file, "-o", synthetic])[1] == EXIT_OK
        assert read_bytes(out, "results.jsonl") == read_bytes(synthetic, "results.jsonl")

    def test_staged_actions_and_explain(self, tmp_path, small_config_file):
        out = str(tmp_path / "out")
        for action in ("train", "score", "eval", "explain"):
            msg, status = main([action, "-c", small_config_file, "-o", out])
            assert status == EXIT_OK, msg
        with open(os.path.join(out, "results.jsonl")) as f:
            results = [json.loads(line) for line in f]
        with open(os.path.join(out, "explanations.jsonl")) as f:
            rows = [json.loads(line) for line in f]
        assert [(r["frame_index"], r["target_id"], r["decision"]) for r in rows] == \
            [(r["frame_index"], r["target_id"], r["decision"]) for r in results]
        assert all(len(row["explanation"]) == 3 for row in rows)

        assert main(["explain", "-c", small_config_file, "-o", out, "--abnormal-only"])[1] == EXIT_OK
        with open(os.path.join(out, "explanations.jsonl")) as f:
            abnormal_rows = [json.loads(line) for line in f]
        assert len(abnormal_rows) == sum(r["decision"] == "abnormal" for r in results)
        assert all(row["decision"] == "abnormal" for row in abnormal_rows)

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("motion.hmof.bins = 8\n")
        msg, status = main(["run", "-c", str(path), "-o", str(tmp_path / "out")])
        assert status == EXIT_CONFIG
        assert "unknown key" in msg

    def test_negative_section_seed(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("motion.ae.seed = -5\n")
        msg, status = main(["train", "-c", str(path), "-o", str(tmp_path / "out")])
        assert status == EXIT_CONFIG
        assert "ae.seed" in msg

    def test_missing_data_root(self, tmp_path):
        msg, status = main(["run", "-d", str(tmp_path / "nowhere"), "-o", str(tmp_path / "out")])
        assert status == EXIT_DATA

    @pytest.mark.parametrize("argv", [["eval", "-s", "-1"], ["fly"]])
    def test_bad_arguments(self, argv):
        with pytest.raises(SystemExit):
            main(argv)
