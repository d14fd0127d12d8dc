import json

import pytest

from triface.cli import main
from triface.config import config_hash, load_config
from triface.errors import InvalidArgumentError
from triface.images import load_png, save_png
from triface.synthdata import load_dataset


class TestConfig:
    def test_defaults_load(self):
        cfg = load_config()
        assert cfg["stage1"]["lambda_neu"] == 0.01
        assert cfg["stage3"]["lambda_gan"] == 0.05

    def test_unknown_top_level_key_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"nonsense": 1}))
        with pytest.raises(InvalidArgumentError, match="nonsense"):
            load_config(p)

    def test_unknown_nested_key_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"stage1": {"wat": 2}}))
        with pytest.raises(InvalidArgumentError, match="stage1.wat"):
            load_config(p)

    def test_invalid_json_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        with pytest.raises(InvalidArgumentError):
            load_config(p)

    def test_hash_changes_iff_content_changes(self):
        a = load_config()
        b = load_config(overrides={"stage1": {"steps": 301}})
        c = load_config(overrides={"stage1": {"steps": 301}})
        assert config_hash(a) != config_hash(b)
        assert config_hash(b) == config_hash(c)


TINY_CONFIG = {
    "dataset": {"n_identities": 2, "n_expressions": 2, "n_views": 2,
                "resolution": 16, "seed": 7},
    "model": {"input_res": 16, "token_patch": 4, "width": 32, "depth_low": 3,
              "depth_fuse": 1, "heads": 4, "plane_res": 16, "plane_channels": 8,
              "insert_positions": [0, 2], "exp_width": 32, "exp_depth": 2},
    "lift": {"steps": 3, "batch_size": 2, "samples_per_ray": 6,
             "render_resolution": 16},
    "neutralizer": {"steps": 3, "batch_size": 2},
    "embedder": {"steps": 5, "batch_size": 4},
    "stage1": {"steps": 2, "batch_size": 2, "samples_per_ray": 6,
               "render_resolution": 16, "lr": 1e-3},
    "stage2": {"steps": 2, "batch_size": 2, "samples_per_ray": 6,
               "render_resolution": 16, "patch_size": 12,
               "lift_finetune_steps": 1, "n_stage2_records": 4},
    "stage3": {"steps": 2, "batch_size": 2, "samples_per_ray": 6,
               "render_resolution": 16, "patch_size": 12},
    "superres": {"n_pairs": 6, "steps": 5},
    "fewshot": {"steps": 2, "samples_per_ray": 6},
    "eval": {"max_pairs": 4, "probe_scenes": 40},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Full tiny CLI pipeline: data -> lifter -> neutralizer -> stage 1."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    cfg = ["--config", str(cfg_path)]
    data = root / "world.vxpd"
    assert main(cfg + ["gen-data", "--identities", "2", "--expressions", "2",
                       "--views", "2", "--res", "16", "--seed", "7",
                       "--out", str(data)]) == 0
    assert main(cfg + ["train-lift", "--data", str(data),
                       "--out", str(root / "lift")]) == 0
    assert main(cfg + ["train-neutralizer", "--data", str(data),
                       "--lifter", str(root / "lift" / "lifter.vxpc"),
                       "--out", str(root / "neu")]) == 0
    assert main(cfg + ["train", "--stage", "1", "--data", str(data),
                       "--lifter", str(root / "lift" / "lifter.vxpc"),
                       "--neutralizer", str(root / "neu" / "neutralizer.vxpc"),
                       "--embedder", str(root / "embedder.vxpc"),
                       "--out", str(root / "s1")]) == 0
    return root, cfg_path, data


class TestCliPipeline:
    def test_gen_data_output_loads(self, workspace):
        root, _, data = workspace
        ds = load_dataset(data)
        assert ds.spec.n_frames == 8
        assert (root / "s1" / "stage1.vxpc").exists()
        assert (root / "s1" / "stage1_loss.csv").exists()

    def test_eval_writes_csv(self, workspace):
        root, cfg_path, data = workspace
        out = root / "eval_self.csv"
        rc = main(["--config", str(cfg_path), "eval",
                   "--model", str(root / "s1" / "stage1.vxpc"),
                   "--data", str(data), "--mode", "self",
                   "--embedder", str(root / "embedder.vxpc"),
                   "--out", str(out)])
        assert rc == 0
        text = out.read_text()
        assert "psnr" in text and "checkpoint_hash=" in text

    def test_reenact_writes_requested_views(self, workspace):
        root, cfg_path, data = workspace
        ds = load_dataset(data)
        src = root / "src.png"
        drv = root / "drv.png"
        save_png(ds.image(0, 0, 0), src)
        save_png(ds.image(1, 1, 0), drv)
        out = root / "reenact"
        rc = main(["--config", str(cfg_path), "reenact",
                   "--model", str(root / "s1" / "stage1.vxpc"),
                   "--source", str(src), "--driver", str(drv),
                   "--cameras", "3", "--out", str(out)])
        assert rc == 0
        views = sorted(out.glob("view_*.png"))
        assert len(views) == 3
        img = load_png(views[0])
        assert img.shape == (16, 16, 3)

    def test_simulate_telepresence(self, workspace):
        root, cfg_path, data = workspace
        from triface.telepresence import make_script, save_script
        sa, sb = root / "a.bin", root / "b.bin"
        save_script(make_script(3, "conversation", seed=0), sa)
        save_script(make_script(3, "extreme", seed=1), sb)
        out = root / "session"
        rc = main(["--config", str(cfg_path), "simulate-telepresence",
                   "--model", str(root / "s1" / "stage1.vxpc"),
                   "--script-a", str(sa), "--script-b", str(sb),
                   "--data", str(data), "--out", str(out)])
        assert rc == 0
        assert (out / "latency.csv").exists()
        assert (out / "session.json").exists()
        assert len(list(out.glob("peer*_t*_eye*.png"))) == 3 * 2 * 2

    def test_report_merges(self, workspace):
        root, cfg_path, data = workspace
        a = root / "r1.csv"
        a.write_text("col\n1\n")
        out = root / "merged.txt"
        rc = main(["--config", str(cfg_path), "report",
                   "--inputs", str(a), "--out", str(out)])
        assert rc == 0
        assert "LPIPS, FID, AKD omitted" in out.read_text()


class TestExitCodes:
    def test_invalid_input_is_2(self, tmp_path):
        rc = main(["gen-data", "--identities", "0", "--out", str(tmp_path / "x.vxpd")])
        assert rc == 2

    def test_missing_file_is_2(self, tmp_path):
        rc = main(["train-lift", "--data", str(tmp_path / "nope.vxpd"),
                   "--out", str(tmp_path)])
        assert rc == 2

    def test_invalid_state_is_3(self, workspace, tmp_path):
        root, cfg_path, data = workspace
        rc = main(["--config", str(cfg_path), "train", "--stage", "2",
                   "--data", str(data), "--out", str(tmp_path)])
        assert rc == 3

    def test_config_unknown_key_is_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"bogus": True}))
        rc = main(["--config", str(bad), "gen-data", "--out", str(tmp_path / "d")])
        assert rc == 2
