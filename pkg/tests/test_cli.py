"""End-to-end checks for the ``cartondet`` command line."""

import json
from pathlib import Path

import pytest

from cartondet.annotations import import_dataset
from cartondet.cli import OUTPUT_ROOT_ENV, ConfigError, main, resolve_config

BASE_CONFIG = {
    "seed": 7,
    "data": {
        "n_images": 3,
        "scene": {
            "image_size": [128, 128],
            "count_range": [2, 4],
            "size_range": [0.25, 0.45],
            "rows_range": [1, 2],
            "cols_range": [1, 2],
        },
    },
    "model": {"backbone_channels": [8, 16, 32, 64], "fpn_channels": 32, "tower_depth": 2},
    "train": {
        "steps": 5,
        "batch_size": 2,
        "base_lr": 0.02,
        "reference_batch_size": 2,
        "warmup_steps": 10,
    },
}


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps(BASE_CONFIG))
    return path


@pytest.fixture(scope="module")
def dataset_dir(config_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    assert run_cli("gen-data", "--config", config_file, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def train_dir(config_file, dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("train") / "run"
    code = run_cli(
        "train", "--config", config_file,
        "--set", f"data.dataset_dir={dataset_dir}", "--out", out,
    )
    assert code == 0
    return out


class TestResolveConfig:
    def test_defaults(self):
        resolved = resolve_config({}, [])
        assert resolved["seed"] == 0
        assert resolved["train"]["steps"] == 200
        assert resolved["data"]["n_images"] == 20
        assert len(resolved["sweep"]["alphas"]) == 11
        assert resolved["model"]["num_classes"] == 4

    def test_file_then_override_precedence(self):
        resolved = resolve_config({"train": {"steps": 7}}, ["train.steps=9"])
        assert resolved["train"]["steps"] == 9

    def test_dotted_override_reaches_nested_scene(self):
        resolved = resolve_config({}, ["data.scene.image_size=[64,64]"])
        assert resolved["data"]["scene"]["image_size"] == (64, 64)

    def test_bare_string_override(self):
        resolved = resolve_config({}, ["data.taxonomy=one_label"])
        assert resolved["data"]["taxonomy"] == "one_label"
        assert resolved["model"]["num_classes"] == 1

    def test_explicit_num_classes_kept(self):
        resolved = resolve_config({"model": {"num_classes": 4}}, [])
        assert resolved["model"]["num_classes"] == 4

    def test_scene_seed_injection(self):
        assert resolve_config({"seed": 5}, [])["data"]["scene"]["seed"] == 5
        resolved = resolve_config({"seed": 5, "data": {"base_seed": 3}}, [])
        assert resolved["data"]["scene"]["seed"] == 3
        resolved = resolve_config({"seed": 5, "data": {"scene": {"seed": 11}}}, [])
        assert resolved["data"]["scene"]["seed"] == 11

    def test_unknown_keys_rejected_everywhere(self):
        with pytest.raises(ConfigError, match="top-level"):
            resolve_config({"bogus": 1}, [])
        for section in ("data", "train", "eval", "sweep"):
            with pytest.raises(ConfigError, match=section):
                resolve_config({section: {"bogus": 1}}, [])
        with pytest.raises(ConfigError):
            resolve_config({"model": {"bogus": 1}}, [])
        with pytest.raises(ConfigError):
            resolve_config({"data": {"scene": {"bogus": 1}}}, [])

    def test_malformed_override(self):
        with pytest.raises(ConfigError, match="path=value"):
            resolve_config({}, ["train.steps"])

    def test_override_through_scalar(self):
        with pytest.raises(ConfigError, match="non-section"):
            resolve_config({"seed": 3}, ["seed.x=1"])

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            resolve_config({"train": {"steps": 0}}, [])
        with pytest.raises(ConfigError, match="taxonomy"):
            resolve_config({"data": {"taxonomy": "two_label"}}, [])
        with pytest.raises(ConfigError):
            resolve_config({"model": {"strides": [4, 8, 16, 32, 64]}}, [])


class TestMainErrors:
    def _stderr_error(self, capsys):
        return json.loads(capsys.readouterr().err)

    def test_unknown_key_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"seed": 1, "bogus": 2}))
        assert run_cli("stats", "--config", cfg, "--out", tmp_path / "o") == 2
        err = self._stderr_error(capsys)
        assert err["error"] == "config" and "bogus" in err["message"]

    def test_missing_config_exits_2(self, tmp_path, capsys):
        assert run_cli("stats", "--config", tmp_path / "absent.json") == 2
        assert self._stderr_error(capsys)["error"] == "config"

    def test_non_object_config_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "list.json"
        cfg.write_text("[1, 2]")
        assert run_cli("stats", "--config", cfg) == 2
        assert self._stderr_error(capsys)["error"] == "config"

    def test_eval_without_source_exits_2(self, config_file, tmp_path, capsys):
        assert run_cli("eval", "--config", config_file, "--out", tmp_path / "o") == 2
        assert "exactly one" in self._stderr_error(capsys)["message"]

    def test_runtime_error_exits_3(self, tmp_path, capsys):
        summary = tmp_path / "empty.csv"
        summary.write_text("alpha,mAP\n")
        code = run_cli("plot-metrics", "--summary", summary, "--out", tmp_path / "o")
        assert code == 3
        assert self._stderr_error(capsys)["error"] == "runtime"


class TestGenData:
    def test_artifacts(self, dataset_dir):
        images = sorted(p.name for p in (dataset_dir / "images").iterdir())
        assert images == ["000001.png", "000002.png", "000003.png"]
        doc = json.loads((dataset_dir / "annotations.json").read_text())
        assert [c["name"] for c in doc["categories"]] == [
            "Carton-inner-all",
            "Carton-inner-occlusion",
            "Carton-outer-all",
            "Carton-outer-occlusion",
        ]
        manifest = json.loads((dataset_dir / "manifest.json").read_text())
        assert manifest["command"] == "gen-data" and manifest["seed"] == 7
        assert "annotations.json" in manifest["artifacts"]
        assert (dataset_dir / "resolved_config.json").exists()

    def test_deterministic_regeneration(self, config_file, dataset_dir, tmp_path):
        out = tmp_path / "ds2"
        assert run_cli("gen-data", "--config", config_file, "--out", out) == 0
        first = json.loads((dataset_dir / "manifest.json").read_text())
        second = json.loads((out / "manifest.json").read_text())
        assert first["artifacts"] == second["artifacts"]
        assert first["config_sha256"] == second["config_sha256"]

    def test_one_label_collapse(self, config_file, tmp_path):
        out = tmp_path / "one"
        code = run_cli(
            "gen-data", "--config", config_file,
            "--set", "data.taxonomy=one_label", "--out", out,
        )
        assert code == 0
        doc = json.loads((out / "annotations.json").read_text())
        assert doc["categories"] == [{"id": 1, "name": "Carton"}]

    def test_output_root_env(self, config_file, tmp_path, monkeypatch):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
        assert run_cli("gen-data", "--config", config_file) == 0
        assert (tmp_path / "gen-data" / "manifest.json").exists()

    def test_config_output_dir(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        target = tmp_path / "from_config"
        cfg.write_text(json.dumps({**BASE_CONFIG, "output_dir": str(target)}))
        assert run_cli("gen-data", "--config", cfg) == 0
        assert (target / "annotations.json").exists()


class TestStats:
    def test_writes_summary(self, config_file, dataset_dir, tmp_path):
        out = tmp_path / "stats"
        code = run_cli(
            "stats", "--config", config_file,
            "--set", f"data.dataset_dir={dataset_dir}", "--out", out,
        )
        assert code == 0
        stats = json.loads((out / "stats.json").read_text())
        assert stats["n_images"] == 3 and stats["n_instances"] > 0


class TestTrainEval:
    def test_train_artifacts(self, train_dir):
        assert (train_dir / "checkpoint.pt").exists()
        lines = (train_dir / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == BASE_CONFIG["train"]["steps"]
        breakdown = json.loads(lines[-1])
        assert {"total", "cls", "loc", "gap", "bgs", "step", "lr"} <= set(breakdown)
        summary = json.loads((train_dir / "train_summary.json").read_text())
        assert summary["parameters"] > 0
        assert summary["boundary_head_evaluations"] == BASE_CONFIG["train"]["steps"]

    def test_eval_checkpoint(self, config_file, dataset_dir, train_dir, tmp_path):
        out = tmp_path / "eval"
        code = run_cli(
            "eval", "--config", config_file,
            "--set", f"data.dataset_dir={dataset_dir}",
            "--set", f"eval.checkpoint={train_dir / 'checkpoint.pt'}",
            "--out", out,
        )
        assert code == 0
        table = json.loads((out / "ap_table.json").read_text())
        assert set(table) >= {"mAP", "per_threshold", "AP_S", "AP_M", "AP_L"}
        for value in table["per_threshold"].values():
            assert value is None or 0.0 <= value <= 1.0
        assert (out / "ap_table.txt").read_text().startswith(" ")

    def test_identity_detections_score_perfectly(self, config_file, dataset_dir, tmp_path):
        doc = json.loads((dataset_dir / "annotations.json").read_text())
        dets = [
            {
                "image_id": ann["image_id"],
                "category_id": ann["category_id"],
                "bbox": ann["bbox"],
                "score": 1.0,
            }
            for ann in doc["annotations"]
        ]
        dets_path = tmp_path / "identity.json"
        dets_path.write_text(json.dumps(dets))
        out = tmp_path / "eval"
        code = run_cli(
            "eval", "--config", config_file,
            "--set", f"data.dataset_dir={dataset_dir}",
            "--set", f"eval.detections={dets_path}",
            "--out", out,
        )
        assert code == 0
        table = json.loads((out / "ap_table.json").read_text())
        assert table["mAP"] == 1.0
        assert all(v == 1.0 for v in table["per_threshold"].values())

    def test_detections_validation(self, config_file, dataset_dir, tmp_path, capsys):
        for entry, fragment in [
            ({"image_id": 999, "category_id": 1, "bbox": [0, 0, 10, 10], "score": 0.5},
             "unknown image_id"),
            ({"image_id": 1, "category_id": 0, "bbox": [0, 0, 10, 10], "score": 0.5},
             "out of range"),
        ]:
            dets_path = tmp_path / "dets.json"
            dets_path.write_text(json.dumps([entry]))
            code = run_cli(
                "eval", "--config", config_file,
                "--set", f"data.dataset_dir={dataset_dir}",
                "--set", f"eval.detections={dets_path}",
                "--out", tmp_path / "o",
            )
            assert code == 2
            assert fragment in json.loads(capsys.readouterr().err)["message"]

    def test_eval_alpha_override(self, config_file, dataset_dir, train_dir, tmp_path):
        code = run_cli(
            "eval", "--config", config_file,
            "--set", f"data.dataset_dir={dataset_dir}",
            "--set", f"eval.checkpoint={train_dir / 'checkpoint.pt'}",
            "--set", "eval.alpha=0.3",
            "--out", tmp_path / "o",
        )
        assert code == 0


class TestSweeps:
    def test_sweep_alpha_trains_once(self, config_file, dataset_dir, tmp_path):
        out = tmp_path / "sw"
        code = run_cli(
            "sweep-alpha", "--config", config_file,
            "--set", f"data.dataset_dir={dataset_dir}",
            "--set", "sweep.alphas=[0.0,0.5,1.0]",
            "--out", out,
        )
        assert code == 0
        rows = (out / "summary.csv").read_text().splitlines()
        assert rows[0] == "alpha,mAP,AP50"
        assert [r.split(",")[0] for r in rows[1:]] == ["0.00", "0.50", "1.00"]
        for alpha in ("0.00", "0.50", "1.00"):
            assert (out / f"ap_table_alpha_{alpha}.json").exists()
        # fusion is inference-time: one training run, one metrics file
        assert len(list(out.glob("metrics*.jsonl"))) == 1

    def test_sweep_alpha_needs_gap_head(self, config_file, dataset_dir, tmp_path, capsys):
        code = run_cli(
            "sweep-alpha", "--config", config_file,
            "--set", f"data.dataset_dir={dataset_dir}",
            "--set", "model.opcl=null",
            "--out", tmp_path / "o",
        )
        assert code == 2
        assert "gap head" in json.loads(capsys.readouterr().err)["message"]

    def test_sweep_thickness(self, config_file, dataset_dir, tmp_path):
        out = tmp_path / "sw"
        code = run_cli(
            "sweep-thickness", "--config", config_file,
            "--set", f"data.dataset_dir={dataset_dir}",
            "--set", "sweep.thicknesses=[16,40]", "--set", "sweep.steps=3",
            "--out", out,
        )
        assert code == 0
        rows = (out / "summary.csv").read_text().splitlines()
        assert rows[0] == "thickness,mAP,AP50" and len(rows) == 3
        # each point retrains, so each leaves its own loss trace
        for name in ("metrics_t16.jsonl", "metrics_t40.jsonl"):
            assert len((out / name).read_text().splitlines()) == 3

    def test_sweep_bgs_loss(self, config_file, dataset_dir, tmp_path):
        out = tmp_path / "sw"
        code = run_cli(
            "sweep-bgs-loss", "--config", config_file,
            "--set", f"data.dataset_dir={dataset_dir}",
            "--set", 'sweep.variants=["bce","dice"]', "--set", "sweep.steps=3",
            "--out", out,
        )
        assert code == 0
        rows = (out / "summary.csv").read_text().splitlines()
        assert [r.split(",")[0] for r in rows] == ["variant", "bce", "dice"]
        assert (out / "ap_table_bce.json").exists()
        assert (out / "ap_table_dice.json").exists()

    def test_sweep_thickness_needs_boundary_head(self, config_file, dataset_dir, tmp_path, capsys):
        code = run_cli(
            "sweep-thickness", "--config", config_file,
            "--set", f"data.dataset_dir={dataset_dir}",
            "--set", "model.bgs_enabled=false",
            "--out", tmp_path / "o",
        )
        assert code == 2
        assert "bgs_enabled" in json.loads(capsys.readouterr().err)["message"]


class TestExport:
    def test_round_trip_through_voc(self, dataset_dir, tmp_path):
        voc_out = tmp_path / "voc"
        code = run_cli("export", "--dataset", dataset_dir / "annotations.json",
                       "--format", "voc_xml", "--out", voc_out)
        assert code == 0
        xml_files = sorted(p.name for p in (voc_out / "voc").iterdir())
        assert xml_files == ["1.xml", "2.xml", "3.xml"]

        coco_out = tmp_path / "coco"
        code = run_cli("export", "--dataset", voc_out / "voc",
                       "--format", "coco_json", "--out", coco_out)
        assert code == 0
        original = import_dataset(dataset_dir / "annotations.json", "coco_json")
        restored = import_dataset(coco_out / "annotations.json", "coco_json")
        assert len(restored) == len(original)
        for a, b in zip(original, restored):
            assert [i.label for i in a.instances] == [i.label for i in b.instances]
            assert [i.bbox for i in a.instances] == [i.bbox for i in b.instances]

    def test_requires_dataset(self, tmp_path, capsys):
        assert run_cli("export", "--format", "voc_xml", "--out", tmp_path / "o") == 2
        assert "requires --dataset" in json.loads(capsys.readouterr().err)["message"]


@pytest.fixture(scope="module")
def summary_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("plot") / "summary.csv"
    rows = ["alpha,mAP,AP50"] + [f"{0.1 * i:.2f},{0.3 + 0.01 * i:.6f},0.5" for i in range(11)]
    path.write_text("\n".join(rows) + "\n")
    return path


class TestPlotMetrics:
    def test_line_plot_artifacts(self, summary_csv, tmp_path):
        out = tmp_path / "plot"
        assert run_cli("plot-metrics", "--summary", summary_csv, "--out", out) == 0
        assert (out / "plot.svg").read_text().startswith("<?xml")
        assert (out / "plot_data.csv").read_text().splitlines()[0] == "alpha,mAP,AP50"

    def test_byte_identical_reruns(self, summary_csv, tmp_path):
        first, second = tmp_path / "a", tmp_path / "b"
        assert run_cli("plot-metrics", "--summary", summary_csv, "--out", first) == 0
        assert run_cli("plot-metrics", "--summary", summary_csv, "--out", second) == 0
        assert (first / "plot.svg").read_bytes() == (second / "plot.svg").read_bytes()
        assert (first / "plot_data.csv").read_bytes() == (second / "plot_data.csv").read_bytes()

    def test_variant_summary_renders_bars(self, tmp_path):
        summary = tmp_path / "summary.csv"
        summary.write_text("variant,mAP,AP50\nfocal,0.5,0.7\nbce,0.4,0.6\ndice,0.45,0.65\n")
        assert run_cli("plot-metrics", "--summary", summary, "--out", tmp_path / "o") == 0

    def test_requires_summary(self, tmp_path, capsys):
        assert run_cli("plot-metrics", "--out", tmp_path / "o") == 2
        assert "summary" in json.loads(capsys.readouterr().err)["message"]
