import csv
import hashlib
import json
import math
import shutil

import numpy as np
import pytest

from retinal_landmarks import InvalidInputError, cli, pipeline, synthetic
from retinal_landmarks.classifier import CLASS_NAMES
from retinal_landmarks.imaging import save_image

SMALL_CFG = dict(vocab_size=32, n_topics=4, knn_k=3, plsa_max_iter=60)


@pytest.fixture(scope="module")
def small_crops(tmp_path_factory):
    """Two small disjoint crop sets for quick training and sweeps."""
    root = tmp_path_factory.mktemp("small_crops")
    synthetic.write_training_set(2, 5, root / "train")
    synthetic.write_training_set(3, 4, root / "test")
    return root


@pytest.fixture(scope="module")
def eval_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval")
    truths = synthetic.generate_synthetic(7, 2, root / "images")
    return root, truths


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestConfig:
    def test_defaults(self):
        cfg = pipeline.PipelineConfig()
        assert (cfg.vocab_size, cfg.n_topics, cfg.knn_k, cfg.fuzzy_m, cfg.tau) == (113, 15, 9, 2.0, 0.5)
        assert cfg.window == (122, 112) and cfg.retention_q == 0.35

    def test_file_and_overrides(self, tmp_path):
        (tmp_path / "c.cfg").write_text("# tuned\nn_topics = 20\nknn_k=5  # fewer\n\nscale_divisors = 2,4\n")
        cfg = pipeline.load_config(tmp_path / "c.cfg", pipeline.parse_overrides(["knn_k=7", "tau=0.4"]))
        assert (cfg.n_topics, cfg.knn_k, cfg.tau, cfg.scale_divisors) == (20, 7, 0.4, (2, 4))

    @pytest.mark.parametrize(
        "text",
        ["bogus = 3\n", "n_topics = many\n", "n_topics\n", "tau = 1.5\n", "fuzzy_m = 1\n", "llc_k = 40\nvocab_size = 20\n"],
    )
    def test_rejected(self, tmp_path, text):
        (tmp_path / "c.cfg").write_text(text)
        with pytest.raises(InvalidInputError):
            pipeline.load_config(tmp_path / "c.cfg")

    def test_override_needs_equals(self):
        with pytest.raises(InvalidInputError):
            pipeline.parse_overrides(["n_topics"])


class TestTraining:
    def test_retrain_is_bit_identical(self, small_crops, tmp_path):
        cfg = pipeline.PipelineConfig(**SMALL_CFG)
        pipeline.train(small_crops / "train", cfg, tmp_path / "a")
        pipeline.train(small_crops / "train", cfg, tmp_path / "b")
        for name in (pipeline.CODEBOOK_FILE, pipeline.MODEL_FILE, pipeline.NEIGHBORS_FILE):
            assert digest(tmp_path / "a" / name) == digest(tmp_path / "b" / name)
        art = pipeline.Artifacts.load(tmp_path / "a")
        assert art.codebook.size == 32 and art.model.n_topics == 4 and len(art.neighbors) == 30

    def test_vocabulary_larger_than_blocks(self, small_crops):
        crops, labels = pipeline.load_training_crops(small_crops / "test")
        cfg = pipeline.PipelineConfig(vocab_size=4096)
        with pytest.raises(InvalidInputError):
            pipeline.train_from_crops(crops[:2], labels[:2], cfg)

    def test_missing_class_folder_named(self, small_crops, tmp_path):
        shutil.copytree(small_crops / "test", tmp_path / "crops")
        shutil.rmtree(tmp_path / "crops" / "od_part3")
        with pytest.raises(InvalidInputError, match="od_part3"):
            pipeline.load_training_crops(tmp_path / "crops")

    def test_empty_class_folder(self, small_crops, tmp_path):
        shutil.copytree(small_crops / "test", tmp_path / "crops")
        for f in (tmp_path / "crops" / "non_od").iterdir():
            f.unlink()
        with pytest.raises(InvalidInputError, match="non_od"):
            pipeline.load_training_crops(tmp_path / "crops")

    def test_missing_artifacts(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="plsa.flpl"):
            pipeline.Artifacts.load(tmp_path)


class TestDetect:
    def test_black_image_not_found(self, trained_synthetic):
        report = pipeline.detect(np.zeros((400, 500, 3)), trained_synthetic.config, trained_synthetic.artifacts)
        assert not report.od_found
        assert report.fovea is None and report.fovea_flags == ["od-not-found"]

    def test_report_fields_and_accuracy(self, trained_synthetic, fundus_1000):
        report = pipeline.detect(fundus_1000.image, trained_synthetic.config, trained_synthetic.artifacts, image_id="a.png")
        d = report.to_dict(timings=False)
        assert d["schema"] == pipeline.REPORT_SCHEMA and "timings_ms" not in d
        assert d["image"] == "a.png" and d["vessel_source"] == "baseline-segmenter"
        t = fundus_1000.truth
        assert math.hypot(d["od_center"][0] - t.od_x, d["od_center"][1] - t.od_y) <= t.od_r
        assert math.hypot(d["fovea"][0] - t.fovea_x, d["fovea"][1] - t.fovea_y) <= t.od_diameter
        assert sum(d["od_memberships"]) == pytest.approx(1.0, abs=1e-5)
        assert set(report.timings_ms) == {"load", "saliency", "validation", "vessels", "fovea", "macula"}

    def test_external_vessel_map_used(self, trained_synthetic, fundus_1000):
        h, w = fundus_1000.image.shape[:2]
        vmap = np.zeros((h, w), np.uint8)
        report = pipeline.detect(fundus_1000.image, trained_synthetic.config, trained_synthetic.artifacts, vessel_map=vmap)
        assert report.vessel_source == "external-file"
        assert "parabola-fit-failed" in report.fovea_flags and report.fovea is None
        with pytest.raises(InvalidInputError):
            pipeline.detect(fundus_1000.image, trained_synthetic.config, trained_synthetic.artifacts, vessel_map=vmap[:-1])


class TestEvaluate:
    def test_perfect_on_synthetic(self, trained_synthetic, eval_set, tmp_path):
        root, truths = eval_set
        summary, scores, reports = pipeline.evaluate(
            root / "images", root / "images" / "ground_truth.csv", trained_synthetic.config,
            artifacts=trained_synthetic.artifacts, reports_dir=tmp_path / "reports",
        )
        assert summary["images"] == 2 and summary["skipped"] == 0
        assert summary["od_accuracy"] == 100.0 and summary["fovea_accuracy"] == 100.0
        assert summary["resolution"] == "1500x1152"
        assert sorted(p.name for p in (tmp_path / "reports").iterdir()) == ["synth_001.json", "synth_002.json"]

        # predictions scored against themselves are always right
        for rep in reports:
            a = pipeline.Annotation(rep["image"], *rep["od_center"], rep["od_diameter"] / 2, *rep["fovea"])
            s = pipeline.score_prediction(rep, a, trained_synthetic.config)
            assert s.od_correct and s.fovea_correct and s.od_error == 0.0

        # moving every annotation 5 D away makes every prediction wrong
        for rep, t in zip(reports, truths):
            shift = 5 * t.od_diameter
            a = pipeline.Annotation(t.image, t.od_x + shift, t.od_y, t.od_r, t.fovea_x + shift, t.fovea_y)
            s = pipeline.score_prediction(rep, a, trained_synthetic.config)
            assert s.od_correct is False and s.fovea_correct is False

    def test_empty_dataset(self, tmp_path):
        (tmp_path / "gt.csv").write_text("image,od_x,od_y,od_r,fovea_x,fovea_y\nmissing.png,1,2,3,4,5\n")
        summary, scores, reports = pipeline.evaluate(tmp_path, tmp_path / "gt.csv", pipeline.PipelineConfig())
        assert summary is None and scores == [] and reports == []

    def test_annotations_need_image_column(self, tmp_path):
        (tmp_path / "gt.csv").write_text("name,od_x\nx.png,1\n")
        with pytest.raises(InvalidInputError):
            pipeline.read_annotations(tmp_path / "gt.csv")

    def test_blank_fields_unknown(self, tmp_path):
        (tmp_path / "gt.csv").write_text("image,od_x,od_y,od_r,fovea_x,fovea_y\nx.png,1,2,,,\n")
        (a,) = pipeline.read_annotations(tmp_path / "gt.csv")
        assert (a.od_x, a.od_r, a.fovea_x) == (1.0, None, None)
        rep = {"width": 1000, "od_center": [1.0, 2.0], "od_diameter": 100.0, "fovea": [0.0, 0.0]}
        s = pipeline.score_prediction(rep, a, pipeline.PipelineConfig())
        assert s.od_correct and s.fovea_correct is None
        assert pipeline.summarize([s], "d")["fovea_accuracy"] is None

    def test_summary_csv(self, tmp_path):
        row = pipeline.summarize([pipeline.ImageScore("a", True, False, 1.0, 9.0)], "set", "10x20", 1)
        pipeline.write_summary_csv(tmp_path / "s.csv", [row])
        with open(tmp_path / "s.csv", newline="") as fh:
            (back,) = list(csv.DictReader(fh))
        assert back == {"dataset": "set", "images": "1", "resolution": "10x20",
                        "od_accuracy": "100.0", "fovea_accuracy": "0.0", "skipped": "1"}


class TestBenchAndSweep:
    def test_bench_saliency_only(self, fundus_1000):
        out = pipeline.bench(fundus_1000.image, pipeline.PipelineConfig(), repeats=1)
        assert out["repeats"] == 1 and out["image_size"] == [1500, 1152]
        assert set(out["median_ms"]) == {"saliency", "total"} and out["median_ms"]["total"] > 0
        with pytest.raises(InvalidInputError):
            pipeline.bench(fundus_1000.image, pipeline.PipelineConfig(), repeats=0)

    def test_sweep_rows_and_round_trip(self, small_crops, tmp_path):
        cfg = pipeline.PipelineConfig(**SMALL_CFG)
        train = pipeline.load_training_crops(small_crops / "train")
        test = pipeline.load_training_crops(small_crops / "test")
        rows = pipeline.sweep(*train, *test, {"n_topics": [5, 15, 30]}, cfg)
        assert [(r["param"], r["value"]) for r in rows] == [("n_topics", 5), ("n_topics", 15), ("n_topics", 30)]
        assert all(0.0 <= r["accuracy"] <= 1.0 for r in rows)
        single = pipeline.sweep(*train, *test, {"knn_k": [3]}, cfg)
        assert len(single) == 1
        pipeline.write_sweep_csv(tmp_path / "s.csv", rows + single)
        assert pipeline.read_sweep_csv(tmp_path / "s.csv") == rows + single

    def test_sweep_rejects_unknown_and_empty(self, small_crops):
        crops, labels = pipeline.load_training_crops(small_crops / "test")
        cfg = pipeline.PipelineConfig(**SMALL_CFG)
        with pytest.raises(InvalidInputError):
            pipeline.sweep(crops, labels, crops, labels, {"tau": [1]}, cfg)
        with pytest.raises(InvalidInputError):
            pipeline.sweep(crops, labels, crops, labels, {"n_topics": []}, cfg)


class TestCli:
    def test_synth_train_detect(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(cli.CACHE_ENV, str(tmp_path / "cache"))
        assert cli.main(["synth", "--seed", "2", "--count", "1", "--size", "300x230", "--out", str(tmp_path / "s")]) == 0
        assert (tmp_path / "s" / "synth_001.png").is_file() and (tmp_path / "s" / "ground_truth.csv").is_file()
        assert cli.main(["synth", "--seed", "2", "--training-crops", "5", "--out", str(tmp_path / "s")]) == 0
        assert sorted(p.name for p in (tmp_path / "s" / "train").iterdir()) == sorted(CLASS_NAMES)
        sets = [arg for k, v in SMALL_CFG.items() for arg in ("--set", f"{k}={v}")]
        assert cli.main(["train", str(tmp_path / "s" / "train"), *sets]) == 0
        assert (tmp_path / "cache" / "model" / pipeline.MODEL_FILE).is_file()

    def test_detect_is_repeatable(self, trained_synthetic, tmp_path):
        f = synthetic.render_fundus(1001)
        save_image(tmp_path / "img.png", f.image)
        args = ["detect", str(tmp_path / "img.png"), "--model", str(trained_synthetic.model_dir)]
        assert cli.main([*args, "--out", str(tmp_path / "a.json"), "--dump", str(tmp_path / "dump")]) == 0
        assert cli.main([*args, "--out", str(tmp_path / "b.json")]) == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        rep = json.loads((tmp_path / "a.json").read_text())
        assert rep["od_found"] and rep["image"] == "img.png"
        dumped = {p.name for p in (tmp_path / "dump").iterdir()}
        assert {"saliency.png", "interest_mask.png", "main_course.csv"} <= dumped
        assert len([n for n in dumped if n.startswith("saliency_")]) == 3

    def test_black_image_exit_code(self, trained_synthetic, tmp_path):
        save_image(tmp_path / "black.png", np.zeros((300, 400, 3)))
        code = cli.main(["detect", str(tmp_path / "black.png"), "--model", str(trained_synthetic.model_dir),
                         "--out", str(tmp_path / "r.json")])
        assert code == pipeline.EXIT_NOT_FOUND
        assert json.loads((tmp_path / "r.json").read_text())["od_found"] is False

    def test_evaluate_empty_dataset(self, trained_synthetic, tmp_path):
        (tmp_path / "gt.csv").write_text("image,od_x,od_y,od_r,fovea_x,fovea_y\n")
        code = cli.main(["evaluate", str(tmp_path), "--annotations", str(tmp_path / "gt.csv"),
                         "--model", str(trained_synthetic.model_dir), "--summary", str(tmp_path / "s.csv")])
        assert code == 0
        assert (tmp_path / "s.csv").read_text().strip() == ",".join(pipeline.SUMMARY_FIELDS)

    def test_bench_saliency_only(self, tmp_path):
        save_image(tmp_path / "img.png", synthetic.render_fundus(5, (400, 300)).image)
        assert cli.main(["bench", str(tmp_path / "img.png"), "--saliency-only", "--repeats", "1",
                         "--out", str(tmp_path / "b.json")]) == 0
        assert json.loads((tmp_path / "b.json").read_text())["median_ms"]["saliency"] > 0

    @pytest.mark.parametrize(
        "argv",
        [
            [],
            ["detect"],
            ["synth", "--out", "x"],
            ["synth", "--size", "300by200", "--count", "1", "--out", "x"],
            ["sweep", "--train", "a", "--test", "b", "--param", "tau=1,2"],
            ["sweep", "--train", "a", "--test", "b", "--param", "n_topics=a"],
            ["train", "x", "--set", "nonsense=1"],
        ],
    )
    def test_usage_errors(self, argv, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert cli.main(argv) == pipeline.EXIT_USAGE

    def test_io_errors(self, trained_synthetic, tmp_path):
        assert cli.main(["detect", str(tmp_path / "nope.png"), "--model", str(trained_synthetic.model_dir)]) == pipeline.EXIT_IO
        save_image(tmp_path / "img.png", np.zeros((10, 10, 3)))
        assert cli.main(["detect", str(tmp_path / "img.png"), "--model", str(tmp_path / "empty")]) == pipeline.EXIT_IO
