import csv
import json

import pytest

from dagan.data import PremiseViolation, allow_target_labels, audit_scope, gen_synthetic_corpus, load_corpus, reset_audit_log
from dagan.metrics import Detection
from dagan.pipeline import (
    CONDITIONED,
    CYCLE,
    FORWARD,
    SOURCE,
    UPPER,
    CompareSettings,
    ConfigError,
    EvalSettings,
    MissingArtifact,
    PipelineConfig,
    augment_grid,
    criteria_summary,
    parse_config,
    premise_audit,
    regime_order,
    run_compare,
    score,
    summarize,
    write_report,
)

# small enough that a whole compare takes seconds
MINI = {
    "corpus": {"n_train_source": 10, "n_train_target": 10, "n_test_target": 6, "n_test_source": 4},
    "gan": {"total_steps": 3, "base_width": 4, "n_resblocks": 1, "resize_to": 18, "crop_to": 16, "disc_layers": 2},
    "detector": {"epochs": 1, "base_width": 4},
    "compare": {"replicates": 1},
}


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return path


class TestParseConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        (tmp_path / "c.json").write_text("")
        cfg = parse_config(tmp_path / "c.json")
        assert cfg == PipelineConfig()
        assert cfg.gan.lambda_cycle == 10.0

    def test_optimizer_defaults(self):
        g = PipelineConfig().gan
        assert (g.learning_rate, g.beta1, g.batch_size) == (0.0002, 0.5, 1)

    def test_override_beats_file(self, tmp_path):
        path = write_json(tmp_path / "c.json", {"gan": {"lambda_cycle": 3.0}})
        assert parse_config(path).gan.lambda_cycle == 3.0
        assert parse_config(path, {"gan.lambda_cycle": 0}).gan.lambda_cycle == 0.0

    def test_crop_beyond_resize_names_invariant(self, tmp_path):
        path = write_json(tmp_path / "c.json", {"gan": {"crop_to": 40, "resize_to": 36}})
        with pytest.raises(ConfigError, match="crop_to <= resize_to"):
            parse_config(path)

    @pytest.mark.parametrize("raw", [{"gan": {"lamda_cycle": 1}}, {"detectr": {}}, {"speed": 1}, {"gan": {"seed": 3}}])
    def test_unknown_keys_rejected(self, tmp_path, raw):
        with pytest.raises(ConfigError):
            parse_config(write_json(tmp_path / "c.json", raw))

    def test_type_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(write_json(tmp_path / "c.json", {"detector": {"epochs": "ten"}}))
        with pytest.raises(ConfigError):
            parse_config(write_json(tmp_path / "c.json", {"seed": -1}))

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifact):
            parse_config(tmp_path / "nope.json")

    def test_round_trip_through_written_config(self, tmp_path):
        cfg = parse_config(None, {"seed": 7, "detector.epochs": 3, "compare.noise_sigmas": [0.2]})
        path = write_json(tmp_path / "c.json", cfg.to_dict())
        assert parse_config(path) == cfg


class TestRegimes:
    def test_order(self):
        order = regime_order(CompareSettings(), 64, include_upper=True)
        assert order[0] == SOURCE and order[-1] == UPPER
        assert order[-4:-1] == [FORWARD, CYCLE, CONDITIONED]
        assert all(r.startswith("augment:") for r in order[1:-4])

    def test_upper_only_on_request(self):
        assert UPPER not in regime_order(CompareSettings(), 64, include_upper=False)

    def test_augment_grid_scaled(self):
        kinds = augment_grid(CompareSettings(), 64)
        noise = [k for k in kinds if k.kind == "noise"]
        blur = [k for k in kinds if k.kind == "blur"]
        assert [k.sigma for k in noise] == [0.01, 0.05, 0.1, 0.5, 1.0]
        assert all(k.kernel >= 3 and k.kernel % 2 for k in blur)
        assert len(set(blur)) == len(blur)
        assert sorted((k.sigma, k.kernel) for k in blur) == [(0.5, 3), (1.0, 3)]

    def test_augment_grid_full_size(self):
        blur = [k for k in augment_grid(CompareSettings(), 256) if k.kind == "blur"]
        assert sorted((k.sigma, k.kernel) for k in blur) == sorted(
            (s, k) for s in (2.0, 4.0) for k in (5, 9, 13)
        )


class TestScoring:
    def test_empty_detections(self, tmp_path):
        c = gen_synthetic_corpus(tmp_path, 2, 2, 3, 3, 64, seed=0, n_test_source=0)
        out = score([[] for _ in range(len(c.target_test))], c.target_test, EvalSettings())
        assert out["map"] == 0.0 and out["corloc"] is None

    def test_perfect_detections(self, tmp_path):
        c = gen_synthetic_corpus(tmp_path, 2, 2, 3, 3, 64, seed=0, n_test_source=0)
        dets = [[Detection(g.box, g.class_id, 0.9) for g in s.boxes] for s in c.target_test.samples]
        out = score(dets, c.target_test, EvalSettings())
        assert out["map"] == 1.0 and out["corloc"] == 1.0

    def test_summary_margins(self):
        results = {
            SOURCE: [{"seed": 0, "map": 0.1, "corloc": None, "per_class_ap": {}}],
            "augment:noise-0.1": [{"seed": 0, "map": 0.2, "corloc": 0.5, "per_class_ap": {}}],
            FORWARD: [{"seed": 0, "map": 0.15, "corloc": None, "per_class_ap": {}}],
            CYCLE: [{"seed": 0, "map": 0.3, "corloc": None, "per_class_ap": {}}],
        }
        table = summarize(list(results), results, ["a"])
        s = criteria_summary(table, {})
        assert s["cycle_minus_source"] == pytest.approx(0.2)
        assert s["cycle_minus_forward"] == pytest.approx(0.15)
        assert s["best_augment"] == "augment:noise-0.1"

    def test_report_merges(self, tmp_path):
        metrics = write_json(tmp_path / "m.json", {"map": 0.4, "corloc": None, "regime": "x", "seed": 1})
        compare = write_json(tmp_path / "c.json", {"rows": [{"regime": "source", "seeds": [0, 1], "map": [0.1, 0.2]}]})
        out = write_report(tmp_path / "r.csv", [metrics, compare])
        rows = list(csv.DictReader(open(out)))
        assert [(r["regime"], r["map"]) for r in rows] == [("x", "0.4"), ("source", "0.1"), ("source", "0.2")]
        assert rows[0]["corloc"] == ""

    def test_report_rejects_unknown(self, tmp_path):
        with pytest.raises(ConfigError):
            write_report(tmp_path / "r.csv", [write_json(tmp_path / "x.json", {"hello": 1})])


class TestPremise:
    def test_unflagged_read_raises(self, tmp_path):
        c = gen_synthetic_corpus(tmp_path, 2, 3, 2, 3, 64, seed=0, n_test_source=0)
        labeled = load_corpus(tmp_path).target_train_labeled
        with pytest.raises(PremiseViolation):
            labeled.samples[0].boxes
        assert c.target_train.samples[0].boxes == []

    def test_audit_attributes_scope(self, tmp_path):
        gen_synthetic_corpus(tmp_path, 2, 3, 2, 3, 64, seed=0, n_test_source=0)
        reset_audit_log()
        labeled = load_corpus(tmp_path).target_train_labeled
        with allow_target_labels(), audit_scope("rogue"):
            labeled.samples[0].boxes
        audit = premise_audit()
        assert not audit["premise_ok"] and audit["violations"] == 1
        reset_audit_log()
        with allow_target_labels(), audit_scope(UPPER):
            labeled.samples[0].boxes
        assert premise_audit()["premise_ok"]
        reset_audit_log()


@pytest.fixture(scope="module")
def mini_compare(tmp_path_factory):
    cfg = parse_config(None, {f"{s}.{k}": v for s, d in MINI.items() for k, v in d.items()})
    a = tmp_path_factory.mktemp("a")
    b = tmp_path_factory.mktemp("b")
    return cfg, a, run_compare(cfg, a, allow_upper=True), b, run_compare(cfg, b, allow_upper=True)


class TestCompare:
    def test_rows_follow_regime_order(self, mini_compare):
        cfg, _, payload, _, _ = mini_compare
        assert [r["regime"] for r in payload["rows"]] == regime_order(cfg.compare, 64, True)

    def test_bitwise_repeatable(self, mini_compare):
        _, a, pa, b, pb = mini_compare
        assert pa["digests"] == pb["digests"] and pa["digests"]
        assert (a / "compare" / "compare.csv").read_bytes() == (b / "compare" / "compare.csv").read_bytes()
        assert (a / "compare" / "compare.json").read_bytes() == (b / "compare" / "compare.json").read_bytes()

    def test_premise_audit(self, mini_compare):
        _, _, payload, _, _ = mini_compare
        audit = payload["audit"]
        assert audit["premise_ok"]
        train_reads = {k for k in audit["reads"] if k.split("|")[1].startswith("target_train")}
        assert train_reads == {f"{UPPER}|target_train_labeled"}

    def test_config_beside_every_artifact(self, mini_compare):
        _, a, _, _, _ = mini_compare
        for d in [a, a / "compare", *a.glob("detectors/*/*"), *a.glob("gan/*/*")]:
            assert (d / "config.json").exists(), d

    def test_source_detector_held_out(self, mini_compare):
        _, _, payload, _, _ = mini_compare
        assert 0 <= payload["summary"]["source_test_map_median"] <= 1
        assert "source_test_map" in payload["rows"][0]
