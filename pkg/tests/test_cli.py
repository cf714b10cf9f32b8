import json

import numpy as np
import pytest

from cld.cli import main
from cld.dataio import SequenceFeature, write_features, write_sequence
from cld.head import load_model, predict_batch

FAST_TRAIN = ["--rho", "0.1", "--admm-iters", "60", "--stop-tol", "1e-8",
              "--rank", "150", "--seed", "0"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    rc = main(["synth", "--out", str(out), "--languages", "2", "--accents", "2,2",
               "--dim", "8", "--samples-per-accent", "30", "--seed", "5"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def model(dataset, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "model.json"
    log = path.with_suffix(".log")
    rc = main(["train", "--manifest", str(dataset / "manifest.json"),
               "--out", str(path), "--log", str(log), *FAST_TRAIN])
    assert rc == 0
    return path


class TestSynth:
    def test_outputs_exist(self, dataset):
        for name in ("features.cldf", "labels.csv", "manifest.json", "accents.csv"):
            assert (dataset / name).exists()

    def test_deterministic_outputs(self, tmp_path):
        args = ["synth", "--languages", "2", "--accents", "1,1", "--dim", "4",
                "--samples-per-accent", "10", "--seed", "3"]
        assert main([*args, "--out", str(tmp_path / "a")]) == 0
        assert main([*args, "--out", str(tmp_path / "b")]) == 0
        for name in ("features.cldf", "labels.csv", "manifest.json", "accents.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestTrain:
    def test_model_file_and_log(self, model):
        head = load_model(model)
        assert head.cert is not None
        log_lines = model.with_suffix(".log").read_text().strip().splitlines()
        parsed = [json.loads(l) for l in log_lines]
        assert any("objective" in rec for rec in parsed)
        assert any(rec.get("phase") == "train" for rec in parsed)

    def test_missing_labels_file_exits_2(self, dataset, tmp_path, capsys):
        manifest = tmp_path / "broken.json"
        manifest.write_text(json.dumps({
            "features": str(dataset / "features.cldf"),
            "labels": str(dataset / "missing.csv"),
            "label_map": {"en": 0, "zh": 1},
        }))
        rc = main(["train", "--manifest", str(manifest), "--out", str(tmp_path / "m.json")])
        assert rc == 2
        assert "missing.csv" in capsys.readouterr().err

    def test_deterministic_across_thread_env(self, dataset, tmp_path, monkeypatch):
        outs = []
        for threads, name in (("1", "m1.json"), ("4", "m4.json")):
            monkeypatch.setenv("CLD_THREADS", threads)
            path = tmp_path / name
            rc = main(["train", "--manifest", str(dataset / "manifest.json"),
                       "--out", str(path), *FAST_TRAIN])
            assert rc == 0
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]

    def test_bad_threads_env_exits_2(self, dataset, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("CLD_THREADS", "zero")
        rc = main(["train", "--manifest", str(dataset / "manifest.json"),
                   "--out", str(tmp_path / "m.json")])
        assert rc == 2
        assert "CLD_THREADS" in capsys.readouterr().err

    def test_verify_passes_on_beta_zero(self, dataset, tmp_path):
        rc = main(["train", "--manifest", str(dataset / "manifest.json"),
                   "--out", str(tmp_path / "m.json"), "--beta", "0", "--verify",
                   *FAST_TRAIN])
        assert rc == 0

    def test_config_file_defaults(self, dataset, tmp_path):
        cfgfile = tmp_path / "cfg.json"
        cfgfile.write_text(json.dumps({"rho": 0.1, "admm_iters": 25, "gates": 4}))
        path = tmp_path / "m.json"
        rc = main(["train", "--manifest", str(dataset / "manifest.json"),
                   "--out", str(path), "--config", str(cfgfile)])
        assert rc == 0
        meta = load_model(path).train_meta
        assert meta["admm"]["admm_iters"] == 25
        assert meta["gates"]["count"] == 4


class TestPredict:
    def test_predictions_match_library(self, dataset, model, tmp_path):
        out = tmp_path / "preds.csv"
        rc = main(["predict", "--model", str(model),
                   "--features", str(dataset / "features.cldf"),
                   "--out", str(out), "--log", str(tmp_path / "p.log")])
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        head = load_model(model)
        from cld.dataio import read_features

        H = read_features(dataset / "features.cldf").values
        expected = predict_batch(head, H).argmax(axis=1)
        got = np.array([int(l.split(",")[1]) for l in lines[1:]])
        np.testing.assert_array_equal(got, expected)
        latencies = [json.loads(l) for l in (tmp_path / "p.log").read_text().splitlines()]
        assert all("latency_ms" in rec for rec in latencies)

    def test_zero_vector_breaks_tie_to_class_zero(self, model, tmp_path):
        feats = tmp_path / "zero.csv"
        feats.write_text(",".join(["0"] * 8) + "\n")
        out = tmp_path / "preds.csv"
        rc = main(["predict", "--model", str(model), "--features", str(feats),
                   "--out", str(out), "--log", str(tmp_path / "z.log")])
        assert rc == 0
        row = out.read_text().strip().splitlines()[1].split(",")
        assert row[1] == "0"

    def test_pool_composition(self, model, tmp_path):
        rng = np.random.default_rng(0)
        frames = rng.standard_normal((5, 8))
        mask = np.array([1, 1, 0, 1, 0], dtype=bool)
        seqdir = tmp_path / "seqs"
        seqdir.mkdir()
        write_sequence(seqdir / "utt0.clds", SequenceFeature(frames, mask))
        out = tmp_path / "pooled_preds.csv"
        rc = main(["predict", "--model", str(model), "--features", str(seqdir),
                   "--pool", "--out", str(out), "--log", str(tmp_path / "s.log")])
        assert rc == 0
        line = out.read_text().strip().splitlines()[1].split(",")
        from cld.dataio import pool_masked_mean

        pooled = pool_masked_mean(SequenceFeature(frames, mask))
        head = load_model(model)
        expected = predict_batch(head, pooled[None, :])[0]
        got = np.array([float(x) for x in line[3:]])
        np.testing.assert_allclose(got, expected, rtol=1e-15)
        assert line[0] == "utt0"

    def test_dimension_mismatch_exits_2(self, model, tmp_path):
        feats = tmp_path / "bad.csv"
        feats.write_text("1,2,3\n")
        rc = main(["predict", "--model", str(model), "--features", str(feats),
                   "--out", str(tmp_path / "p.csv")])
        assert rc == 2

    def test_model_file_unchanged_by_predict(self, dataset, model, tmp_path):
        before = model.read_bytes()
        main(["predict", "--model", str(model),
              "--features", str(dataset / "features.cldf"),
              "--out", str(tmp_path / "p.csv"), "--log", str(tmp_path / "l.log")])
        assert model.read_bytes() == before


class TestCertify:
    def test_csv_schema_and_summary(self, dataset, model, tmp_path):
        out, summary = tmp_path / "c.csv", tmp_path / "s.json"
        rc = main(["certify", "--model", str(model),
                   "--manifest", str(dataset / "manifest.json"),
                   "--out", str(out), "--summary", str(summary)])
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "id,pred,true,margin,radius_feature,radius_audio,certified"
        doc = json.loads(summary.read_text())
        assert doc["bounds"]["B_l21"] <= doc["bounds"]["B_fro_scaled"] + 1e-12
        curve = doc["certified_accuracy"]["accuracy"]
        assert all(a >= b - 1e-12 for a, b in zip(curve, curve[1:]))

    def test_le_flag_halves_radii(self, dataset, model, tmp_path):
        plain, scaled = tmp_path / "plain.csv", tmp_path / "scaled.csv"
        main(["certify", "--model", str(model), "--manifest", str(dataset / "manifest.json"),
              "--out", str(plain), "--summary", str(tmp_path / "a.json")])
        main(["certify", "--model", str(model), "--manifest", str(dataset / "manifest.json"),
              "--out", str(scaled), "--summary", str(tmp_path / "b.json"), "--L-E", "2.0"])
        rows_p = plain.read_text().strip().splitlines()[1:]
        rows_s = scaled.read_text().strip().splitlines()[1:]
        for p, s in zip(rows_p, rows_s):
            rf = float(p.split(",")[4])
            ra = s.split(",")[5]
            assert float(ra) == pytest.approx(rf / 2.0)

    def test_misclassified_rows_have_zero_radius(self, dataset, model, tmp_path):
        # flip every label; margins go negative and radii clamp to zero
        manifest = json.loads((dataset / "manifest.json").read_text())
        labels = (dataset / "labels.csv").read_text().strip().splitlines()
        flipped = tmp_path / "flipped.csv"
        names = list(manifest["label_map"])
        flipped.write_text("".join(
            f"{l.split(',')[0]},{names[1 - manifest['label_map'][l.split(',')[1]]]}\n"
            for l in labels
        ))
        m2 = tmp_path / "m2.json"
        m2.write_text(json.dumps({
            "features": str(dataset / "features.cldf"),
            "labels": str(flipped), "label_map": manifest["label_map"],
        }))
        out = tmp_path / "c.csv"
        main(["certify", "--model", str(model), "--manifest", str(m2),
              "--out", str(out), "--summary", str(tmp_path / "s.json")])
        rows = out.read_text().strip().splitlines()[1:]
        for row in rows:
            cells = row.split(",")
            if float(cells[3]) < 0:
                assert float(cells[4]) == 0.0
                assert cells[6] == "false"


class TestCertifySeparated:
    def test_fully_certified_on_well_separated_data(self, tmp_path):
        # cone-constrained training keeps relu-mode inference aligned with the
        # separating fit, so every point carries a positive margin and the
        # certified fraction hits 1 at eps = 0
        data = tmp_path / "data"
        assert main(["synth", "--out", str(data), "--languages", "2",
                     "--accents", "1,1", "--dim", "6", "--separation", "40",
                     "--samples-per-accent", "12", "--seed", "6"]) == 0
        model = tmp_path / "model.json"
        assert main(["train", "--manifest", str(data / "manifest.json"),
                     "--out", str(model), "--mode", "exact", "--gates", "6",
                     "--rho", "0.5", "--admm-iters", "50",
                     "--stop-tol", "1e-8", "--rank", "100", "--seed", "6"]) == 0
        summary = tmp_path / "summary.json"
        assert main(["certify", "--model", str(model),
                     "--manifest", str(data / "manifest.json"),
                     "--out", str(tmp_path / "c.csv"), "--summary", str(summary)]) == 0
        doc = json.loads(summary.read_text())
        assert doc["certified_fraction"] == 1.0
        assert doc["certified_accuracy"]["accuracy"][0] == 1.0

    def test_relaxed_head_relu_divergence_is_reported(self, tmp_path):
        # extreme separation makes the relaxed head's relu-mode predictions
        # drift from its gated fit; the certify summary must carry the caveat
        data = tmp_path / "data"
        main(["synth", "--out", str(data), "--languages", "2", "--accents", "1,1",
              "--dim", "8", "--separation", "40", "--samples-per-accent", "25",
              "--seed", "6"])
        model = tmp_path / "model.json"
        main(["train", "--manifest", str(data / "manifest.json"), "--out", str(model),
              "--rho", "0.5", "--admm-iters", "150", "--stop-tol", "1e-8",
              "--rank", "150", "--seed", "6"])
        summary = tmp_path / "summary.json"
        main(["certify", "--model", str(model), "--manifest", str(data / "manifest.json"),
              "--out", str(tmp_path / "c.csv"), "--summary", str(summary)])
        doc = json.loads(summary.read_text())
        assert doc["note"] is not None and "relu" in doc["note"]
        assert doc["inference_mode"] == "relu"


class TestEvalCommand:
    def test_report_and_confusion(self, dataset, model, tmp_path):
        out = tmp_path / "report.json"
        conf = tmp_path / "conf.csv"
        rc = main(["eval", "--model", str(model),
                   "--manifest", str(dataset / "manifest.json"),
                   "--accents", str(dataset / "accents.csv"),
                   "--out", str(out), "--confusion-csv", str(conf)])
        assert rc == 0
        doc = json.loads(out.read_text())
        assert 0.0 <= doc["accuracy"] <= 1.0
        assert doc["per_accent"] is not None
        assert conf.read_text().startswith("true\\pred,")


class TestBench:
    def test_single_size_and_determinism(self, tmp_path):
        args = ["bench", "--languages", "2", "--accents", "1,1", "--dim", "6",
                "--samples-per-accent", "40", "--sizes", "24",
                "--seed", "2", *FAST_TRAIN[:-2]]
        assert main([*args, "--out", str(tmp_path / "r1"),
                     "--log", str(tmp_path / "b1.log")]) == 0
        assert main([*args, "--out", str(tmp_path / "r2"),
                     "--log", str(tmp_path / "b2.log")]) == 0
        csv1 = (tmp_path / "r1" / "accuracy_vs_size.csv").read_bytes()
        csv2 = (tmp_path / "r2" / "accuracy_vs_size.csv").read_bytes()
        assert csv1 == csv2
        lines = csv1.decode().strip().splitlines()
        assert len(lines) == 2      # header + one size row
        assert (tmp_path / "r1" / "metrics_24.json").exists()
        assert (tmp_path / "r1" / "per_accent_24.csv").exists()
        # wall-clock goes to the log sink, never into result files
        log = (tmp_path / "b1.log").read_text()
        assert "seconds" in log
        assert "seconds" not in csv1.decode()

    def test_oversized_request_capped_with_warning(self, tmp_path, capsys):
        rc = main(["bench", "--languages", "2", "--accents", "1,1", "--dim", "4",
                   "--samples-per-accent", "10", "--sizes", "999",
                   "--out", str(tmp_path / "r"), "--log", str(tmp_path / "b.log"),
                   "--admm-iters", "3", "--rho", "0.1"])
        assert rc == 0
        assert "capping" in capsys.readouterr().err
        rows = (tmp_path / "r" / "accuracy_vs_size.csv").read_text().strip().splitlines()
        assert rows[1].startswith("999,16,")


class TestVerifyCommand:
    def test_agreement_exit_zero(self, dataset):
        rc = main(["verify", "--manifest", str(dataset / "manifest.json"),
                   "--gates", "4", "--rho", "0.1", "--admm-iters", "400",
                   "--stop-tol", "1e-9", "--rank", "150", "--seed", "0"])
        assert rc == 0

    def test_unconverged_run_exits_3(self, dataset, capsys):
        # paper-default iteration budget leaves the objective far from optimal
        rc = main(["verify", "--manifest", str(dataset / "manifest.json"),
                   "--gates", "4", "--admm-iters", "2", "--seed", "0"])
        assert rc == 3
        assert "verification failed" in capsys.readouterr().err

    def test_oversized_instance_refused(self, tmp_path, capsys):
        data = tmp_path / "big"
        assert main(["synth", "--out", str(data), "--languages", "2",
                     "--accents", "1,1", "--dim", "64",
                     "--samples-per-accent", "300", "--seed", "1"]) == 0
        rc = main(["verify", "--manifest", str(data / "manifest.json"),
                   "--gates", "64", "--admm-iters", "2", "--seed", "1"])
        assert rc == 2
        assert "too large" in capsys.readouterr().err


class TestGatesEnum:
    def test_enumerates_identity(self, tmp_path):
        feats = tmp_path / "tiny.csv"
        feats.write_text("1,0\n0,1\n")
        out = tmp_path / "enum.json"
        rc = main(["gates-enum", "--features", str(feats), "--out", str(out)])
        assert rc == 0
        doc = json.loads(out.read_text())
        assert doc["count"] == 4
        assert set(doc["patterns"]) == {"11", "10", "01", "00"}

    def test_guard_exits_2(self, tmp_path, capsys):
        feats = tmp_path / "big.cldf"
        write_features(feats, np.random.default_rng(0).standard_normal((30, 2)))
        rc = main(["gates-enum", "--features", str(feats)])
        assert rc == 2
        assert "enumeration" in capsys.readouterr().err
