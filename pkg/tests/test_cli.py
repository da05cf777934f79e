import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from cfintro import autodiff as ad
from cfintro import cli
from cfintro.analysis import parse_summary
from cfintro.datasets import MANIFEST

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
ORACLE = Path(__file__).parent / "fixtures" / "minimal_fixture_oracle.json"


def write_config(path: Path, cfg: dict) -> str:
    path.write_text(json.dumps(cfg))
    return str(path)


def tiny(tmp: Path, **sections) -> dict:
    cfg = {
        "dataset": {"n_samples": 300, "n_train": 200, "n_test": 100},
        "model": {"checkpoint_dir": str(tmp / "ckpt"),
                  **{k: {"epochs": 1} for k in cli.MODEL_KINDS}},
        "output": {"directory": str(tmp / "out"), "stride": 5},
    }
    for name, values in sections.items():
        cfg.setdefault(name, {}).update(values)
    return cfg


def sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    cfg = tiny(tmp)
    assert cli.main(["train", "--config", write_config(tmp / "run.json", cfg)]) == 0
    return tmp, cfg


class TestGenData:
    def test_rows_and_determinism(self, tmp_path):
        digests = []
        for run in ("a", "b"):
            cfg = tiny(tmp_path, output={"directory": str(tmp_path / run)})
            assert cli.main(["gen-data", "--config", write_config(tmp_path / "c.json", cfg)]) == 0
            manifest = (tmp_path / run / MANIFEST).read_text().splitlines()
            assert len(manifest) == 300
            splits = [json.loads(line)["split"] for line in manifest]
            assert splits.count("train") == 200 and splits.count("test") == 100
            digests.append(sha(tmp_path / run / MANIFEST))
        assert digests[0] == digests[1]

    def test_invalid_bias(self, tmp_path, capsys):
        cfg = tiny(tmp_path, dataset={"bias": {"large": 1.2, "small": 0.1}})
        assert cli.main(["gen-data", "--config", write_config(tmp_path / "c.json", cfg)]) == 2
        assert "bias" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path):
        cfg = tiny(tmp_path, dataset={"colour": "red"})
        assert cli.main(["gen-data", "--config", write_config(tmp_path / "c.json", cfg)]) == 2

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["gen-data", "--config", str(tmp_path / "nope.json")]) == 2


class TestTrain:
    def test_checkpoints_and_metrics(self, trained):
        tmp, _ = trained
        for kind in cli.MODEL_KINDS:
            assert (tmp / "ckpt" / f"{kind}.cfxm").exists()
        metrics = json.loads((tmp / "out" / "metrics.json").read_text())
        assert set(metrics) == set(cli.MODEL_KINDS)

    def test_retrain_is_byte_identical(self, trained, tmp_path):
        tmp, cfg = trained
        cfg = {**cfg, "model": {**cfg["model"], "checkpoint_dir": str(tmp_path / "ckpt")},
               "output": {"directory": str(tmp_path / "out")}}
        path = write_config(tmp_path / "c.json", cfg)
        assert cli.main(["train", "--kind", "classifier", "--config", path]) == 0
        assert sha(tmp_path / "ckpt" / "classifier.cfxm") == sha(tmp / "ckpt" / "classifier.cfxm")

    def test_missing_dataset_path(self, tmp_path):
        cfg = tiny(tmp_path, dataset={"kind": "exported", "path": str(tmp_path / "none")})
        assert cli.main(["train", "--config", write_config(tmp_path / "c.json", cfg)]) == 2

    def test_trains_from_exported_dataset(self, tmp_path):
        cfg = tiny(tmp_path, output={"directory": str(tmp_path / "data")})
        assert cli.main(["gen-data", "--config", write_config(tmp_path / "g.json", cfg)]) == 0
        cfg = tiny(tmp_path, dataset={"kind": "exported", "path": str(tmp_path / "data")})
        path = write_config(tmp_path / "t.json", cfg)
        assert cli.main(["train", "--kind", "classifier", "--config", path]) == 0


class TestExplain:
    def _cfg(self, trained, tmp_path, **query):
        tmp, cfg = trained
        return {**cfg, "output": {"directory": str(tmp_path / "out"), "stride": 5},
                "query": {"count": 2, "max_steps": 200, **query}}

    def test_latent_outputs(self, trained, tmp_path):
        cfg = self._cfg(trained, tmp_path)
        code = cli.main(["explain", "--config", write_config(tmp_path / "c.json", cfg)])
        assert code in (0, 3)
        qdirs = sorted(p for p in (tmp_path / "out").iterdir() if p.is_dir())
        assert len(qdirs) == 2
        for q in qdirs:
            assert (q / "montage.pgm").exists()
            rec = parse_summary((q / "summary.json").read_text())
            assert rec["mode"] == "criticism"
        lines = (tmp_path / "out" / "summary.jsonl").read_text().splitlines()
        outcomes = [json.loads(line)["outcome"] for line in lines]
        assert code == (0 if all(o == "success" for o in outcomes) else 3)

    def test_target_equal_to_current_class(self, trained, tmp_path, capsys):
        tmp, cfg = trained
        from cfintro import checkpoint, datasets
        clf = checkpoint.load_checkpoint(tmp / "ckpt" / "classifier.cfxm")
        data = datasets.sample_dataset(datasets.GlyphDatasetConfig(n_samples=300))
        pred = int(clf.predict(data.images[200]))
        cfg = self._cfg(trained, tmp_path, indices=[0], target_class=pred)
        assert cli.main(["explain", "--config", write_config(tmp_path / "c.json", cfg)]) == 2
        assert "target" in capsys.readouterr().err

    def test_frozen_attribute_stays_fixed(self, trained, tmp_path):
        cfg = self._cfg(trained, tmp_path, space="attribute", frozen=["size"], indices=[3])
        cli.main(["explain", "--config", write_config(tmp_path / "c.json", cfg)])
        rows = [json.loads(line) for line in
                (tmp_path / "out" / "q00003" / "trajectory.jsonl").read_text().splitlines()]
        sizes = {r["variables"][0] for r in rows if "variables" in r}
        assert len(sizes) == 1

    def test_unknown_frozen_name(self, trained, tmp_path):
        cfg = self._cfg(trained, tmp_path, space="attribute", frozen=["colour"], indices=[3])
        assert cli.main(["explain", "--config", write_config(tmp_path / "c.json", cfg)]) == 2

    def test_prototype(self, trained, tmp_path):
        cfg = self._cfg(trained, tmp_path, count=1)
        code = cli.main(["prototype", "--config", write_config(tmp_path / "c.json", cfg)])
        assert code in (0, 3)
        rec = json.loads((tmp_path / "out" / "summary.jsonl").read_text())
        assert rec["mode"] == "prototype"

    def test_resolved_config_reruns_identically(self, trained, tmp_path):
        cfg = self._cfg(trained, tmp_path, count=1)
        cli.main(["explain", "--config", write_config(tmp_path / "c.json", cfg), "--seed", "4"])
        first = (tmp_path / "out" / "summary.jsonl").read_text()
        echoed = json.loads((tmp_path / "out" / "resolved_config.json").read_text())
        echoed["output"]["directory"] = str(tmp_path / "again")
        cli.main(["explain", "--config", write_config(tmp_path / "e.json", echoed)])
        assert (tmp_path / "again" / "summary.jsonl").read_text() == first

    def test_unwritable_output(self, trained, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        cfg = self._cfg(trained, tmp_path, count=1)
        cfg["output"]["directory"] = str(blocker / "out")
        assert cli.main(["explain", "--config", write_config(tmp_path / "c.json", cfg)]) == 4

    def test_missing_checkpoint(self, tmp_path):
        cfg = tiny(tmp_path)
        assert cli.main(["explain", "--config", write_config(tmp_path / "c.json", cfg)]) == 2


class TestMinimal:
    def test_shipped_fixture_matches_oracle(self, tmp_path):
        oracle = json.loads(ORACLE.read_text())
        cfg = json.loads((CONFIGS / "minimal_fixture.json").read_text())
        cfg["output"]["directory"] = str(tmp_path)
        assert cli.main(["minimal", "--config", write_config(tmp_path / "c.json", cfg)]) == 0
        rec = json.loads((tmp_path / "summary.jsonl").read_text())
        assert abs(rec["delta"] - oracle["delta_star"]) <= 0.10 * oracle["delta_star"]
        sweep = (tmp_path / "fixture" / "sweep.jsonl").read_text().splitlines()
        assert len(sweep) == len(rec["sweep"]) > 0

    def test_cap_exhausted(self, tmp_path):
        cfg = json.loads((CONFIGS / "minimal_fixture.json").read_text())
        cfg["output"]["directory"] = str(tmp_path)
        cfg["query"]["max_steps"] = 0
        assert cli.main(["minimal", "--config", write_config(tmp_path / "c.json", cfg)]) == 3
        rec = json.loads((tmp_path / "summary.jsonl").read_text())
        assert rec["outcome"] == "no_flip" and rec["sweep"]

    def test_inverted_bounds(self, tmp_path):
        cfg = json.loads((CONFIGS / "minimal_fixture.json").read_text())
        cfg["output"]["directory"] = str(tmp_path)
        cfg["query"].update(lambda_lo=2.0, lambda_hi=1.0)
        assert cli.main(["minimal", "--config", write_config(tmp_path / "c.json", cfg)]) == 2


class TestBiasReport:
    def test_csv(self, tmp_path):
        cfg = tiny(tmp_path)
        assert cli.main(["bias-report", "--config", write_config(tmp_path / "c.json", cfg)]) == 0
        lines = (tmp_path / "out" / "bias_report.csv").read_text().splitlines()
        assert lines[0] == "class,attribute,fraction,count"
        assert len(lines) == 1 + 2 * 5

    def test_class_filter(self, tmp_path):
        cfg = tiny(tmp_path, report={"classes": ["large"]})
        assert cli.main(["bias-report", "--config", write_config(tmp_path / "c.json", cfg)]) == 0
        rows = (tmp_path / "out" / "bias_report.csv").read_text().splitlines()[1:]
        assert all(r.startswith("large,") for r in rows)

    def test_empty_class_filter(self, tmp_path):
        cfg = tiny(tmp_path, report={"classes": []})
        assert cli.main(["bias-report", "--config", write_config(tmp_path / "c.json", cfg)]) == 2


class TestGradcheck:
    def test_passes(self, tmp_path):
        args = ["gradcheck", "--points", "5", "--composed-points", "2", "--output", str(tmp_path)]
        assert cli.main(args) == 0
        assert "PASS" in (tmp_path / "gradcheck.txt").read_text()

    def test_corrupt_vjp_fails(self, monkeypatch, capsys):
        monkeypatch.setattr(ad, "_vjp_exp", lambda g, x, y: (g * y * 1.01,))
        assert cli.main(["gradcheck", "--points", "5", "--composed-points", "1"]) == 3
        failing = [line for line in capsys.readouterr().out.splitlines() if "FAIL" in line]
        assert failing and all(line.split()[0] == "exp" for line in failing)


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.json")))
def test_shipped_configs_resolve(name):
    cfg = cli.resolve_config(cli.load_config(str(CONFIGS / name)))
    assert set(cfg) == set(cli.DEFAULTS)
