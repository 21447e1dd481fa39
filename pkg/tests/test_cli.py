import csv
import json

import jsonschema
import numpy as np
import pytest

from fei import cli
from fei.config import load_config, parse_config, suggest
from fei.data import load_ucr_tsv
from fei.errors import ConfigError, NumericalError
from fei.evaluation import METRICS_SCHEMA, read_embedding_csv, ratio_distance_spearman

SMALL = """
seed = 3

[synth]
num_classes = 2
per_class = 30
length = 32
spacing = 2

[data]
train = "synth.tsv"
val_fraction = 0.2

[model]
architecture = "mlp"
d = 8
mlp_hidden = 16

[train]
max_epochs = 2
batch = 16

[eval]
max_iters = 3
data = "synth.tsv"
"""


@pytest.fixture
def workspace(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(SMALL)
    cli.cmd_synth(cfg, tmp_path / "synth.tsv")
    return tmp_path, cfg


def only_run(out, prefix):
    runs = [p for p in out.iterdir() if p.name.startswith(prefix)]
    assert len(runs) == 1
    return runs[0]


class TestConfig:
    def test_omitted_fields_take_table_defaults(self):
        t = parse_config({}).train
        assert (t.alpha, t.beta1, t.beta2, t.lr, t.batch, t.max_epochs) == (0.995, 0.0, 0.7, 0.0002, 512, 100)

    def test_unknown_key_suggests(self):
        with pytest.raises(ConfigError, match="lr_rate.*did you mean 'lr'"):
            parse_config({"train": {"lr_rate": 0.1}})
        assert suggest("lr_rate", ["lr", "alpha", "batch"])[0] == "lr"

    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            parse_config({"trian": {}})

    def test_bad_value_is_config_error(self):
        with pytest.raises(ConfigError):
            parse_config({"train": {"beta2": 1.5}})

    def test_relative_paths_resolve_next_to_config(self, tmp_path):
        (tmp_path / "c.toml").write_text('[data]\ntrain = "x.tsv"\n')
        assert load_config(tmp_path / "c.toml").data.train == str(tmp_path / "x.tsv")

    def test_exit_code_for_bad_key(self, tmp_path, capsys):
        (tmp_path / "c.toml").write_text("[train]\nlr_rate = 0.1\n")
        assert cli.main(["pretrain", "--config", str(tmp_path / "c.toml"), "--out", str(tmp_path)]) == 1
        assert "did you mean 'lr'" in capsys.readouterr().err


class TestSeed:
    def test_precedence(self, monkeypatch):
        monkeypatch.delenv("FEI_SEED", raising=False)
        assert cli.resolve_seed(None, None) == 0
        assert cli.resolve_seed(None, 5) == 5
        monkeypatch.setenv("FEI_SEED", "9")
        assert cli.resolve_seed(None, 5) == 9
        assert cli.resolve_seed(2, 5) == 2

    def test_bad_env(self, monkeypatch):
        monkeypatch.setenv("FEI_SEED", "abc")
        with pytest.raises(ConfigError):
            cli.resolve_seed(None)


class TestSynth:
    def test_full_size_file_and_ceiling(self, tmp_path, capsys):
        cfg = tmp_path / "s.toml"
        cfg.write_text("[synth]\nnum_classes = 4\nper_class = 500\nlength = 128\nnoise_std = 0.1\n")
        ceiling = cli.cmd_synth(cfg, tmp_path / "s.tsv")
        assert ceiling >= 0.99
        assert f"{ceiling:.4f}" in capsys.readouterr().out
        lines = (tmp_path / "s.tsv").read_text().splitlines()
        assert len(lines) == 2000
        ds = load_ucr_tsv(tmp_path / "s.tsv")
        assert ds.values.shape == (2000, 1, 128)

    def test_round_trip_lossless(self, workspace):
        from fei.data import make_synthetic_freq_dataset

        tmp, cfg = workspace
        ref = make_synthetic_freq_dataset(2, 30, 32, 0.1, seed=3, spacing=2)
        back = load_ucr_tsv(tmp / "synth.tsv")
        assert np.max(np.abs(back.values - ref.values)) < 1e-9
        np.testing.assert_array_equal(back.labels, ref.labels)


class TestPretrainEval:
    def test_pretrain_artifacts_and_repeatability(self, workspace):
        tmp, cfg = workspace
        a = cli.cmd_pretrain(cfg, out=tmp / "a")
        b = cli.cmd_pretrain(cfg, out=tmp / "b")
        for name in ("manifest.json", "losses.jsonl", "best.ckpt", "last.ckpt"):
            assert (a / name).is_file()
        assert (a / "losses.jsonl").read_bytes() == (b / "losses.jsonl").read_bytes()
        manifest = json.loads((a / "manifest.json").read_text())
        assert manifest["command"] == "pretrain" and manifest["seed"] == 3
        assert manifest["config"]["train"]["alpha"] == 0.995
        assert a.name.startswith("pretrain-") and len(a.name.split("-")[-1]) == 8

    def test_eval_linear_and_finetune(self, workspace):
        tmp, cfg = workspace
        run = cli.cmd_pretrain(cfg, out=tmp / "p")
        ckpt = run / "best.ckpt"
        before = ckpt.read_bytes()

        lin = cli.cmd_eval(ckpt, tmp / "synth.tsv", "linear", cfg, out=tmp / "e")
        metrics = json.loads((lin / "metrics.json").read_text())
        jsonschema.validate(metrics, METRICS_SCHEMA)
        manifest = json.loads((lin / "manifest.json").read_text())
        assert manifest["checkpoint_sha256"] == cli.file_sha256(ckpt)
        assert ckpt.read_bytes() == before

        ft = cli.cmd_eval(ckpt, tmp / "synth.tsv", "finetune", cfg, {"max_iters": 2}, out=tmp / "f")
        jsonschema.validate(json.loads((ft / "metrics.json").read_text()), METRICS_SCHEMA)
        assert (ft / "finetuned.ckpt").is_file()
        assert ckpt.read_bytes() == before

    def test_eval_dimension_mismatch_exit_code(self, workspace, tmp_path_factory):
        tmp, cfg = workspace
        run = cli.cmd_pretrain(cfg, out=tmp / "p")
        other = tmp / "other.tsv"
        other.write_text("\n".join("0\t" + "\t".join(["0.5"] * 16) for _ in range(10)) + "\n")
        code = cli.main(["eval", "--ckpt", str(run / "best.ckpt"), "--data", str(other), "--out", str(tmp / "x")])
        assert code == 2

    def test_missing_dataset_exit_code(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text('[data]\ntrain = "nope.tsv"\n')
        assert cli.main(["pretrain", "--config", str(cfg), "--out", str(tmp_path)]) == 2

    def test_numerical_failure_exit_code(self, workspace, monkeypatch):
        tmp, cfg = workspace

        def boom(*a, **k):
            raise NumericalError("non-finite loss")

        monkeypatch.setattr(cli, "pretrain", boom)
        assert cli.main(["pretrain", "--config", str(cfg), "--out", str(tmp / "n")]) == 3


class TestAblateEmbed:
    def test_ablate_table(self, workspace):
        tmp, cfg = workspace
        run = cli.cmd_ablate(cfg, out=tmp / "abl")
        with open(run / "ablation.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 7
        assert rows[0]["model"] == "FEI"
        assert float(rows[0]["delta_accuracy"]) == 0.0
        assert all(r["status"] == "ok" for r in rows)

    def test_embed_exports(self, workspace):
        tmp, cfg = workspace
        pre = cli.cmd_pretrain(cfg, out=tmp / "p")
        run = cli.cmd_embed(pre / "best.ckpt", tmp / "synth.tsv", 5, seed=1, max_samples=1, out=tmp / "emb")
        rows, vecs = read_embedding_csv(run / "embeddings.csv")
        assert len(rows) == 1 + 5 * 2
        assert vecs.shape[1] == 4
        with open(run / "projection.csv") as fh:
            header = next(csv.reader(fh))
        assert header == ["sample_id", "mask_id", "mask_ratio", "role", "pc0", "pc1"]
        with open(run / "masks.csv") as fh:
            masks = list(csv.DictReader(fh))
        assert len(masks) == 5
        rng = np.random.default_rng(1)
        from fei import signal
        for m in masks:
            expected = signal.sample_mask("dfm", 32, 0.0, 0.7, rng)
            assert m["bits"] == "".join(map(str, expected))
        assert np.isfinite(ratio_distance_spearman(rows, vecs)) or len({r[2] for r in rows}) < 3
