import numpy as np
import pytest

from bigcf import cli
from bigcf.checkpoint import load_checkpoint, save_checkpoint
from bigcf.config import TrainConfig, parse_config, parse_config_text
from bigcf.errors import ConfigError, DataError, PersistenceError
from bigcf.evaluation import IntentExport
from bigcf.graphdata import write_dataset
from bigcf.synthetic import make_desk_dataset
from bigcf.training import Checkpoint, init_params

FAST = ["--epochs", "2", "--batch-size", "256", "--dim", "8", "--intents", "4"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    ds = make_desk_dataset(num_users=150, num_items=120, num_interactions=3000, num_topics=4,
                           seed=3)
    write_dataset(ds, d / "train.txt", d / "test.txt")
    return d


@pytest.fixture(scope="module")
def trained(data_dir):
    ck = data_dir / "model.ckpt"
    code = cli.main(["train", "--train-file", str(data_dir / "train.txt"),
                     "--test-file", str(data_dir / "test.txt"), "--checkpoint", str(ck), *FAST])
    assert code == 0
    return ck


def data_args(d):
    return ["--train-file", str(d / "train.txt"), "--test-file", str(d / "test.txt")]


class TestConfig:
    def test_defaults(self):
        c = parse_config()
        assert (c.dim, c.batch_size, c.layers, c.intents) == (32, 10240, 2, 64)
        assert (c.kappa, c.tau, c.lambda2) == (1.0, 0.2, 1e-5)

    def test_flag_beats_file(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("# sweep\nlambda1 = 0.5\ndim=16\n")
        c = parse_config({"lambda1": 0.2}, f)
        assert c.lambda1 == 0.2 and c.dim == 16 and c.layers == 2

    def test_variants(self):
        assert parse_config({"variant": "wo_gcr"}).variant == "wo_gcr"
        with pytest.raises(ConfigError, match="variant"):
            parse_config({"variant": "xyz"})

    @pytest.mark.parametrize("text,key", [("nope=1", "nope"), ("dim=-3", "dim"),
                                          ("tau=abc", "tau"), ("lambda1", "key=value")])
    def test_bad_input_names_key(self, text, key):
        with pytest.raises(ConfigError, match=key):
            TrainConfig(**parse_config_text(text))

    def test_echo_round_trip(self):
        c = TrainConfig(lambda1=0.3, variant="wo_ir", include_layer0=False)
        assert TrainConfig(**parse_config_text(c.echo())) == c

    def test_echo_lists_defaults(self):
        lines = set(TrainConfig().echo().splitlines())
        for want in ("dim=32", "batch_size=10240", "layers=2", "intents=64", "kappa=1.0",
                     "tau=0.2", "lambda2=1e-05"):
            assert want in lines


class TestCheckpoint:
    def make(self):
        cfg = TrainConfig(dim=6, intents=5, lambda1=0.3)
        return Checkpoint(7, 9, init_params(cfg, 7, 9, np.random.default_rng(0)), cfg)

    def test_bit_exact(self, tmp_path):
        ck = self.make()
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, ck)
        back = load_checkpoint(path)
        for k, v in ck.params.arrays().items():
            got = back.params.arrays()[k]
            assert got.dtype == v.dtype and got.tobytes() == v.tobytes()
        assert back.config == ck.config and (back.num_users, back.num_items) == (7, 9)

    def test_little_endian_header(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, self.make())
        raw = path.read_bytes()
        assert raw[:8] == b"BIGCFCKP" and raw[8:12] == (1).to_bytes(4, "little")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, self.make())
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(PersistenceError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, self.make())
        raw = bytearray(path.read_bytes())
        raw[8] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(PersistenceError, match="version"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, self.make())
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(PersistenceError, match="truncated"):
            load_checkpoint(path)

    def test_dimension_guard(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, self.make())
        with pytest.raises(DataError):
            load_checkpoint(path, expect_users=8, expect_items=9)


class TestCommands:
    def test_train_writes_log(self, data_dir, tmp_path, capsys):
        log = tmp_path / "log.txt"
        code = cli.main(["train", *data_args(data_dir), "--checkpoint", str(tmp_path / "m"),
                         "--out", str(log), *FAST])
        assert code == 0
        lines = log.read_text().splitlines()
        assert len(lines) == 2 and lines[0].startswith("epoch 1 bpr ")
        out = capsys.readouterr().out
        assert "batch_size=256" in out and "kappa=1.0" in out

    def test_evaluate_table(self, data_dir, trained, capsys):
        assert cli.main(["evaluate", *data_args(data_dir), "--checkpoint", str(trained)]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].split()[:4] == ["R@20", "R@40", "N@20", "N@40"]
        assert [l.split()[0] for l in out[1:]] == ["full", "sparse", "normal", "popular"]

    def test_export_sample(self, data_dir, trained, tmp_path):
        out = tmp_path / "i.csv"
        code = cli.main(["export-intents", *data_args(data_dir), "--checkpoint", str(trained),
                         "--out", str(out), "--sample", "100"])
        assert code == 0
        exp = IntentExport.read_csv(out)
        assert len(exp.users) == 100
        assert np.allclose(exp.scores.sum(axis=1), 1.0, atol=1e-6)

    def test_ablate_seven_rows(self, data_dir, tmp_path):
        out = tmp_path / "abl.txt"
        code = cli.main(["ablate", *data_args(data_dir), "--out", str(out), "--epochs", "1",
                         "--batch-size", "512", "--dim", "8", "--intents", "4"])
        assert code == 0
        rows = out.read_text().splitlines()[1:]
        assert len(rows) == 7 and rows[0].split()[0] == "full"

    def test_bench(self, data_dir, capsys):
        code = cli.main(["bench", *data_args(data_dir), "--repeats", "1", *FAST])
        assert code == 0 and "time ratio" in capsys.readouterr().out

    def test_bench_halves_edges_only(self, data_dir):
        ds = cli._dataset(cli.build_parser().parse_args(["bench", *data_args(data_dir)]))
        e1, t1, e2, t2 = cli.bench_scaling(ds, TrainConfig(dim=8, intents=4, batch_size=256),
                                           repeats=1)
        assert e2 == ds.num_train and abs(e2 / e1 - 2) < 0.1 and t1 > 0 and t2 > 0

    def test_synth(self, tmp_path):
        assert cli.main(["synth", "--out-dir", str(tmp_path), "--users", "30", "--items", "40",
                         "--interactions", "400"]) == 0
        assert (tmp_path / "train.txt").read_text().count("\n") == 30


class TestExitCodes:
    def test_usage_error(self, data_dir, capsys):
        with pytest.raises(SystemExit) as ei:
            cli.main(["train", *data_args(data_dir), "--checkpoint", "x", "--variant", "xyz"])
        assert ei.value.code == 1

    def test_bad_config_value(self, data_dir, tmp_path):
        assert cli.main(["train", *data_args(data_dir), "--checkpoint", str(tmp_path / "m"),
                         "--dim", "0"]) == 1

    def test_missing_file(self, tmp_path, trained):
        assert cli.main(["evaluate", "--train-file", str(tmp_path / "none"),
                         "--checkpoint", str(trained)]) == 2

    def test_bad_checkpoint(self, data_dir, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint at all")
        assert cli.main(["evaluate", *data_args(data_dir), "--checkpoint", str(bad)]) == 2

    def test_mismatched_checkpoint(self, tmp_path, trained):
        ds = make_desk_dataset(num_users=40, num_items=50, num_interactions=500, seed=1)
        write_dataset(ds, tmp_path / "a", tmp_path / "b")
        assert cli.main(["evaluate", "--train-file", str(tmp_path / "a"), "--test-file",
                         str(tmp_path / "b"), "--checkpoint", str(trained)]) == 2

    def test_numeric_failure_saves_last_good(self, data_dir, tmp_path, monkeypatch):
        from bigcf import training
        real = training.train_step
        calls = {"n": 0}

        def flaky(params, *a, **kw):
            calls["n"] += 1
            if calls["n"] == 3:
                params.E0[0, 0] = np.nan
            return real(params, *a, **kw)

        monkeypatch.setattr(training, "train_step", flaky)
        ck = tmp_path / "m"
        code = cli.main(["train", *data_args(data_dir), "--checkpoint", str(ck), *FAST])
        assert code == 3
        assert np.isfinite(load_checkpoint(ck).params.E0).all()
