import csv
import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lysep import cli, harness
from lysep.harness import ConfigError, RunConfig, RunSummary
from lysep.metrics import CSV_HEADER, IterRecord, NumericalAbort, accuracy, should_log

SMALL = dict(dataset="circle", n_train=60, n_test=30, iters=4, log_every=2, depth=3, width=4)


def small(**kw):
    return RunConfig(**{**SMALL, **kw})


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestAccuracy:
    def test_perfect_and_inverted(self, rng):
        a = np.eye(2)[:, rng.integers(0, 2, 30)]
        assert accuracy(a, a) == 1.0
        assert accuracy(-a, a) == 0.0

    @given(st.integers(0, 2**32 - 1), st.integers(2, 5), st.integers(1, 40))
    def test_loop_oracle(self, seed, J, N):
        r = np.random.default_rng(seed)
        z = r.integers(-2, 3, size=(J, N)).astype(float)  # ties are common
        a = np.eye(J)[:, r.integers(0, J, N)]
        hits = 0
        for n in range(N):
            best = 0
            for j in range(1, J):
                if z[j, n] > z[best, n]:
                    best = j
            hits += a[best, n] == 1
        assert accuracy(z, a) == hits / N

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            accuracy(np.zeros((2, 3)), np.zeros((3, 3)))


def test_log_cadence():
    assert [k for k in range(1, 26) if should_log(k, 25, 10)] == [10, 20, 25]
    assert [k for k in range(1, 4) if should_log(k, 3, 0)] == [3]


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            dict(model="svm"),
            dict(dataset="cifar"),
            dict(activation="relu6"),
            dict(iters=0),
            dict(depth=1),
            dict(eta=1.5),
            dict(tau0=0.0),
            dict(tau_mode="grow"),
            dict(omega_mode="never"),
            dict(model="ce-fnn", lr=-0.1),
            dict(model="lysep-cnn"),
            dict(dataset="allen-cahn", ac_time=0.5),
            dict(dataset="mnist"),
            dict(batch=10),
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            small(**kw).validate()

    def test_all_errors_reported(self):
        errs = RunConfig(model="x", dataset="y", iters=0).errors()
        assert len(errs) == 3

    def test_defaults_valid(self):
        RunConfig().validate()
        assert RunConfig(model="ce-fnn").effective_lr() == harness.DEFAULT_LR["ce-fnn"]

    def test_mapping_conversion(self):
        cfg = harness.config_from_mapping({"model": "ce-fnn", "lr": "0.25", "check-monotone": "yes", "batch": "none"})
        assert cfg.lr == 0.25 and cfg.check_monotone is True and cfg.batch is None

    def test_mapping_errors(self):
        with pytest.raises(ConfigError) as exc:
            harness.config_from_mapping({"nonsense": "1", "iters": "many", "check_monotone": "perhaps"})
        assert len(exc.value.errors) == 3

    def test_file_round_trip(self, tmp_path):
        cfg = small(model="ce-fnn", lr=0.3, batch=None)
        harness.write_config_file(tmp_path / "c.cfg", cfg)
        assert harness.config_from_mapping(harness.read_config_file(tmp_path / "c.cfg")) == cfg

    def test_file_comments_and_syntax(self, tmp_path):
        (tmp_path / "c.cfg").write_text("# header\nmodel = ce-fnn  # inline\n\niters=7\n")
        assert harness.read_config_file(tmp_path / "c.cfg") == {"model": "ce-fnn", "iters": "7"}
        (tmp_path / "bad.cfg").write_text("model ce-fnn\n")
        with pytest.raises(ConfigError):
            harness.read_config_file(tmp_path / "bad.cfg")

    def test_hash_ignores_seed(self):
        assert small(seed=1).config_hash() == small(seed=2).config_hash()
        assert small(width=5).config_hash() != small().config_hash()


class TestRun:
    def test_header_and_single_row(self, tmp_path):
        harness.run(small(model="ce-fnn", iters=1), tmp_path / "log.csv")
        rows = read_rows(tmp_path / "log.csv")
        assert tuple(rows[0]) == CSV_HEADER == (
            "iter", "ce_loss", "surrogate_loss", "train_acc", "test_acc", "elapsed_ms", "min_tau_used",
        )
        assert len(rows) == 2 and rows[1][0] == "1"
        assert rows[1][2] == "" and rows[1][6] == ""  # baselines have no surrogate or step size

    def test_lysep_row_fields(self, tmp_path):
        res = harness.run(small(), tmp_path / "log.csv")
        rows = read_rows(tmp_path / "log.csv")
        assert [r[0] for r in rows[1:]] == ["2", "4"]
        for r in rows[1:]:
            assert float(r[2]) > 0 and 0 <= float(r[3]) <= 1 and 0 <= float(r[4]) <= 1 and float(r[6]) > 0
        assert res.monotone_violations == []

    def test_deterministic_modulo_time(self, tmp_path):
        for name in ("a", "b"):
            harness.run(small(), tmp_path / name)
        strip = lambda rows: [r[:5] + r[6:] for r in rows]  # noqa: E731
        assert strip(read_rows(tmp_path / "a")) == strip(read_rows(tmp_path / "b"))

    def test_seed_changes_init(self):
        a = harness.run(small(seed=0)).final
        b = harness.run(small(seed=1)).final
        assert a.ce_loss != b.ce_loss

    def test_abort_keeps_earlier_rows(self, tmp_path, monkeypatch):
        def boom(*args, **kw):
            on_record = args[5]
            on_record(IterRecord(1, 0.5, 0.4, 0.5))
            raise NumericalAbort("non-finite value in W_1", {"where": "W_1"})

        monkeypatch.setattr(harness, "train_lysep_fnn", boom)
        with pytest.raises(NumericalAbort):
            harness.run(small(), tmp_path / "log.csv")
        assert len(read_rows(tmp_path / "log.csv")) == 2

    def test_config_error_before_compute(self, tmp_path):
        with pytest.raises(ConfigError):
            harness.run(small(iters=0), tmp_path / "log.csv")
        assert not (tmp_path / "log.csv").exists()

    def test_surrogate_violations(self):
        logs = [IterRecord(1, 1, 1.0), IterRecord(2, 1, 0.9), IterRecord(3, 1, 0.95), IterRecord(4, 1, 2.0, batch_index=1)]
        assert harness.surrogate_violations(logs) == [3]


class TestBench:
    def test_summary_statistics(self, tmp_path):
        s = harness.bench(small(), [0, 1, 2], tmp_path)
        finals = [harness.run(dataclasses.replace(small(), seed=k)).final for k in (0, 1, 2)]
        ce = [f.ce_loss for f in finals]
        assert math.isclose(s.mean("ce_loss"), np.mean(ce), rel_tol=1e-12)
        assert math.isclose(s.std("ce_loss"), np.std(ce, ddof=1), rel_tol=1e-9)
        assert s.std_defined and sorted(p.name for p in tmp_path.iterdir())[0] == "lysep-fnn_seed0.csv"

    def test_single_seed_flags_std(self):
        s = harness.bench(small(), [5])
        assert not s.std_defined and s.std("train_acc") == 0.0

    def test_duplicate_seeds(self):
        with pytest.raises(ConfigError):
            harness.bench(small(), [1, 1])

    def test_failed_seed_reported(self, monkeypatch):
        real = harness.run

        def flaky(cfg, *a, **kw):
            if cfg.seed == 1:
                raise NumericalAbort("non-finite")
            return real(cfg, *a, **kw)

        monkeypatch.setattr(harness, "run", flaky)
        with pytest.warns(UserWarning):
            s = harness.bench(small(), [0, 1])
        assert s.seeds == [0] and 1 in s.failed

    def test_json_round_trip(self):
        s = harness.bench(small(), [0, 1])
        t = RunSummary.from_json(s.to_json())
        assert t == s and json.loads(s.to_json())["config_hash"] == s.config_hash


class TestReport:
    def test_number_formats(self):
        assert harness.fmt_sci(0.006751) == "6.75e-03"
        assert harness.fmt_pct(0.99833) == "99.83%"

    def test_golden_layout(self):
        a = RunSummary(RunConfig(model="ce-fnn"), [0, 1, 2], {"ce_loss": [0.006751, 0.0012], "train_acc": [0.99833, 0.001]}, True, "x")
        b = RunSummary(RunConfig(model="lysep-fnn"), [0, 1, 2], {"ce_loss": [0.0187, 0.0003], "train_acc": [0.9927, 0.0021]}, True, "x")
        c = RunSummary(RunConfig(model="lysep-fnn", depth=20), [0], {"ce_loss": [0.1, 0.0], "train_acc": [0.95, 0.0]}, False, "x")
        expected = (
            "Architecture  | Models     | Cross-entropy loss | Accuracy\n"
            "--------------+------------+--------------------+-------------\n"
            "(L,M)=(3,10)  | CE-FNN     | 6.75e-03±1.20e-03  | 99.83%±0.10%\n"
            "              | LySep-FNN  | 1.87e-02±3.00e-04  | 99.27%±0.21%\n"
            "--------------+------------+--------------------+-------------\n"
            "(L,M)=(20,10) | LySep-FNN* | 1.00e-01±0.00e+00  | 95.00%±0.00%\n"
            "* single seed: standard deviation undefined, shown as 0\n"
        )
        assert harness.report([a, b, c]) == expected

    def test_one_row(self):
        s = RunSummary(RunConfig(), [0, 1], {"ce_loss": [1.0, 0.5], "train_acc": [0.5, 0.1]}, True, "x")
        lines = harness.report([s]).splitlines()
        assert len(lines) == 3 and "1.00e+00±5.00e-01" in lines[2]

    def test_empty(self):
        with pytest.raises(ValueError):
            harness.report([])


class TestCli:
    def test_train_ok(self, tmp_path, capsys):
        code = cli.main(["train", "--dataset", "circle", "--n-train", "40", "--n-test", "20", "--iters", "3",
                         "--width", "4", "--out", str(tmp_path / "log.csv"), "--quiet"])
        assert code == 0 and "final:" in capsys.readouterr().out
        assert len(read_rows(tmp_path / "log.csv")) >= 2

    def test_config_file_with_override(self, tmp_path):
        (tmp_path / "c.cfg").write_text("dataset = circle\nn_train = 40\nn_test = 20\niters = 50\nwidth = 4\n")
        code = cli.main(["train", "--config", str(tmp_path / "c.cfg"), "--iters", "2", "--log-every", "1",
                         "--out", str(tmp_path / "log.csv"), "--quiet"])
        assert code == 0 and [r[0] for r in read_rows(tmp_path / "log.csv")[1:]] == ["1", "2"]

    def test_config_error_exit(self, capsys):
        assert cli.main(["train", "--iters", "0"]) == harness.EXIT_CONFIG
        assert "iters must be positive" in capsys.readouterr().err

    def test_bad_value_exit(self):
        assert cli.main(["train", "--iters", "lots"]) == harness.EXIT_CONFIG

    def test_numerical_abort_exit(self, monkeypatch):
        def boom(*a, **kw):
            raise NumericalAbort("non-finite value in c_1", {"where": "c_1"})

        monkeypatch.setattr(harness, "run", boom)
        assert cli.main(["train", "--iters", "2"]) == harness.EXIT_NUMERICAL

    def test_bench_and_report(self, tmp_path, capsys):
        summary = tmp_path / "s.json"
        code = cli.main(["bench", "--dataset", "circle", "--n-train", "40", "--n-test", "20", "--iters", "2",
                         "--width", "4", "--seeds", "0,1", "--summary", str(summary)])
        assert code == 0
        capsys.readouterr()
        assert cli.main(["report", str(summary), "--out", str(tmp_path / "t.txt")]) == 0
        assert "LySep-FNN" in (tmp_path / "t.txt").read_text()

    def test_bad_seed_list(self):
        assert cli.main(["bench", "--seeds", "0,x"]) == harness.EXIT_CONFIG

    def test_gen_data_round_trip(self, tmp_path):
        out = tmp_path / "train.lsds"
        assert cli.main(["gen-data", "--dataset", "circle", "--n-train", "25", "--n-test", "5", "--out", str(out)]) == 0
        cfg = small(data_cache=str(out), iters=1)
        assert harness.load_data(cfg)[0].n == 25

    def test_check_suite(self, capsys):
        assert cli.main(["check"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and out.count("PASS") >= 5
