"""Tests for the command line front end and its reproducibility contract."""

import hashlib
import json

import pytest

import qparisi
from qparisi.cli import COMMANDS, ExperimentManifest, build_parser, main

ED_ARGS = ["ed", "--n", "2", "--samples", "4", "--seed", "7", "--beta", "0.9", "--b", "0.5"]

DETERMINISTIC_GUERRA = [
    "interp-guerra", "--n", "1", "--m-slices", "1", "--b", "0", "--c", "0",
    "--beta", "0.9", "--k", "2", "--m-values", "0,0.35,1",
    "--q-values", "0,0,0.6,0", "--samples", "4", "--seed", "1",
]


def run_cli(args, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    code = main(args)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestManifest:
    def test_round_trip(self):
        manifest = ExperimentManifest(
            command="ed",
            parameters={"n": 2, "beta": [0.9]},
            started="2024-01-01T00:00:00+00:00",
            finished="2024-01-01T00:00:01+00:00",
            version="0.1.0",
            result_format="csv",
            result_path=None,
            result_sha256="ab" * 32,
        )
        assert ExperimentManifest.from_json(manifest.to_json()) == manifest

    def test_every_run_writes_a_manifest(self, tmp_path, monkeypatch, capsys):
        code, out, _ = run_cli(ED_ARGS, tmp_path, monkeypatch, capsys)
        assert code == 0
        manifest = ExperimentManifest.from_json(
            (tmp_path / "ed.manifest.json").read_text()
        )
        assert manifest.command == "ed"
        assert manifest.version == qparisi.__version__
        assert manifest.result_path is None
        assert manifest.result_sha256 == hashlib.sha256(out.encode()).hexdigest()
        assert manifest.parameters["samples"] == 4
        assert manifest.parameters["seed"] == 7

    def test_rerun_reproduces_payload_bit_for_bit(self, tmp_path, monkeypatch, capsys):
        _, first, _ = run_cli(ED_ARGS, tmp_path, monkeypatch, capsys)
        sha_first = ExperimentManifest.from_json(
            (tmp_path / "ed.manifest.json").read_text()
        ).result_sha256
        _, second, _ = run_cli(ED_ARGS, tmp_path, monkeypatch, capsys)
        sha_second = ExperimentManifest.from_json(
            (tmp_path / "ed.manifest.json").read_text()
        ).result_sha256
        assert first == second
        assert sha_first == sha_second

    def test_out_file_matches_manifest_digest(self, tmp_path, monkeypatch, capsys):
        out_path = tmp_path / "run.csv"
        code, stdout, _ = run_cli(
            ED_ARGS + ["--out", str(out_path)], tmp_path, monkeypatch, capsys
        )
        assert code == 0
        assert stdout == ""  # payload went to the file, not the console
        payload = out_path.read_text()
        manifest = ExperimentManifest.from_json(
            (tmp_path / "run.csv.manifest.json").read_text()
        )
        assert manifest.result_path == str(out_path)
        assert manifest.result_sha256 == hashlib.sha256(payload.encode()).hexdigest()


class TestOptionResolution:
    def test_flags_beat_environment_beats_config(self, tmp_path, monkeypatch, capsys):
        config = tmp_path / "conf.txt"
        config.write_text("n = 3\nsamples = 4  # comment\nbeta = 0.7\n")
        base = ["ed", "--b", "0.5", "--config", str(config)]
        _, out_config, _ = run_cli(base, tmp_path, monkeypatch, capsys)
        assert out_config.splitlines()[1].split(",")[4] == "4"
        monkeypatch.setenv("QPARISI_SAMPLES", "6")
        _, out_env, _ = run_cli(base, tmp_path, monkeypatch, capsys)
        assert out_env.splitlines()[1].split(",")[4] == "6"
        _, out_flag, _ = run_cli(
            base + ["--samples", "8"], tmp_path, monkeypatch, capsys
        )
        assert out_flag.splitlines()[1].split(",")[4] == "8"
        # the config value for n survived all three runs
        for out in (out_config, out_env, out_flag):
            assert out.splitlines()[1].split(",")[0] == "3"

    def test_config_discovered_through_environment(self, tmp_path, monkeypatch, capsys):
        config = tmp_path / "conf.txt"
        config.write_text("samples = 5\n")
        monkeypatch.setenv("QPARISI_CONFIG", str(config))
        _, out, _ = run_cli(
            ["ed", "--n", "2", "--beta", "0.9", "--b", "0.5", "--seed", "7"],
            tmp_path, monkeypatch, capsys,
        )
        assert out.splitlines()[1].split(",")[4] == "5"

    def test_malformed_config_is_a_usage_error(self, tmp_path, monkeypatch, capsys):
        config = tmp_path / "broken.txt"
        config.write_text("this line has no equals sign\n")
        monkeypatch.chdir(tmp_path)
        with pytest.raises(SystemExit) as err:
            main(["ed", "--config", str(config)])
        assert err.value.code == 2

    def test_rejected_flag_values(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        with pytest.raises(SystemExit) as err:
            main(["ed", "--beta", "0", "--samples", "4"])
        assert err.value.code == 2
        with pytest.raises(SystemExit) as err:
            main(["ed", "--format", "xml"])
        assert err.value.code == 2
        with pytest.raises(SystemExit):
            main(["parisi-eval", "--q-values", "0,0.6,0.3,0", "--k", "2",
                  "--m-values", "0,0.4,1"])

    def test_every_command_is_registered(self):
        parser = build_parser()
        assert parser is not None
        assert set(COMMANDS) == {
            "ed", "pspin", "trotter-check", "selfoverlap-check", "parisi-eval",
            "parisi-opt", "hopflax", "interp-guerra", "interp-concentration",
            "interp-variance",
        }


class TestOutputFormats:
    def test_seventeen_digit_round_trip(self, tmp_path, monkeypatch, capsys):
        _, out, _ = run_cli(ED_ARGS, tmp_path, monkeypatch, capsys)
        cell = out.splitlines()[1].split(",")[1]
        assert cell == "0.90000000000000002"
        assert float(cell) == 0.9

    def test_json_rows(self, tmp_path, monkeypatch, capsys):
        _, out, _ = run_cli(
            ED_ARGS + ["--format", "json"], tmp_path, monkeypatch, capsys
        )
        body = json.loads(out)
        assert body["command"] == "ed"
        row = body["rows"][0]
        assert row["N"] == 2
        assert row["samples"] == 4
        assert isinstance(row["mean"], float)

    def test_trotter_columns_and_seed_echo(self, tmp_path, monkeypatch, capsys):
        code, out, _ = run_cli(
            ["trotter-check", "--n", "1,2", "--m-slices", "4,8", "--beta", "0.8",
             "--b", "0.5", "--seed", "3"],
            tmp_path, monkeypatch, capsys,
        )
        lines = out.splitlines()
        assert code == 0
        assert lines[0] == "N,M,beta,b,c,seed,log_Z_trotter,log_Z_exact,abs_error"
        assert len(lines) == 5
        assert all(line.split(",")[5] == "3" for line in lines[1:])

    def test_trotter_classical_short_circuit(self, tmp_path, monkeypatch, capsys):
        _, out, err = run_cli(
            ["trotter-check", "--n", "2", "--m-slices", "4,8", "--b", "0"],
            tmp_path, monkeypatch, capsys,
        )
        for line in out.splitlines()[1:]:
            assert line.split(",")[-1] == "0"
        assert "b = 0" in err

    def test_concentration_scan_columns(self, tmp_path, monkeypatch, capsys):
        code, out, _ = run_cli(
            ["interp-concentration", "--samples", "8", "--seed", "4", "--u", "0.4",
             "--n", "2,3"],
            tmp_path, monkeypatch, capsys,
        )
        lines = out.splitlines()
        assert code == 0
        assert lines[0] == "s,t,N,M,k,r,u,lambda,estimate,stderr,n_samples,seed"
        assert len(lines) == 3

    def test_variance_rows_per_size(self, tmp_path, monkeypatch, capsys):
        code, out, _ = run_cli(
            ["interp-variance", "--samples", "10", "--n", "2,3", "--seed", "4"],
            tmp_path, monkeypatch, capsys,
        )
        lines = out.splitlines()
        assert code == 0
        assert lines[0].startswith("t,N,M,thermal,")
        assert [line.split(",")[1] for line in lines[1:]] == ["2", "3"]

    def test_parisi_eval_record_schema(self, tmp_path, monkeypatch, capsys):
        code, out, _ = run_cli(
            ["parisi-eval", "--beta", "0.8", "--q-values", "0,0.35,0"],
            tmp_path, monkeypatch, capsys,
        )
        body = json.loads(out)
        assert code == 0
        for key in ("k", "m", "q", "y_profile", "beta", "b", "c", "M", "p",
                    "value", "residuals", "quad", "budget_used"):
            assert key in body
        assert body["quad"] == {"mode": "gauss", "nodes": 24, "seed": 0}
        assert body["budget_used"] == 0

    def test_record_flattens_to_csv(self, tmp_path, monkeypatch, capsys):
        _, out, _ = run_cli(
            ["parisi-eval", "--beta", "0.8", "--q-values", "0,0.35,0",
             "--format", "csv"],
            tmp_path, monkeypatch, capsys,
        )
        lines = out.splitlines()
        assert lines[0] == "key,value"
        assert any(line.startswith("quad.mode,gauss") for line in lines)
        assert any(line.startswith("value,") for line in lines)


class TestCommandBehavior:
    def test_pspin_rows_cover_all_overlaps(self, tmp_path, monkeypatch, capsys):
        code, out, _ = run_cli(
            ["pspin", "--n", "4", "--p", "2", "--samples", "600", "--seed", "5"],
            tmp_path, monkeypatch, capsys,
        )
        lines = out.splitlines()
        assert code == 0
        assert len(lines) == 6  # header + one row per agreement count
        overlaps = [float(line.split(",")[2]) for line in lines[1:]]
        assert overlaps == sorted(overlaps)

    def test_selfoverlap_check_gap_columns(self, tmp_path, monkeypatch, capsys):
        code, out, _ = run_cli(
            ["selfoverlap-check", "--samples", "2", "--inner-samples", "2000",
             "--seed", "11"],
            tmp_path, monkeypatch, capsys,
        )
        lines = out.splitlines()
        assert code == 0
        assert lines[0].endswith("gap_sigmas,stderr_log,flagged")
        assert len(lines) == 5  # two temperatures x two draws

    def test_hopflax_classical_closed_form(self, tmp_path, monkeypatch, capsys):
        code, out, _ = run_cli(
            ["hopflax", "--beta", "0.8", "--k", "1", "--budget", "80",
             "--inner-budget", "300"],
            tmp_path, monkeypatch, capsys,
        )
        body = json.loads(out)
        assert code == 0
        assert body["converged"] is True
        assert body["value"] == pytest.approx(0.8531471805599453, abs=1e-6)

    def test_guerra_exact_case_exits_clean(self, tmp_path, monkeypatch, capsys):
        code, out, _ = run_cli(
            DETERMINISTIC_GUERRA + ["--nodes", "48"], tmp_path, monkeypatch, capsys
        )
        body = json.loads(out)
        assert code == 0
        assert body["flagged"] is False
        assert body["difference"]["stderr"] == 0.0
        assert abs(body["difference"]["mean"]) < 1e-8

    def test_flagged_estimator_failure_exits_nonzero(self, tmp_path, monkeypatch, capsys):
        # same deterministic identity, but a quadrature too coarse to close
        # the books: the residual is real and the run must flag it
        code, out, _ = run_cli(
            DETERMINISTIC_GUERRA + ["--nodes", "4"], tmp_path, monkeypatch, capsys
        )
        body = json.loads(out)
        assert code == 1
        assert body["flagged"] is True
        assert abs(body["difference"]["mean"]) > 1e-8

    def test_worker_count_does_not_change_results(self, tmp_path, monkeypatch, capsys):
        args = ["interp-variance", "--samples", "12", "--n", "2", "--seed", "9"]
        _, serial, _ = run_cli(args + ["--workers", "1"], tmp_path, monkeypatch, capsys)
        _, threaded, _ = run_cli(args + ["--workers", "2"], tmp_path, monkeypatch, capsys)
        assert serial == threaded
