import json

import numpy as np
import pytest

from dipolescan import cli
from dipolescan.experiments import ExperimentOutcome
from dipolescan.forward import random_spd
from dipolescan.matio import read_matrix, write_matrix

BASE_CONFIG = """\
# minimal certification config
experiment = eloreta
seed = 3
sensors = 6
grid_size = 4
"""


def _write_config(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestConfigParsing:
    def test_minimal_config(self, tmp_path):
        path = _write_config(tmp_path, BASE_CONFIG)
        config = cli.load_config(path, {})
        assert config.experiment == "eloreta"
        assert config.seed == 3
        assert config.sensors == 6
        assert config.grid_size == 4
        assert config.format == "both"

    def test_missing_experiment(self, tmp_path):
        path = _write_config(tmp_path, "sensors = 6\n")
        with pytest.raises(cli.ConfigError, match="experiment"):
            cli.load_config(path, {})

    def test_missing_sensors(self, tmp_path):
        path = _write_config(tmp_path, "experiment = thm1\n")
        with pytest.raises(cli.ConfigError, match="sensors"):
            cli.load_config(path, {})

    def test_unknown_key_names_line(self, tmp_path):
        path = _write_config(tmp_path, "experiment = thm1\nsensorz = 8\n")
        with pytest.raises(cli.ConfigError, match=r"line 2.*sensorz"):
            cli.load_config(path, {})

    def test_bad_value_names_field(self, tmp_path):
        path = _write_config(tmp_path, "experiment = thm1\nsensors = eight\n")
        with pytest.raises(cli.ConfigError, match="sensors"):
            cli.load_config(path, {})

    def test_nonpositive_sensors_rejected(self, tmp_path):
        path = _write_config(tmp_path, "experiment = thm1\nsensors = 0\n")
        with pytest.raises(cli.ConfigError, match="positive"):
            cli.load_config(path, {})

    def test_explicit_noise_requires_existing_path(self, tmp_path):
        text = "experiment = simulate\nsensors = 4\nnoise = explicit\nnoise_path = missing.txt\n"
        path = _write_config(tmp_path, text)
        with pytest.raises(cli.ConfigError, match="missing path"):
            cli.load_config(path, {})

    def test_sections_apply_per_experiment(self, tmp_path):
        text = (
            "experiment = thm1\nsensors = 8\ngrid_size = 7\n"
            "[eloreta]\ngrid_size = 5\n"
        )
        path = _write_config(tmp_path, text)
        assert cli.load_config(path, {}).grid_size == 7
        assert cli.load_config(path, {"experiment": "eloreta"}).grid_size == 5

    def test_flag_overrides_file(self, tmp_path):
        path = _write_config(tmp_path, BASE_CONFIG)
        config = cli.load_config(path, {"seed": 99, "format": "csv"})
        assert config.seed == 99
        assert config.format == "csv"

    def test_tolerance_override(self, tmp_path):
        path = _write_config(tmp_path, BASE_CONFIG + "tol.eloreta = 1e-7\n")
        config = cli.load_config(path, {})
        assert config.tolerance("eloreta") == 1e-7
        assert config.tolerance("thm1") == 1e-10

    def test_unknown_tolerance_rejected(self, tmp_path):
        path = _write_config(tmp_path, BASE_CONFIG + "tol.bogus = 1e-7\n")
        with pytest.raises(cli.ConfigError, match="bogus"):
            cli.load_config(path, {})


class TestEmitReport:
    def _outcome(self, **kwargs):
        defaults = dict(
            experiment="thm1",
            seed=5,
            instances=2,
            tolerance=1e-10,
            max_deviation=1e-14,
            passed=True,
            summary="ok",
            csv_header=["a", "b"],
            csv_rows=[[1, 2], [3, 4]],
            details={"note": "demo"},
        )
        defaults.update(kwargs)
        return ExperimentOutcome(**defaults)

    def test_both_formats_two_files(self, tmp_path):
        paths = cli.emit_report(self._outcome(), "both", tmp_path)
        assert len(paths) == 2
        assert {p.suffix for p in paths} == {".json", ".csv"}
        assert all(p.name.startswith("thm1-5") for p in paths)

    def test_single_format_one_file(self, tmp_path):
        assert len(cli.emit_report(self._outcome(), "csv", tmp_path)) == 1
        assert len(cli.emit_report(self._outcome(), "json", tmp_path)) == 1

    def test_empty_rows_header_only_csv(self, tmp_path):
        paths = cli.emit_report(self._outcome(csv_rows=[]), "csv", tmp_path)
        assert paths[0].read_text() == "a,b\n"

    def test_json_schema_fields(self, tmp_path):
        paths = cli.emit_report(self._outcome(), "json", tmp_path)
        payload = json.loads(paths[0].read_text())
        assert payload["theorem"] == "thm1"
        assert payload["instances"] == 2
        assert payload["tolerance"] == 1e-10
        assert payload["pass"] is True
        assert "max_deviation" in payload

    def test_idempotent_overwrite(self, tmp_path):
        first = cli.emit_report(self._outcome(), "both", tmp_path)
        before = [p.read_bytes() for p in first]
        second = cli.emit_report(self._outcome(), "both", tmp_path)
        after = [p.read_bytes() for p in second]
        assert before == after


class TestMainEndToEnd:
    def test_list_command(self, capsys):
        assert cli.main(["list"]) == 0
        out = capsys.readouterr().out
        for name in cli.EXPERIMENTS:
            assert name in out

    def test_run_eloreta_pass(self, tmp_path, capsys):
        path = _write_config(tmp_path, BASE_CONFIG + f"out_dir = {tmp_path / 'rep'}\n")
        assert cli.main(["run", "--config", str(path)]) == 0
        out = capsys.readouterr().out
        assert "[PASS]" in out
        assert (tmp_path / "rep" / "eloreta-3.json").exists()
        assert (tmp_path / "rep" / "eloreta-3.csv").exists()

    def test_exit_nonzero_on_tolerance_failure(self, tmp_path, capsys):
        text = BASE_CONFIG + f"out_dir = {tmp_path / 'rep'}\ntol.eloreta = 1e-300\n"
        path = _write_config(tmp_path, text)
        assert cli.main(["run", "--config", str(path)]) == 1
        out = capsys.readouterr().out
        assert "[FAIL]" in out

    def test_exit_two_on_malformed_config(self, tmp_path, capsys):
        path = _write_config(tmp_path, "experiment = thm1\n")  # sensors missing
        assert cli.main(["run", "--config", str(path)]) == 2
        err = capsys.readouterr().err
        assert "sensors" in err

    def test_seed_flag_changes_file_names(self, tmp_path):
        path = _write_config(tmp_path, BASE_CONFIG + f"out_dir = {tmp_path / 'rep'}\n")
        assert cli.main(["run", "--config", str(path), "--seed", "11"]) == 0
        assert (tmp_path / "rep" / "eloreta-11.json").exists()

    def test_rerun_byte_identical(self, tmp_path):
        cfg = (
            "experiment = scan\nseed = 2\nsensors = 6\ngrid_size = 5\n"
        )
        path = _write_config(tmp_path, cfg)
        assert cli.main(["run", "--config", str(path), "--out-dir", str(tmp_path / "a")]) == 0
        assert cli.main(["run", "--config", str(path), "--out-dir", str(tmp_path / "b")]) == 0
        for name in ("scan-2.json", "scan-2.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_simulate_writes_sample_matrix(self, tmp_path):
        cfg = "experiment = simulate\nseed = 4\nsensors = 5\nsamples = 64\ntol.sample_cov = 1.0\n"
        path = _write_config(tmp_path, cfg)
        assert cli.main(["run", "--config", str(path), "--out-dir", str(tmp_path / "rep")]) == 0
        sample_file = tmp_path / "rep" / "simulate-4-samples.txt"
        assert sample_file.exists()
        data = read_matrix(sample_file)
        assert data.shape == (5, 64)

    def test_explicit_noise_config(self, tmp_path):
        rng = np.random.default_rng(0)
        noise = random_spd(rng, 5)
        noise_path = tmp_path / "noise.txt"
        write_matrix(noise_path, noise)
        cfg = (
            "experiment = scan\nseed = 6\nsensors = 5\ngrid_size = 4\n"
            f"noise = explicit\nnoise_path = {noise_path}\n"
        )
        path = _write_config(tmp_path, cfg)
        assert cli.main(["run", "--config", str(path), "--out-dir", str(tmp_path / "rep")]) == 0

    def test_scalar_scan_run(self, tmp_path):
        cfg = "experiment = scan\nseed = 9\nsensors = 6\ngrid_size = 5\nk = 1\n"
        path = _write_config(tmp_path, cfg)
        assert cli.main(["run", "--config", str(path), "--out-dir", str(tmp_path / "rep")]) == 0
        payload = json.loads((tmp_path / "rep" / "scan-9.json").read_text())
        rows = payload["details"]["rows"]
        assert all(row["k"] == 1 for row in rows)
        # scalar candidates carry the unit-gain power, no trace-ratio value
        assert all(row["p_ug"] is not None for row in rows)
        assert all(row["nai_tilde"] is None for row in rows)
        assert payload["details"]["argmax"] == "truth"

    def test_thm1_reference_run(self, tmp_path):
        cfg = "experiment = thm1\nseed = 1\nsensors = 8\ngrid_size = 20\n"
        path = _write_config(tmp_path, cfg)
        assert cli.main(["run", "--config", str(path), "--out-dir", str(tmp_path / "rep")]) == 0
        payload = json.loads((tmp_path / "rep" / "thm1-1.json").read_text())
        assert payload["pass"] is True
        assert payload["max_deviation"] <= 1e-10

    def test_gradcheck_whitening_run(self, tmp_path):
        cfg = "experiment = gradcheck\nseed = 1\nsensors = 8\nmetric = inverse_noise\n"
        path = _write_config(tmp_path, cfg)
        assert cli.main(["run", "--config", str(path), "--out-dir", str(tmp_path / "rep")]) == 0
        payload = json.loads((tmp_path / "rep" / "gradcheck-1.json").read_text())
        assert payload["pass"] is True
        assert payload["details"]["mode"] == "zero-gradient"
        assert payload["max_deviation"] <= 1e-8

    def test_scan_csv_has_beamformer_columns(self, tmp_path):
        cfg = "experiment = scan\nseed = 2\nsensors = 6\ngrid_size = 5\n"
        path = _write_config(tmp_path, cfg)
        assert cli.main(["run", "--config", str(path), "--out-dir", str(tmp_path / "rep")]) == 0
        header = (tmp_path / "rep" / "scan-2.csv").read_text().splitlines()[0]
        assert header == "candidate_id,gof,sloreta_power,flags,p_ug,p_nai,p_sam,nai_tilde,k"
        payload = json.loads((tmp_path / "rep" / "scan-2.json").read_text())
        assert payload["details"]["argmax"] == "truth"
        assert payload["details"]["is_tie"] is False


class TestMatrixIO:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        mat = rng.standard_normal((4, 3)) * 10.0 ** rng.integers(-12, 12, size=(4, 3))
        path = tmp_path / "m.txt"
        write_matrix(path, mat)
        again = read_matrix(path)
        assert np.array_equal(again, mat)

    def test_reads_scientific_notation(self, tmp_path):
        path = tmp_path / "m.txt"
        path.write_text("2 2\n1e-3 2.5E+4\n-3.25e0 0.0\n")
        mat = read_matrix(path)
        assert np.array_equal(mat, np.array([[1e-3, 2.5e4], [-3.25, 0.0]]))

    def test_header_must_match(self, tmp_path):
        path = tmp_path / "m.txt"
        path.write_text("2 2\n1 2\n")
        with pytest.raises(ValueError, match="expected 2 data rows"):
            read_matrix(path)

    def test_row_width_checked(self, tmp_path):
        path = tmp_path / "m.txt"
        path.write_text("1 3\n1 2\n")
        with pytest.raises(ValueError, match="entries"):
            read_matrix(path)

    def test_vector_written_as_row(self, tmp_path):
        path = tmp_path / "v.txt"
        write_matrix(path, np.array([1.0, 2.0, 3.0]))
        assert read_matrix(path).shape == (1, 3)


class TestParallelism:
    def test_tool_threads_deterministic(self, monkeypatch):
        from dipolescan import experiments

        monkeypatch.delenv("TOOL_THREADS", raising=False)
        serial = experiments.run_thm1(3, 6, grid_size=4, instances=10)
        monkeypatch.setenv("TOOL_THREADS", "4")
        threaded = experiments.run_thm1(3, 6, grid_size=4, instances=10)
        assert serial.csv_rows == threaded.csv_rows
        assert serial.max_deviation == threaded.max_deviation

    def test_tool_threads_validation(self, monkeypatch):
        from dipolescan import experiments

        monkeypatch.setenv("TOOL_THREADS", "-1")
        with pytest.raises(ValueError, match="nonnegative"):
            experiments.thread_count()
        monkeypatch.setenv("TOOL_THREADS", "0")
        assert experiments.thread_count() >= 1
        monkeypatch.setenv("TOOL_THREADS", "3")
        assert experiments.thread_count() == 3
