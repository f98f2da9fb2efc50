"""Config-driven experiment runner.

Usage::

    dipolescan run --config experiment.cfg [--experiment E] [--seed S]
                   [--out-dir DIR] [--format csv|json|both]
    dipolescan list

Config files are flat ``key = value`` text; ``#`` lines are comments.  An
optional ``[experiment-name]`` section holds keys that apply only when that
experiment runs.  Flags override file values, file values override
defaults.  Reports land in ``out_dir`` as ``<experiment>-<seed>.<ext>`` and
are byte-identical across re-runs of the same config.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import experiments
from .matio import read_matrix, write_matrix

EXPERIMENTS = {
    "thm1": "standardized power equals data power times goodness of fit",
    "thm2-sufficiency": "whitening metrics localize the true source in expectation",
    "thm2-witness": "non-whitening metrics admit explicit bias witnesses",
    "thm4": "beamformer powers are monotone transforms of the whitened fit",
    "thm5": "trace-ratio beamformer power is biased (explicit construction)",
    "gradcheck": "noise-distortion gradient versus central finite differences",
    "eloreta": "fixed-point weights satisfy their defining equation",
    "scan": "full scan with beamformer columns on a covariance-derived vector",
    "simulate": "seeded sample generation with analytic covariance cross-check",
}

_METRIC_CHOICES = (
    "identity",
    "inverse_noise",
    "classic_sloreta",
    "sekihara_sloreta",
    "eloreta",
    "explicit",
    "mixed",
)
_NOISE_CHOICES = ("white", "random_spd", "explicit")
_FORMAT_CHOICES = ("csv", "json", "both")

_TOL_DEFAULTS = {
    "thm1": 1e-10,
    "gradcheck": 1e-5,
    "gradcheck_zero": 1e-8,
    "thm4": 1e-9,
    "thm4_transform": 1e-9,
    "eloreta": 1e-9,
    "sample_cov": 0.05,
    "thm5_refine_rate": 0.9,
}

_EXPERIMENT_DEFAULTS = {
    "thm2-sufficiency": {"grid_size": 50},
    "thm2-witness": {"metric": "mixed"},
    "thm4": {"k": 4},
    "eloreta": {"grid_size": 10},
    "scan": {"metric": "inverse_noise"},
    "gradcheck": {"metric": "explicit"},
}


class ConfigError(ValueError):
    """Malformed config file or invalid field value."""


@dataclass
class ExperimentConfig:
    experiment: str
    sensors: int
    seed: int = 1
    grid_size: int = 20
    k: int = 3
    metric: str = "identity"
    alpha: float = 0.0
    metric_path: str | None = None
    noise: str = "random_spd"
    sigma: float = 1.0
    noise_path: str | None = None
    samples: int = 20000
    out_dir: str = "reports"
    format: str = "both"
    tolerances: dict = field(default_factory=dict)

    def tolerance(self, name: str) -> float:
        return self.tolerances.get(name, _TOL_DEFAULTS[name])


def _parse_int(label: str, raw: str, positive: bool = True) -> int:
    try:
        value = int(raw)
    except ValueError as err:
        raise ConfigError(f"field '{label}' must be an integer, got {raw!r}") from err
    if positive and value <= 0:
        raise ConfigError(f"field '{label}' must be a positive integer, got {raw!r}")
    return value


def _parse_float(label: str, raw: str, *, nonnegative: bool = False, positive: bool = False) -> float:
    try:
        value = float(raw)
    except ValueError as err:
        raise ConfigError(f"field '{label}' must be a number, got {raw!r}") from err
    if positive and value <= 0.0:
        raise ConfigError(f"field '{label}' must be positive, got {raw!r}")
    if nonnegative and value < 0.0:
        raise ConfigError(f"field '{label}' must be nonnegative, got {raw!r}")
    return value


def _parse_choice(label: str, raw: str, choices) -> str:
    if raw not in choices:
        raise ConfigError(f"field '{label}' must be one of {', '.join(choices)}; got {raw!r}")
    return raw


def _parse_path(label: str, raw: str) -> str:
    if not Path(raw).exists():
        raise ConfigError(f"field '{label}' names a missing path: {raw!r}")
    return raw


_KEY_PARSERS = {
    "experiment": lambda raw: _parse_choice("experiment", raw, tuple(EXPERIMENTS)),
    "seed": lambda raw: _parse_int("seed", raw, positive=False),
    "sensors": lambda raw: _parse_int("sensors", raw),
    "grid_size": lambda raw: _parse_int("grid_size", raw),
    "k": lambda raw: _parse_int("k", raw),
    "metric": lambda raw: _parse_choice("metric", raw, _METRIC_CHOICES),
    "alpha": lambda raw: _parse_float("alpha", raw, nonnegative=True),
    "metric_path": lambda raw: _parse_path("metric_path", raw),
    "noise": lambda raw: _parse_choice("noise", raw, _NOISE_CHOICES),
    "sigma": lambda raw: _parse_float("sigma", raw, positive=True),
    "noise_path": lambda raw: _parse_path("noise_path", raw),
    "samples": lambda raw: _parse_int("samples", raw),
    "out_dir": lambda raw: raw,
    "format": lambda raw: _parse_choice("format", raw, _FORMAT_CHOICES),
}


def parse_config_text(text: str, label: str = "<config>") -> dict:
    """Parse the flat key=value format with optional [experiment] sections."""
    data: dict = {"": {}}
    section = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in EXPERIMENTS:
                raise ConfigError(f"{label} line {lineno}: unknown section {section!r}")
            data.setdefault(section, {})
            continue
        if "=" not in stripped:
            raise ConfigError(f"{label} line {lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if not key:
            raise ConfigError(f"{label} line {lineno}: empty key")
        if key.startswith("tol."):
            name = key[4:]
            if name not in _TOL_DEFAULTS:
                raise ConfigError(f"{label} line {lineno}: unknown tolerance {name!r}")
        elif key not in _KEY_PARSERS:
            raise ConfigError(f"{label} line {lineno}: unknown key {key!r}")
        data[section][key] = (raw, lineno)
    return data


def resolve_config(data: dict, overrides: dict, label: str = "<config>") -> ExperimentConfig:
    """Merge file values, experiment defaults and flag overrides."""
    flat = dict(data.get("", {}))
    experiment_raw = overrides.get("experiment") or (
        flat.get("experiment", (None, 0))[0]
    )
    if experiment_raw is None:
        raise ConfigError(f"{label}: missing required field 'experiment'")
    experiment = _KEY_PARSERS["experiment"](experiment_raw)
    flat.update(data.get(experiment, {}))
    for key, value in overrides.items():
        if value is not None:
            flat[key] = (str(value), 0)

    values: dict = dict(_EXPERIMENT_DEFAULTS.get(experiment, {}))
    tolerances: dict = {}
    for key, (raw, lineno) in flat.items():
        where = f"{label} line {lineno}" if lineno else "flag"
        try:
            if key.startswith("tol."):
                tolerances[key[4:]] = _parse_float(key, raw, positive=True)
            else:
                values[key] = _KEY_PARSERS[key](raw)
        except ConfigError as err:
            raise ConfigError(f"{where}: {err}") from None
    values["experiment"] = experiment
    if "sensors" not in values:
        raise ConfigError(f"{label}: missing required field 'sensors'")
    if values.get("noise") == "explicit" and "noise_path" not in values:
        raise ConfigError(f"{label}: noise=explicit requires field 'noise_path'")
    if values.get("metric") == "explicit" and "metric_path" not in values:
        raise ConfigError(f"{label}: metric=explicit requires field 'metric_path'")
    return ExperimentConfig(tolerances=tolerances, **values)


def load_config(path, overrides: dict) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return resolve_config(parse_config_text(text, str(path)), overrides, str(path))


def _noise_kwargs(config: ExperimentConfig) -> dict:
    kwargs = {"noise": config.noise, "noise_sigma": config.sigma}
    if config.noise == "explicit":
        kwargs["noise"] = "random_spd"  # overridden by the explicit matrix
        kwargs["noise_cov"] = read_matrix(config.noise_path)
    return kwargs


def dispatch(config: ExperimentConfig) -> experiments.ExperimentOutcome:
    name = config.experiment
    if name == "thm1":
        return experiments.run_thm1(
            config.seed,
            config.sensors,
            config.grid_size,
            tolerance=config.tolerance("thm1"),
        )
    if name == "thm2-sufficiency":
        return experiments.run_thm2_sufficiency(
            config.seed, config.sensors, config.grid_size, **_noise_kwargs(config)
        )
    if name == "thm2-witness":
        return experiments.run_thm2_witness(
            config.seed, config.sensors, metric_kind=config.metric
        )
    if name == "thm4":
        return experiments.run_thm4(
            config.seed,
            config.sensors,
            config.grid_size,
            k_max=config.k,
            tolerance=config.tolerance("thm4"),
            transform_tolerance=config.tolerance("thm4_transform"),
        )
    if name == "thm5":
        return experiments.run_thm5(
            config.seed,
            config.sensors,
            min_refine_rate=config.tolerance("thm5_refine_rate"),
        )
    if name == "gradcheck":
        return experiments.run_gradcheck(
            config.seed,
            config.sensors,
            metric_kind=config.metric,
            tolerance=config.tolerance("gradcheck"),
            zero_tolerance=config.tolerance("gradcheck_zero"),
        )
    if name == "eloreta":
        return experiments.run_eloreta(
            config.seed,
            config.sensors,
            max_blocks=config.grid_size,
            tolerance=config.tolerance("eloreta"),
        )
    if name == "scan":
        metric_matrix = read_matrix(config.metric_path) if config.metric == "explicit" else None
        return experiments.run_scan(
            config.seed,
            config.sensors,
            config.grid_size,
            k=config.k,
            metric_kind=config.metric,
            alpha=config.alpha,
            metric_matrix=metric_matrix,
            **_noise_kwargs(config),
        )
    if name == "simulate":
        return experiments.run_simulate(
            config.seed,
            config.sensors,
            samples=config.samples,
            tolerance=config.tolerance("sample_cov"),
            **_noise_kwargs(config),
        )
    raise ConfigError(f"unknown experiment {name!r}")


def _to_jsonable(value):
    if isinstance(value, dict):
        return {str(k): _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_jsonable(v) for v in value]
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return [_to_jsonable(v) for v in value.tolist()]
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def emit_report(outcome: experiments.ExperimentOutcome, fmt: str, out_dir) -> list[Path]:
    """Write the report files; overwrites are idempotent and byte-stable."""
    directory = Path(out_dir)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise ConfigError(f"cannot create output directory {out_dir}: {err}") from err
    stem = f"{outcome.experiment}-{outcome.seed}"
    written: list[Path] = []
    if fmt in ("json", "both"):
        payload = {
            "theorem": outcome.experiment,
            "seed": outcome.seed,
            "instances": outcome.instances,
            "max_deviation": _to_jsonable(outcome.max_deviation),
            "tolerance": _to_jsonable(outcome.tolerance),
            "pass": outcome.passed,
            "summary": outcome.summary,
            "details": _to_jsonable(outcome.details),
        }
        path = directory / f"{stem}.json"
        path.write_text(json.dumps(payload, indent=2) + "\n")
        written.append(path)
    if fmt in ("csv", "both"):
        if outcome.csv_text is not None:
            text = outcome.csv_text
        else:
            buf = io.StringIO()
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerow(outcome.csv_header)
            for row in outcome.csv_rows:
                writer.writerow(row)
            text = buf.getvalue()
        path = directory / f"{stem}.csv"
        path.write_text(text)
        written.append(path)
    for name, matrix in outcome.artifacts.items():
        path = directory / f"{stem}-{name}.txt"
        write_matrix(path, matrix)
        written.append(path)
    return written


def run(config: ExperimentConfig) -> int:
    outcome = dispatch(config)
    paths = emit_report(outcome, config.format, config.out_dir)
    status = "PASS" if outcome.passed else "FAIL"
    print(f"[{status}] {outcome.summary}")
    if not outcome.passed and "first_failure" in outcome.details:
        print(f"  first failing instance: {outcome.details['first_failure']}")
    for path in paths:
        print(f"  wrote {path}")
    return 0 if outcome.passed else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dipolescan", description="Run scanning/beamforming certification experiments."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run_parser = sub.add_parser("run", help="run one experiment from a config file")
    run_parser.add_argument("--config", required=True, help="path to the config file")
    run_parser.add_argument("--experiment", choices=tuple(EXPERIMENTS), default=None)
    run_parser.add_argument("--seed", type=int, default=None)
    run_parser.add_argument("--out-dir", dest="out_dir", default=None)
    run_parser.add_argument("--format", choices=_FORMAT_CHOICES, default=None)
    sub.add_parser("list", help="list available experiments")
    args = parser.parse_args(argv)

    if args.command == "list":
        for name, blurb in EXPERIMENTS.items():
            print(f"{name:18s} {blurb}")
        return 0

    overrides = {
        "experiment": args.experiment,
        "seed": args.seed,
        "out_dir": args.out_dir,
        "format": args.format,
    }
    try:
        config = load_config(args.config, overrides)
        return run(config)
    except ValueError as err:
        # ConfigError plus invalid experiment/field combinations surfaced
        # by the runners (e.g. an eloreta metric on one-column candidates)
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
