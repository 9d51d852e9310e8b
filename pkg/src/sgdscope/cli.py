"""Command-line front end.

Usage: ``sgdscope <command> [--config FILE] [--key value ...]``.  Config
files are flat ``key = value`` text with ``#`` comments; command-line
flags override file values.  Every accepted key is listed by ``--help``
with its type, default, and constraint; unknown keys are hard errors.
All outputs are CSV or JSON files under ``out_dir`` plus a
``config.resolved`` echo of the effective configuration.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from .engine import (
    DivergenceError,
    EngineError,
    SgdConfig,
    gradient_flow,
    ou_eigenbasis_run,
    sgd_run,
    write_snapshots_csv,
    write_trajectory_csv,
)
from .estimators import EstimatorError, format_prediction_report, model_report, stationary_stats
from .experiments import (
    ExperimentError,
    clt_experiment,
    linear_scaling_experiment,
    saddle_divergence_experiment,
    scan_bs_lr,
    write_curves_csv,
    write_scan_csv,
)
from .linalg import LinAlgError, SymMatrix, read_matrix_csv, solve_lyapunov, trace, write_matrix_csv
from .problems import (
    ModelError,
    QuadraticModel,
    generate_blobs,
    make_logistic,
    make_mlp,
    make_quadratic,
    read_dataset_csv,
    write_dataset_csv,
)

__all__ = ["main", "parse_config", "render_help", "RunConfig", "ConfigError", "KEY_SPECS"]

COMMANDS = (
    "simulate",
    "flow",
    "ou",
    "scan",
    "scaling",
    "clt",
    "saddle",
    "estimate",
    "lyapunov",
    "gen-data",
)

WORKERS_ENV = "SGDSCOPE_WORKERS"


class ConfigError(ValueError):
    """Raised on malformed or out-of-range configuration input."""


@dataclass(frozen=True)
class KeySpec:
    name: str
    kind: str
    default: object
    constraint: str
    check: object = None
    choices: tuple = ()


def _spec_list(*specs: KeySpec) -> dict:
    return {spec.name: spec for spec in specs}


KEY_SPECS = _spec_list(
    KeySpec("command", "choice", None, "one of " + "|".join(COMMANDS), choices=COMMANDS),
    KeySpec("out_dir", "path", "outputs", "output directory (created if missing)"),
    KeySpec("master_seed", "int", None, "master_seed >= 0; absent: drawn and printed",
            check=lambda v: v >= 0),
    KeySpec("workers", "int", None, f"workers >= 1; absent: ${WORKERS_ENV}, then cpu count",
            check=lambda v: v >= 1),
    KeySpec("model", "choice", "quadratic", "one of quadratic|logistic|mlp",
            choices=("quadratic", "logistic", "mlp")),
    KeySpec("dim", "int", 2, "dim >= 1", check=lambda v: v >= 1),
    KeySpec("curvature_scale", "float", 1.0, "curvature_scale > 0", check=lambda v: v > 0),
    KeySpec("noise_scale", "float", 1.0, "noise_scale >= 0", check=lambda v: v >= 0),
    KeySpec("hessian_diag", "float_list", None, "comma-separated curvature eigenvalues"),
    KeySpec("noise_diag", "float_list", None, "comma-separated noise-covariance diagonal"),
    KeySpec("hessian_file", "path", None, "matrix CSV with a '# dim=<n>' header"),
    KeySpec("noise_file", "path", None, "matrix CSV with a '# dim=<n>' header"),
    KeySpec("dataset_file", "path", None, "dataset CSV (label,f0,...)"),
    KeySpec("l2_penalty", "float", 0.0, "l2_penalty >= 0", check=lambda v: v >= 0),
    KeySpec("hidden_dim", "int", 8, "hidden_dim >= 1", check=lambda v: v >= 1),
    KeySpec("class_count", "int", 2, "class_count >= 2", check=lambda v: v >= 2),
    KeySpec("model_seed", "int", 0, "model_seed >= 0", check=lambda v: v >= 0),
    KeySpec("theta0", "float_list", None, "comma-separated start point"),
    KeySpec("learning_rate", "float", 0.01, "learning_rate > 0", check=lambda v: v > 0),
    KeySpec("batch_size", "int", 1, "batch_size >= 1", check=lambda v: v >= 1),
    KeySpec("steps", "int", 10_000, "steps >= 1", check=lambda v: v >= 1),
    KeySpec("t_end", "float", 10.0, "t_end > 0", check=lambda v: v > 0),
    KeySpec("dt", "float", 0.01, "dt > 0", check=lambda v: v > 0),
    KeySpec("record_stride", "int", 0, "record_stride >= 0 (0 = auto)", check=lambda v: v >= 0),
    KeySpec("burn_in", "float", 0.5, "0 <= burn_in < 1", check=lambda v: 0 <= v < 1),
    KeySpec("snapshots", "bool", False, "true|false"),
    KeySpec("sampling", "choice", "with_replacement", "one of with_replacement|without_replacement",
            choices=("with_replacement", "without_replacement")),
    KeySpec("eigenvalues", "float_list", (1.0,), "comma-separated positive eigenvalues"),
    KeySpec("probe_count", "int", 64, "probe_count >= 2", check=lambda v: v >= 2),
    KeySpec("sample_count", "int", 10_000, "sample_count >= 2", check=lambda v: v >= 2),
    KeySpec("replicas", "int", 5, "replicas >= 1", check=lambda v: v >= 1),
    KeySpec("lr_list", "float_list", None, "scan grid learning rates (paired with bs_list)"),
    KeySpec("bs_list", "int_list", None, "scan grid batch sizes (paired with lr_list)"),
    KeySpec("base_lr", "float", None, "base_lr > 0", check=lambda v: v > 0),
    KeySpec("base_bs", "int", None, "base_bs >= 1", check=lambda v: v >= 1),
    KeySpec("factors", "float_list", (1.0, 2.0), "joint (lr, bs) scale factors"),
    KeySpec("off_lr_list", "float_list", (), "off-ratio learning rates (paired with off_bs_list)"),
    KeySpec("off_bs_list", "int_list", (), "off-ratio batch sizes (paired with off_lr_list)"),
    KeySpec("delta_list", "float_list", None, "strictly descending step sizes"),
    KeySpec("flow_t", "float", 50.0, "flow_t > 0", check=lambda v: v > 0),
    KeySpec("flow_dt", "float", 0.01, "flow_dt > 0", check=lambda v: v > 0),
    KeySpec("example_count", "int", 200, "example_count >= 2", check=lambda v: v >= 2),
    KeySpec("feature_dim", "int", 2, "feature_dim >= 1", check=lambda v: v >= 1),
    KeySpec("center_scale", "float", 0.6, "center_scale > 0", check=lambda v: v > 0),
)


class RunConfig:
    """Validated, fully-resolved configuration values."""

    def __init__(self, values: dict):
        self._values = dict(values)

    def __getattr__(self, name):
        try:
            return self._values[name]
        except KeyError:
            raise AttributeError(name) from None

    def resolved_lines(self) -> str:
        lines = []
        for name in sorted(self._values):
            value = self._values[name]
            if value is None:
                continue
            lines.append(f"{name} = {_format_value(value)}")
        return "\n".join(lines) + "\n"


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def _parse_value(spec: KeySpec, raw: str):
    raw = raw.strip()
    if spec.kind == "int":
        try:
            value = int(raw, 10)
        except ValueError:
            raise ConfigError(f"{spec.name} expects an integer, got {raw!r}") from None
    elif spec.kind == "float":
        try:
            value = float(raw)
        except ValueError:
            raise ConfigError(f"{spec.name} expects a number, got {raw!r}") from None
    elif spec.kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            value = True
        elif low in ("false", "0", "no", "off"):
            value = False
        else:
            raise ConfigError(f"{spec.name} expects true/false, got {raw!r}")
    elif spec.kind == "float_list":
        try:
            value = tuple(float(p) for p in raw.split(",") if p.strip())
        except ValueError:
            raise ConfigError(f"{spec.name} expects comma-separated numbers, got {raw!r}") from None
    elif spec.kind == "int_list":
        try:
            value = tuple(int(p, 10) for p in raw.split(",") if p.strip())
        except ValueError:
            raise ConfigError(f"{spec.name} expects comma-separated integers, got {raw!r}") from None
    elif spec.kind == "choice":
        if raw not in spec.choices:
            raise ConfigError(f"{spec.name} = {raw!r} violates {spec.constraint}")
        value = raw
    else:
        value = raw
    if spec.check is not None and not spec.check(value):
        raise ConfigError(f"{spec.name} = {raw} violates {spec.constraint}")
    return value


def _read_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {text!r}")
            key, _, raw = text.partition("=")
            key = key.strip()
            if key not in KEY_SPECS:
                raise ConfigError(f"{path}:{lineno}: unknown key: {key}")
            values[key] = raw.strip()
    return values


def render_help() -> str:
    lines = [
        "usage: sgdscope <command> [--config FILE] [--key value ...]",
        "",
        "commands: " + " | ".join(COMMANDS),
        "",
        "--config FILE reads a flat 'key = value' file (# comments); flags",
        "given on the command line override file values.  A leading bare",
        "word selects the command and wins over any 'command' key.",
        "",
        "keys:",
    ]
    for spec in KEY_SPECS.values():
        default = "(unset)" if spec.default is None else _format_value(spec.default)
        lines.append(f"  {spec.name:<16} {spec.kind:<11} default={default:<18} {spec.constraint}")
    return "\n".join(lines)


def parse_config(argv) -> RunConfig:
    """Merge defaults, the config file, and command-line overrides."""
    argv = list(argv)
    positional_command = None
    if argv and not argv[0].startswith("-"):
        positional_command = argv.pop(0)
        if positional_command not in COMMANDS:
            raise ConfigError(f"unknown command: {positional_command}")
    overrides = {}
    config_path = None
    i = 0
    while i < len(argv):
        token = argv[i]
        if not token.startswith("--"):
            raise ConfigError(f"expected --key, got {token!r}")
        key = token[2:]
        if i + 1 >= len(argv):
            raise ConfigError(f"missing value for --{key}")
        raw = argv[i + 1]
        i += 2
        if key == "config":
            config_path = raw
            continue
        if key not in KEY_SPECS:
            raise ConfigError(f"unknown key: {key}")
        overrides[key] = raw

    raw_values = _read_config_file(config_path) if config_path else {}
    if config_path:
        # Input paths in a config file resolve against the file's directory,
        # so bundled configs work from any working directory; out_dir and
        # command-line paths stay cwd-relative.
        base = os.path.dirname(os.path.abspath(config_path))
        for key in ("hessian_file", "noise_file", "dataset_file"):
            if key in raw_values:
                raw_values[key] = os.path.join(base, raw_values[key])
    raw_values.update(overrides)

    values = {name: spec.default for name, spec in KEY_SPECS.items()}
    for key, raw in raw_values.items():
        values[key] = _parse_value(KEY_SPECS[key], raw)
    if positional_command is not None:
        values["command"] = positional_command
    if values["command"] is None:
        raise ConfigError("no command given (positional argument or 'command = ...' key)")

    if values["workers"] is None:
        env = os.environ.get(WORKERS_ENV)
        if env is not None:
            values["workers"] = _parse_value(KEY_SPECS["workers"], env)
        else:
            values["workers"] = os.cpu_count() or 1
    if values["master_seed"] is None:
        values["master_seed"] = int(np.random.SeedSequence().entropy & ((1 << 63) - 1))
    return RunConfig(values)


# ---------------------------------------------------------------------------
# Model assembly


def _matrix_from_keys(cfg: RunConfig, file_key: str, diag_key: str, scale: float, dim: int):
    path = getattr(cfg, file_key)
    if path is not None:
        return read_matrix_csv(path)
    diag = getattr(cfg, diag_key)
    if diag is not None:
        return SymMatrix.diagonal(np.asarray(diag, dtype=float))
    return SymMatrix(scale * np.eye(dim))


def _build_model(cfg: RunConfig):
    if cfg.model == "quadratic":
        hessian = _matrix_from_keys(cfg, "hessian_file", "hessian_diag", cfg.curvature_scale, cfg.dim)
        noise = _matrix_from_keys(cfg, "noise_file", "noise_diag", cfg.noise_scale, hessian.dim)
        if noise.dim != hessian.dim:
            raise ConfigError(
                f"noise dimension {noise.dim} does not match curvature dimension {hessian.dim}"
            )
        return make_quadratic(hessian, np.zeros(hessian.dim), noise)
    if cfg.dataset_file is None:
        raise ConfigError(f"dataset_file is required for model={cfg.model}")
    features, labels = read_dataset_csv(cfg.dataset_file)
    if cfg.model == "logistic":
        return make_logistic(features, labels, cfg.l2_penalty)
    observed = int(labels.max()) + 1
    if observed > cfg.class_count:
        raise ConfigError(
            f"class_count = {cfg.class_count} but the dataset contains label {observed - 1}"
        )
    return make_mlp(features.shape[1], cfg.hidden_dim, cfg.class_count, (features, labels), cfg.model_seed)


def _start_point(cfg: RunConfig, model) -> np.ndarray:
    if cfg.theta0 is not None:
        theta = np.asarray(cfg.theta0, dtype=float)
        if theta.size != model.param_dim:
            raise ConfigError(f"theta0 has {theta.size} entries; the model needs {model.param_dim}")
        return theta
    init = getattr(model, "initial_params", None)
    if init is not None:
        return np.asarray(init, dtype=float)
    return np.zeros(model.param_dim)


def _auto_stride(cfg: RunConfig, total_steps: int) -> int:
    if cfg.record_stride > 0:
        return cfg.record_stride
    return max(1, total_steps // 10_000)


def _out(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.out_dir, name)


def _write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Command handlers (each returns the list of files it wrote)


def _cmd_simulate(cfg: RunConfig) -> list[str]:
    model = _build_model(cfg)
    run_cfg = SgdConfig(cfg.learning_rate, cfg.batch_size, cfg.steps, cfg.master_seed, cfg.sampling)
    traj = sgd_run(
        model, _start_point(cfg, model), run_cfg,
        record_stride=_auto_stride(cfg, cfg.steps), snapshots=cfg.snapshots,
    )
    written = [_out(cfg, "trajectory.csv")]
    write_trajectory_csv(written[0], traj)
    if traj.thetas is not None:
        path = _out(cfg, "snapshots.csv")
        write_snapshots_csv(path, traj)
        written.append(path)
    stats = stationary_stats(traj, cfg.burn_in)
    payload = {
        "mean_loss": stats.mean_loss,
        "mean_grad_norm_sq": stats.mean_grad_norm_sq,
        "sample_count": stats.sample_count,
        "burn_in": stats.burn_in_fraction,
        "excess_loss": None if model.risk_minimum is None else stats.mean_loss - model.risk_minimum,
    }
    path = _out(cfg, "simulate.json")
    _write_json(path, payload)
    written.append(path)
    return written


def _cmd_flow(cfg: RunConfig) -> list[str]:
    model = _build_model(cfg)
    steps = max(1, int(round(cfg.t_end / cfg.dt)))
    traj = gradient_flow(
        model, _start_point(cfg, model), cfg.t_end, cfg.dt,
        record_stride=_auto_stride(cfg, steps),
    )
    written = [_out(cfg, "trajectory.csv")]
    write_trajectory_csv(written[0], traj)
    if traj.thetas is not None:
        path = _out(cfg, "snapshots.csv")
        write_snapshots_csv(path, traj)
        written.append(path)
    path = _out(cfg, "flow.json")
    _write_json(path, {
        "final_loss": float(traj.losses[-1]),
        "final_grad_norm_sq": float(traj.grad_norms_sq[-1]),
        "t_end": float(traj.times[-1]),
    })
    written.append(path)
    return written


def _cmd_ou(cfg: RunConfig) -> list[str]:
    steps = max(1, int(round(cfg.t_end / cfg.dt)))
    traj = ou_eigenbasis_run(
        cfg.eigenvalues, cfg.learning_rate, cfg.batch_size, cfg.t_end, cfg.dt,
        cfg.master_seed, record_stride=_auto_stride(cfg, steps),
    )
    written = [_out(cfg, "trajectory.csv")]
    write_trajectory_csv(written[0], traj)
    stats = stationary_stats(traj, cfg.burn_in)
    lam = np.asarray(cfg.eigenvalues, dtype=float)
    payload = {
        "mean_loss": stats.mean_loss,
        "predicted_loss": cfg.learning_rate * float(lam.sum()) / (4.0 * cfg.batch_size),
        "predicted_variance": cfg.learning_rate / (2.0 * cfg.batch_size),
        "sample_count": stats.sample_count,
    }
    if traj.thetas is not None:
        mask = traj.steps >= cfg.burn_in * traj.steps[-1]
        payload["empirical_variance"] = traj.thetas[mask].var(axis=0).tolist()
    path = _out(cfg, "ou.json")
    _write_json(path, payload)
    written.append(path)
    return written


def _paired(cfg: RunConfig, lr_key: str, bs_key: str, required: bool):
    lrs = getattr(cfg, lr_key)
    bss = getattr(cfg, bs_key)
    if not lrs and not bss:
        if required:
            raise ConfigError(f"{lr_key} and {bs_key} are required for this command")
        return []
    if lrs is None or bss is None or len(lrs) != len(bss):
        raise ConfigError(f"{lr_key} and {bs_key} must be lists of equal length")
    return list(zip(lrs, bss))


def _cmd_scan(cfg: RunConfig) -> list[str]:
    model = _build_model(cfg)
    grid = _paired(cfg, "lr_list", "bs_list", required=True)
    rows = scan_bs_lr(
        model, grid, run_length=cfg.steps, replicas=cfg.replicas,
        master_seed=cfg.master_seed,
        theta_start=None if cfg.theta0 is None else np.asarray(cfg.theta0, float),
        record_stride=cfg.record_stride or None,
        burn_in_fraction=cfg.burn_in, workers=cfg.workers,
        flow_t=cfg.flow_t, flow_dt=cfg.flow_dt,
    )
    csv_path = _out(cfg, "scan.csv")
    write_scan_csv(csv_path, rows)
    json_path = _out(cfg, "scan.json")
    _write_json(json_path, [row.as_dict() for row in rows])
    return [csv_path, json_path]


def _cmd_scaling(cfg: RunConfig) -> list[str]:
    model = _build_model(cfg)
    if cfg.base_lr is None or cfg.base_bs is None:
        raise ConfigError("base_lr and base_bs are required for the scaling command")
    off = _paired(cfg, "off_lr_list", "off_bs_list", required=False)
    curves = linear_scaling_experiment(
        model, base=(cfg.base_lr, cfg.base_bs), factors=list(cfg.factors),
        off_ratio=off, run_length=cfg.steps, seed=cfg.master_seed,
        theta0=_start_point(cfg, model),
        record_stride=cfg.record_stride or None,
        burn_in_fraction=cfg.burn_in, workers=cfg.workers,
    )
    csv_path = _out(cfg, "curves.csv")
    write_curves_csv(csv_path, curves)
    json_path = _out(cfg, "scaling.json")
    _write_json(json_path, curves.as_dict())
    return [csv_path, json_path]


def _cmd_clt(cfg: RunConfig) -> list[str]:
    model = _build_model(cfg)
    if cfg.delta_list is None:
        raise ConfigError("delta_list is required for the clt command")
    report = clt_experiment(
        model, list(cfg.delta_list), cfg.batch_size, cfg.t_end, cfg.replicas,
        cfg.master_seed,
        theta0=None if cfg.theta0 is None else np.asarray(cfg.theta0, float),
    )
    path = _out(cfg, "clt.json")
    _write_json(path, report.as_dict())
    return [path]


def _cmd_saddle(cfg: RunConfig) -> list[str]:
    if cfg.hessian_file is None and cfg.hessian_diag is None:
        raise ConfigError("hessian_file or hessian_diag is required for the saddle command")
    hessian = _matrix_from_keys(cfg, "hessian_file", "hessian_diag", cfg.curvature_scale, cfg.dim)
    noise = _matrix_from_keys(cfg, "noise_file", "noise_diag", cfg.noise_scale, hessian.dim)
    report = saddle_divergence_experiment(
        hessian, noise, cfg.learning_rate, cfg.batch_size, cfg.steps,
        cfg.replicas, cfg.master_seed,
    )
    path = _out(cfg, "saddle.json")
    _write_json(path, report.as_dict())
    return [path]


def _cmd_estimate(cfg: RunConfig) -> list[str]:
    model = _build_model(cfg)
    report = model_report(
        model, _start_point(cfg, model), cfg.learning_rate, cfg.batch_size,
        probe_count=cfg.probe_count, sample_count=cfg.sample_count, seed=cfg.master_seed,
    )
    print(format_prediction_report(report))
    path = _out(cfg, "estimate.json")
    _write_json(path, report.as_dict())
    return [path]


def _cmd_lyapunov(cfg: RunConfig) -> list[str]:
    if cfg.hessian_file is None or cfg.noise_file is None:
        raise ConfigError("hessian_file and noise_file are required for the lyapunov command")
    hessian = read_matrix_csv(cfg.hessian_file)
    noise = read_matrix_csv(cfg.noise_file)
    gamma = solve_lyapunov(hessian, noise)
    csv_path = _out(cfg, "gamma.csv")
    write_matrix_csv(csv_path, gamma)
    json_path = _out(cfg, "lyapunov.json")
    _write_json(json_path, {
        "dim": gamma.dim,
        "tr_gamma": trace(gamma),
        "tr_h_gamma": float(np.trace(hessian.entries @ gamma.entries)),
        "half_tr_q": 0.5 * trace(noise),
    })
    return [csv_path, json_path]


def _cmd_gen_data(cfg: RunConfig) -> list[str]:
    features, labels = generate_blobs(
        cfg.example_count, cfg.feature_dim, cfg.class_count, cfg.master_seed,
        center_scale=cfg.center_scale,
    )
    path = _out(cfg, "dataset.csv")
    write_dataset_csv(path, features, labels)
    return [path]


HANDLERS = {
    "simulate": _cmd_simulate,
    "flow": _cmd_flow,
    "ou": _cmd_ou,
    "scan": _cmd_scan,
    "scaling": _cmd_scaling,
    "clt": _cmd_clt,
    "saddle": _cmd_saddle,
    "estimate": _cmd_estimate,
    "lyapunov": _cmd_lyapunov,
    "gen-data": _cmd_gen_data,
}


def run(cfg: RunConfig) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    print(f"master_seed = {cfg.master_seed}")
    echo = _out(cfg, "config.resolved")
    with open(echo, "w", encoding="utf-8") as fh:
        fh.write(cfg.resolved_lines())
    written = HANDLERS[cfg.command](cfg)
    for path in written:
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if any(token in ("-h", "--help") for token in argv):
        print(render_help())
        return 0
    try:
        cfg = parse_config(argv)
    except ConfigError as err:
        print(f"error: config: {err}", file=sys.stderr)
        return 2
    try:
        return run(cfg)
    except (ConfigError, LinAlgError, ModelError, EngineError, EstimatorError,
            ExperimentError, DivergenceError) as err:
        print(f"error: {cfg.command}: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: io: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
