"""Command line front end: flag resolution, experiment manifests, persistence.

Every option can come from four places; the first hit wins:

1. an explicit flag (``--beta 0.8``),
2. an environment variable with the ``QPARISI_`` prefix and the flag name
   upper-cased with dashes as underscores (``QPARISI_BETA=0.8``),
3. a line in the ``--config`` file (``beta = 0.8``, one ``key = value`` per
   line, ``#`` comments allowed),
4. the built-in default.

Each run writes an :class:`ExperimentManifest` JSON next to its result (or
``<command>.manifest.json`` in the working directory when no ``--out`` is
given) recording the command, the fully resolved parameters, timestamps, the
package version, and a SHA-256 of the payload, so any result can be traced
back to an exact reproducible invocation. All floats are printed with 17
significant digits and every output row echoes its seed. The exit code is
nonzero when an estimator check is flagged (identity gap beyond three
standard errors, optimizer not converged).
"""

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from itertools import product
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .core_quantum import (
    ModelParams,
    build_sk_hamiltonian,
    draw_disorder,
    log_partition,
    quenched_free_energy,
    spectral_decompose,
)
from .interpolation_lab import (
    concentration_scan,
    guerra_identity_residual,
    selfoverlap_variance_diag,
)
from .rsb_functional import (
    MixtureFunction,
    QuadratureSpec,
    RsbParams,
    SelfOverlapKernel,
    SingleSiteModel,
    hopf_lax_sup,
    optimize_rsb,
    parisi_functional,
    pspin_covariance_check,
    stationarity_residual,
)
from .stochastics import RngStream
from .trotter_rep import corrected_identity_check, trotter_log_partition

ENV_PREFIX = "QPARISI_"
GAP_FLAG_SIGMAS = 3.0
EXACT_FLAG_TOL = 1e-8


def _float(text: str) -> float:
    return float(text)


def _int(text: str) -> int:
    return int(text)


def _floats(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip() != ""]


def _ints(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip() != ""]


def _fmt_choice(text: str) -> str:
    if text not in ("csv", "json"):
        raise ValueError("format must be 'csv' or 'json'")
    return text


@dataclass(frozen=True)
class Option:
    """One resolvable flag: name uses dashes, parse turns strings into values."""

    name: str
    parse: Callable[[str], object]
    default: object
    help: str

    @property
    def attr(self) -> str:
        return self.name.replace("-", "_")


COMMON_OPTIONS = (
    Option("seed", _int, 0, "root seed of the run's stream tree"),
    Option("workers", _int, 1, "worker threads (results are worker-invariant)"),
    Option("out", str, None, "write the payload here; manifest goes to <out>.manifest.json"),
    Option("format", _fmt_choice, None, "csv or json (each command has a default)"),
    Option("config", str, None, "key=value file consulted after flags and environment"),
)


@dataclass
class CommandOutput:
    """What a subcommand produced: a table or a record, plus run health."""

    header: list[str] | None = None
    rows: list[list] | None = None
    record: dict | None = None
    flagged: bool = False
    notes: list[str] = field(default_factory=list)


def _fmt_cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt_cell(cell) for cell in row])
    return buffer.getvalue()


def _flatten(record: dict, prefix: str = "") -> list[tuple[str, str]]:
    items: list[tuple[str, str]] = []
    for key, value in record.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            items.extend(_flatten(value, f"{name}."))
        elif isinstance(value, (list, tuple)):
            items.append((name, ";".join(_fmt_cell(v) for v in value)))
        else:
            items.append((name, _fmt_cell(value)))
    return items


def _render(output: CommandOutput, fmt: str, command: str) -> str:
    if fmt == "csv":
        if output.rows is not None:
            return _csv_text(output.header, output.rows)
        return _csv_text(["key", "value"], _flatten(output.record))
    if output.rows is not None:
        body = {
            "command": command,
            "rows": [dict(zip(output.header, row)) for row in output.rows],
        }
        if output.record:
            body.update(output.record)
    else:
        body = {"command": command, **output.record}
    return json.dumps(body, indent=2, sort_keys=True) + "\n"


@dataclass(frozen=True)
class ExperimentManifest:
    """Reproducibility record written alongside every result.

    Re-running the stored command with the stored parameters (same package
    version) reproduces the payload bit for bit; the SHA-256 pins it.
    """

    command: str
    parameters: dict
    started: str
    finished: str
    version: str
    result_format: str
    result_path: str | None
    result_sha256: str

    def to_json(self) -> str:
        body = {
            "command": self.command,
            "parameters": self.parameters,
            "started": self.started,
            "finished": self.finished,
            "version": self.version,
            "result_format": self.result_format,
            "result_path": self.result_path,
            "result_sha256": self.result_sha256,
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentManifest":
        return cls(**json.loads(text))


def _kernel_from(profile: list[float] | None, m_slices: int) -> SelfOverlapKernel:
    if profile is None:
        return SelfOverlapKernel.zeros(m_slices)
    return SelfOverlapKernel(m_slices=m_slices, profile=tuple(profile))


def _rsb_from(o: dict) -> RsbParams:
    rsb = RsbParams(k=o["k"], m=tuple(o["m_values"]), q=tuple(o["q_values"]))
    return rsb


def _quad_from(o: dict) -> QuadratureSpec:
    return QuadratureSpec(mode="gauss", nodes=o["nodes"], seed=o["seed"])


def _quad_echo(quad: QuadratureSpec) -> dict:
    nodes = quad.nodes if isinstance(quad.nodes, int) else list(quad.nodes)
    return {"mode": quad.mode, "nodes": nodes, "seed": quad.seed}


def _residuals_at(
    rsb: RsbParams, mix: MixtureFunction, site: SingleSiteModel,
    quad: QuadratureSpec, notes: list[str],
) -> list[float]:
    try:
        report = stationarity_residual(rsb, mix, site, quad)
    except ValueError as exc:
        notes.append(f"stationarity probe skipped: {exc}")
        return []
    return [float(r) for r in report.residuals]


# --------------------------------------------------------------- subcommands


def _cmd_ed(o: dict) -> CommandOutput:
    stream = RngStream(seed=o["seed"])
    header = ["N", "beta", "b", "c", "samples", "seed", "mean", "stderr"]
    rows = []
    for index, (beta, b) in enumerate(product(o["beta"], o["b"])):
        params = ModelParams(beta=beta, b=b, c=o["c"], n_spins=o["n"])
        est = quenched_free_energy(
            params, o["samples"], stream.child(index), workers=o["workers"]
        )
        rows.append(
            [o["n"], beta, b, o["c"], o["samples"], o["seed"], est.mean, est.stderr]
        )
    return CommandOutput(header=header, rows=rows)


def _cmd_pspin(o: dict) -> CommandOutput:
    checks = pspin_covariance_check(
        o["p"], o["n"], o["samples"], RngStream(seed=o["seed"])
    )
    header = [
        "p", "N", "overlap", "mean", "stderr", "exact", "leading",
        "correction", "seed", "flagged",
    ]
    rows, flagged = [], False
    for row in checks:
        bad = abs(row.estimate.mean - row.exact) > GAP_FLAG_SIGMAS * row.estimate.stderr
        flagged = flagged or bad
        rows.append(
            [
                o["p"], o["n"], row.overlap, row.estimate.mean, row.estimate.stderr,
                row.exact, row.leading, row.correction, o["seed"], bad,
            ]
        )
    return CommandOutput(header=header, rows=rows, flagged=flagged)


def _cmd_trotter_check(o: dict) -> CommandOutput:
    stream = RngStream(seed=o["seed"])
    header = [
        "N", "M", "beta", "b", "c", "seed",
        "log_Z_trotter", "log_Z_exact", "abs_error",
    ]
    rows, notes = [], []
    for index, n in enumerate(o["n"]):
        params = ModelParams(beta=o["beta"], b=o["b"], c=o["c"], n_spins=n)
        sample = draw_disorder(n, 2, stream.child(index))
        exact = log_partition(
            spectral_decompose(build_sk_hamiltonian(params, sample)), o["beta"]
        )
        for m in o["m_slices"]:
            if o["b"] == 0.0:
                sliced = exact
            else:
                sliced = trotter_log_partition(params, sample, m)
            rows.append(
                [
                    n, m, o["beta"], o["b"], o["c"], o["seed"],
                    sliced, exact, abs(sliced - exact),
                ]
            )
    if o["b"] == 0.0:
        notes.append("b = 0: the sliced trace equals the exact one at every M")
    return CommandOutput(header=header, rows=rows, notes=notes)


def _cmd_selfoverlap_check(o: dict) -> CommandOutput:
    stream = RngStream(seed=o["seed"])
    header = [
        "N", "M", "beta", "b", "c", "seed", "draw",
        "lhs", "rhs", "gap_sigmas", "stderr_log", "flagged",
    ]
    rows, flagged = [], False
    for bi, beta in enumerate(o["beta"]):
        params = ModelParams(beta=beta, b=o["b"], c=o["c"], n_spins=o["n"])
        for draw in range(o["samples"]):
            sample = draw_disorder(o["n"], 2, stream.child(bi, draw, 0))
            check = corrected_identity_check(
                params, sample, o["m_slices"], o["inner_samples"],
                stream.child(bi, draw, 1),
            )
            bad = abs(check.gap_sigmas) > GAP_FLAG_SIGMAS
            flagged = flagged or bad
            rows.append(
                [
                    o["n"], o["m_slices"], beta, o["b"], o["c"], o["seed"], draw,
                    check.lhs, check.rhs, check.gap_sigmas, check.stderr_log, bad,
                ]
            )
    return CommandOutput(header=header, rows=rows, flagged=flagged)


def _parisi_record(o: dict, rsb: RsbParams, kernel: SelfOverlapKernel,
                   value: float, residuals: list[float], budget_used: int) -> dict:
    return {
        "k": rsb.k,
        "m": list(rsb.m),
        "q": list(rsb.q),
        "y_profile": list(kernel.profile),
        "beta": o["beta"],
        "b": o["b"],
        "c": o["c"],
        "M": o["m_slices"],
        "p": o["p"],
        "value": value,
        "residuals": residuals,
        "quad": _quad_echo(_quad_from(o)),
        "budget_used": budget_used,
    }


def _cmd_parisi_eval(o: dict) -> CommandOutput:
    rsb = _rsb_from(o)
    kernel = _kernel_from(o["y_profile"], o["m_slices"])
    mix = MixtureFunction(o["p"])
    site = SingleSiteModel(o["beta"], o["b"], o["c"], o["m_slices"], kernel=kernel)
    quad = _quad_from(o)
    notes: list[str] = []
    value = parisi_functional(rsb, mix, site, quad)
    residuals = _residuals_at(rsb, mix, site, quad, notes)
    record = _parisi_record(o, rsb, kernel, value, residuals, budget_used=0)
    return CommandOutput(record=record, notes=notes)


def _cmd_parisi_opt(o: dict) -> CommandOutput:
    kernel = _kernel_from(o["y_profile"], o["m_slices"])
    mix = MixtureFunction(o["p"])
    site = SingleSiteModel(o["beta"], o["b"], o["c"], o["m_slices"], kernel=kernel)
    quad = _quad_from(o)
    notes: list[str] = []
    optimum = optimize_rsb(o["k"], mix, site, quad, opt_budget=o["budget"])
    residuals = _residuals_at(optimum.params, mix, site, quad, notes)
    record = _parisi_record(
        o, optimum.params, kernel, optimum.value, residuals,
        budget_used=optimum.n_evaluations,
    )
    record["converged"] = optimum.converged
    if not optimum.converged:
        notes.append("optimizer did not report convergence")
    return CommandOutput(record=record, flagged=not optimum.converged, notes=notes)


def _cmd_hopflax(o: dict) -> CommandOutput:
    mix = MixtureFunction(o["p"])
    quad = _quad_from(o)
    result = hopf_lax_sup(
        o["k"], mix, o["beta"], o["b"], o["c"], o["m_slices"], quad,
        opt_budget=o["budget"], inner_budget=o["inner_budget"],
        stream=RngStream(seed=o["seed"]),
    )
    notes: list[str] = []
    site = SingleSiteModel(o["beta"], o["b"], o["c"], o["m_slices"], kernel=result.kernel)
    residuals = _residuals_at(result.inner.params, mix, site, quad, notes)
    record = _parisi_record(
        o, result.inner.params, result.kernel, result.value, residuals,
        budget_used=result.n_outer_evaluations,
    )
    record["inner_value"] = result.inner.value
    record["converged"] = result.converged
    if not result.converged:
        notes.append("envelope search did not report convergence")
    return CommandOutput(record=record, flagged=not result.converged, notes=notes)


def _cmd_interp_guerra(o: dict) -> CommandOutput:
    rsb = _rsb_from(o)
    kernel = _kernel_from(o["y_profile"], o["m_slices"])
    params = ModelParams(beta=o["beta"], b=o["b"], c=o["c"], n_spins=o["n"])
    quad = _quad_from(o)
    report = guerra_identity_residual(
        o["t"], params, o["m_slices"], rsb, kernel, quad, o["samples"],
        RngStream(seed=o["seed"]), workers=o["workers"],
    )
    if report.difference.stderr > 0:
        flagged = report.gap_sigmas > GAP_FLAG_SIGMAS
    else:
        flagged = abs(report.difference.mean) > EXACT_FLAG_TOL
    record = {
        "t": o["t"],
        "N": o["n"],
        "M": o["m_slices"],
        "k": rsb.k,
        "m": list(rsb.m),
        "q": list(rsb.q),
        "y_profile": list(kernel.profile),
        "beta": o["beta"],
        "b": o["b"],
        "c": o["c"],
        "n_samples": o["samples"],
        "seed": o["seed"],
        "quad": _quad_echo(quad),
        "lhs": {"mean": report.lhs.mean, "stderr": report.lhs.stderr},
        "rhs": {"mean": report.rhs.mean, "stderr": report.rhs.stderr},
        "difference": {
            "mean": report.difference.mean,
            "stderr": report.difference.stderr,
        },
        "gap_sigmas": report.gap_sigmas,
        "flagged": flagged,
    }
    return CommandOutput(record=record, flagged=flagged)


def _cmd_interp_concentration(o: dict) -> CommandOutput:
    rsb = _rsb_from(o)
    kernel = _kernel_from(o["y_profile"], o["m_slices"])
    params = ModelParams(beta=o["beta"], b=o["b"], c=o["c"], n_spins=o["n"][0])
    scan = concentration_scan(
        o["u"], o["r"], o["s"], params, o["m_slices"], rsb, kernel, o["n"],
        quad=_quad_from(o), n_disorder=o["samples"],
        stream=RngStream(seed=o["seed"]), workers=o["workers"],
    )
    header = [
        "s", "t", "N", "M", "k", "r", "u", "lambda",
        "estimate", "stderr", "n_samples", "seed",
    ]
    rows, notes = [], []
    for row in scan.rows:
        rows.append(
            [
                o["s"], 1.0, row.n_spins, o["m_slices"], rsb.k, o["r"], o["u"],
                0.0, row.estimate.mean, row.estimate.stderr, o["samples"],
                o["seed"],
            ]
        )
        if row.zero_event:
            notes.append(f"zero event at N = {row.n_spins}: threshold unreachable")
    extras = {"slope": scan.slope}
    if scan.slope is not None:
        notes.append(f"log-decay slope {format(scan.slope, '.17g')}")
    return CommandOutput(header=header, rows=rows, record=extras, notes=notes)


def _cmd_interp_variance(o: dict) -> CommandOutput:
    kernel = _kernel_from(o["y_profile"], o["m_slices"])
    stream = RngStream(seed=o["seed"])
    header = [
        "t", "N", "M", "thermal", "thermal_stderr", "disorder",
        "disorder_stderr", "total", "n_samples", "seed",
    ]
    rows = []
    for index, n in enumerate(o["n"]):
        params = ModelParams(beta=o["beta"], b=o["b"], c=o["c"], n_spins=n)
        report = selfoverlap_variance_diag(
            o["t"], params, o["m_slices"], kernel, o["samples"],
            stream.child(index), workers=o["workers"],
        )
        rows.append(
            [
                o["t"], n, o["m_slices"], report.thermal.mean,
                report.thermal.stderr, report.disorder.mean,
                report.disorder.stderr, report.total, o["samples"], o["seed"],
            ]
        )
    return CommandOutput(header=header, rows=rows)


@dataclass(frozen=True)
class CommandSpec:
    options: tuple[Option, ...]
    runner: Callable[[dict], CommandOutput]
    default_format: str
    summary: str


_MODEL = (
    Option("beta", _float, 0.8, "inverse temperature"),
    Option("b", _float, 0.6, "transverse field"),
    Option("c", _float, 0.2, "longitudinal field"),
)
_RSB = (
    Option("k", _int, 1, "hierarchy depth"),
    Option("m-values", _floats, [0.0, 1.0], "exponents m_0..m_k (comma separated)"),
    Option("q-values", _floats, [0.0, 0.3, 0.0], "overlaps q_0..q_{k+1}"),
    Option("y-profile", _floats, None, "full self-overlap kernel profile (length M)"),
    Option("p", _int, 2, "mixture order"),
    Option("nodes", _int, 24, "Gauss-Hermite nodes per level"),
)

COMMANDS: dict[str, CommandSpec] = {
    "ed": CommandSpec(
        options=(
            Option("n", _int, 4, "number of spins"),
            Option("beta", _floats, [1.0], "inverse temperatures (comma separated)"),
            Option("b", _floats, [0.5], "transverse fields (comma separated)"),
            Option("c", _float, 0.0, "longitudinal field"),
            Option("samples", _int, 200, "disorder samples per grid cell"),
        ),
        runner=_cmd_ed,
        default_format="csv",
        summary="quenched free energy by exact diagonalization over a (beta, b) grid",
    ),
    "pspin": CommandSpec(
        options=(
            Option("p", _int, 2, "interaction order (even)"),
            Option("n", _int, 8, "number of spins"),
            Option("samples", _int, 2000, "coupling draws"),
        ),
        runner=_cmd_pspin,
        default_format="csv",
        summary="interaction covariance against the exact combinatorial value",
    ),
    "trotter-check": CommandSpec(
        options=(
            Option("n", _ints, [1, 2, 3], "spin counts (comma separated)"),
            Option("m-slices", _ints, [4, 8, 16], "slice counts (comma separated)"),
            Option("beta", _float, 1.0, "inverse temperature"),
            Option("b", _float, 0.5, "transverse field"),
            Option("c", _float, 0.0, "longitudinal field"),
        ),
        runner=_cmd_trotter_check,
        default_format="csv",
        summary="sliced trace versus the exact trace over an M ladder",
    ),
    "selfoverlap-check": CommandSpec(
        options=(
            Option("n", _int, 2, "number of spins"),
            Option("m-slices", _int, 2, "slice count"),
            Option("beta", _floats, [0.4, 0.8], "inverse temperatures"),
            Option("b", _float, 0.5, "transverse field"),
            Option("c", _float, 0.0, "longitudinal field"),
            Option("samples", _int, 3, "disorder draws per temperature"),
            Option("inner-samples", _int, 10000, "antithetic inner samples"),
        ),
        runner=_cmd_selfoverlap_check,
        default_format="csv",
        summary="annealed imaginary-coupling identity at finite (N, M)",
    ),
    "parisi-eval": CommandSpec(
        options=(
            Option("m-slices", _int, 1, "slice count"),
        ) + _MODEL[:1] + (
            Option("b", _float, 0.0, "transverse field"),
            Option("c", _float, 0.0, "longitudinal field"),
        ) + _RSB,
        runner=_cmd_parisi_eval,
        default_format="json",
        summary="hierarchical functional at explicit (m, q, y)",
    ),
    "parisi-opt": CommandSpec(
        options=(
            Option("m-slices", _int, 1, "slice count"),
        ) + _MODEL[:1] + (
            Option("b", _float, 0.0, "transverse field"),
            Option("c", _float, 0.0, "longitudinal field"),
        ) + _RSB + (
            Option("budget", _int, 1500, "functional evaluations for the search"),
        ),
        runner=_cmd_parisi_opt,
        default_format="json",
        summary="minimize the depth-k functional over admissible (m, q)",
    ),
    "hopflax": CommandSpec(
        options=(
            Option("m-slices", _int, 1, "slice count"),
        ) + _MODEL[:1] + (
            Option("b", _float, 0.0, "transverse field"),
            Option("c", _float, 0.0, "longitudinal field"),
        ) + _RSB + (
            Option("budget", _int, 200, "outer kernel-envelope evaluations"),
            Option("inner-budget", _int, 600, "inner optimizer budget per kernel"),
        ),
        runner=_cmd_hopflax,
        default_format="json",
        summary="kernel envelope of the corrected functional",
    ),
    "interp-guerra": CommandSpec(
        options=(
            Option("n", _int, 2, "number of spins"),
            Option("m-slices", _int, 2, "slice count"),
            Option("t", _float, 1.0, "correction dial of the sum rule"),
        ) + _MODEL + _RSB[:4] + (
            Option("p", _int, 2, "mixture order"),
            Option("nodes", _int, 12, "Gauss-Hermite nodes per level"),
            Option("samples", _int, 400, "disorder samples"),
        ),
        runner=_cmd_interp_guerra,
        default_format="json",
        summary="finite-size interpolation sum rule residual",
    ),
    "interp-concentration": CommandSpec(
        options=(
            Option("n", _ints, [2, 3], "spin counts to scan"),
            Option("m-slices", _int, 2, "slice count"),
            Option("s", _float, 0.5, "interpolation dial"),
            Option("u", _float, 0.5, "deviation threshold"),
            Option("r", _int, 1, "coupling level"),
        ) + _MODEL + _RSB[:4] + (
            Option("p", _int, 2, "mixture order"),
            Option("nodes", _int, 12, "Gauss-Hermite nodes per level"),
            Option("samples", _int, 200, "disorder samples per size"),
        ),
        runner=_cmd_interp_concentration,
        default_format="csv",
        summary="overlap-deviation probability across system sizes",
    ),
    "interp-variance": CommandSpec(
        options=(
            Option("n", _ints, [2, 3], "spin counts to scan"),
            Option("m-slices", _int, 2, "slice count"),
            Option("t", _float, 1.0, "correction dial"),
        ) + _MODEL + (
            Option("y-profile", _floats, None, "full kernel profile (length M)"),
            Option("samples", _int, 200, "disorder samples per size"),
        ),
        runner=_cmd_interp_variance,
        default_format="csv",
        summary="thermal and disorder variance of the mean self-overlap",
    ),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qparisi",
        description=__doc__.split("\n", 1)[0],
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, spec in COMMANDS.items():
        sub = subparsers.add_parser(name, help=spec.summary)
        for opt in spec.options + COMMON_OPTIONS:
            sub.add_argument(
                f"--{opt.name}", type=opt.parse, default=None, help=opt.help
            )
    return parser


def _read_config(path: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        entries[key.strip().replace("-", "_")] = value.strip()
    return entries


def _resolve(spec: CommandSpec, args: argparse.Namespace) -> dict:
    """Apply the flag > environment > config file > default precedence."""
    options = spec.options + COMMON_OPTIONS
    config_path = args.config
    if config_path is None:
        config_path = os.environ.get(ENV_PREFIX + "CONFIG")
    config = _read_config(config_path) if config_path else {}
    resolved: dict[str, object] = {}
    for opt in options:
        value = getattr(args, opt.attr)
        if value is None:
            raw = os.environ.get(ENV_PREFIX + opt.attr.upper())
            if raw is None:
                raw = config.get(opt.attr)
            value = opt.parse(raw) if raw is not None else opt.default
        resolved[opt.attr] = value
    resolved["config"] = config_path
    return resolved


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    spec = COMMANDS[args.command]
    try:
        resolved = _resolve(spec, args)
    except (ValueError, OSError) as exc:
        parser.error(str(exc))
    started = datetime.now(timezone.utc).isoformat()
    try:
        output = spec.runner(resolved)
    except ValueError as exc:
        parser.error(str(exc))
    fmt = resolved["format"] or spec.default_format
    payload = _render(output, fmt, args.command)
    finished = datetime.now(timezone.utc).isoformat()
    parameters = {
        key: value
        for key, value in resolved.items()
        if key not in ("out", "config", "format")
    }
    out_path = resolved["out"]
    manifest = ExperimentManifest(
        command=args.command,
        parameters=parameters,
        started=started,
        finished=finished,
        version=__version__,
        result_format=fmt,
        result_path=str(out_path) if out_path else None,
        result_sha256=hashlib.sha256(payload.encode()).hexdigest(),
    )
    if out_path:
        Path(out_path).write_text(payload)
        manifest_path = Path(f"{out_path}.manifest.json")
    else:
        sys.stdout.write(payload)
        manifest_path = Path(f"{args.command}.manifest.json")
    manifest_path.write_text(manifest.to_json())
    for note in output.notes:
        print(f"note: {note}", file=sys.stderr)
    return 1 if output.flagged else 0


if __name__ == "__main__":
    sys.exit(main())
