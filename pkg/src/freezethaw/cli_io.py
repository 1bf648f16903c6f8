"""Scenario files, snapshot CSV output and the ``simulate`` command line.

Scenario files are INI-style with the sections ``[geometry]``, ``[thermo]``,
``[sap]``, ``[regularization]``, ``[numerics]`` and ``[output]``.  Every key
is optional; omitted keys take the defaults of the corresponding dataclass.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import logging
import os
import re
import sys

import numpy as np

from .corrector import CellGeometry, compute_effective_tensor, write_tensor
from .coupler import SimConfig, SimResult, run_simulation
from .integrator import IntegrationError
from .micro_sap import ClosureError, SapProps
from .thermo import ThermoProps

log = logging.getLogger(__name__)

SNAPSHOT_HEADER = ("t", "x", "T1", "H1", "s_iw", "s_gi_or_gw", "r", "U", "p_wf", "p_wv", "regime")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

_GEOMETRY_KEYS = ("delta", "R_f", "W", "gamma", "L_f", "L_v", "N_f", "R_tree")
_THERMO_KEYS = tuple(f.name for f in dataclasses.fields(ThermoProps))
_SAP_KEYS = tuple(f.name for f in dataclasses.fields(SapProps))
_REG_KEYS = ("width_i", "width_w", "c_inf")
_NUMERIC_FLOATS = ("t_end", "abs_tol", "rel_tol", "post_melt_D", "gas_diffusion_factor", "split_dt",
                   "mesh_h", "stop_after_melt")
_NUMERIC_INTS = ("M_macro", "M_micro", "threads")
_NUMERIC_TEXT = ("model", "coupling", "face_mean", "pi_file")
_OUTPUT_KEYS = ("output_times", "probe_x")

SECTIONS = {
    "geometry": _GEOMETRY_KEYS,
    "thermo": _THERMO_KEYS,
    "sap": _SAP_KEYS,
    "regularization": _REG_KEYS,
    "numerics": _NUMERIC_TEXT + _NUMERIC_INTS + _NUMERIC_FLOATS,
    "output": _OUTPUT_KEYS,
}
# keys that may be written as "none" to request the derived default
_OPTIONAL = {"gamma", "s_gi0", "rho_gv0", "post_melt_D", "stop_after_melt", "pi_file", "t_end"}


class ConfigError(ValueError):
    """Invalid scenario file; the message carries the offending line."""


def _locate(text: str) -> dict[tuple[str, str], int]:
    """Line number of every ``key`` in every ``[section]``."""
    where: dict[tuple[str, str], int] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        m = re.fullmatch(r"\[([^\]]+)\]", stripped)
        if m:
            section = m.group(1).strip()
            where[(section, "")] = lineno
        elif section and stripped and stripped[0] not in "#;" and ("=" in stripped or ":" in stripped):
            key = re.split(r"[=:]", stripped, maxsplit=1)[0].strip()
            where.setdefault((section, key), lineno)
    return where


def _convert(section: str, key: str, raw: str, at: str):
    raw = raw.strip()
    if key in _OPTIONAL and raw.lower() == "none":
        return None
    try:
        if key in _NUMERIC_TEXT:
            return raw
        if key in _NUMERIC_INTS:
            return int(raw)
        if key == "output_times":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        return float(raw)
    except ValueError:
        raise ConfigError(f"{at}: malformed value for [{section}] {key}: {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> SimConfig:
    """Build a :class:`SimConfig` from scenario text."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    where = _locate(text)
    values: dict[str, dict] = {name: {} for name in SECTIONS}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}:{where.get((section, ''), '?')}: unknown section [{section}]")
        for key, raw in parser.items(section):
            at = f"{source}:{where.get((section, key), '?')}"
            if key not in SECTIONS[section]:
                raise ConfigError(f"{at}: unknown key {key!r} in [{section}]")
            values[section][key] = _convert(section, key, raw, at)
            log.info("override [%s] %s = %s", section, key, raw.strip())

    def guarded(section, build):
        try:
            return build()
        except ValueError as exc:
            line = "?"
            for key in values[section]:
                if re.search(rf"\b{re.escape(key)}\b", str(exc)):
                    line = where.get((section, key), "?")
                    break
            raise ConfigError(f"{source}:{line}: [{section}] {exc}") from None

    geom = guarded("geometry", lambda: CellGeometry(**values["geometry"]))
    thermo = guarded("thermo", lambda: ThermoProps(**values["thermo"]))
    sap_kw = {k: v for k, v in values["sap"].items() if v is not None}
    sap = guarded("sap", lambda: SapProps.for_geometry(geom, **sap_kw))
    cfg_kw = dict(values["regularization"])
    cfg_kw.update(values["numerics"])
    cfg_kw.update(values["output"])
    cfg = guarded("numerics", lambda: SimConfig(thermo=thermo, geom=geom, sap=sap, **cfg_kw))
    guarded("regularization", lambda: cfg.regularization)
    return cfg


def parse_config(path) -> SimConfig:
    """Read a scenario file; an absent path yields the defaults."""
    if path is None:
        return SimConfig()
    with open(path) as fh:
        return parse_config_text(fh.read(), str(path))


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: SimConfig) -> str:
    """Scenario text that parses back to ``cfg``; derived values are written explicitly."""
    out = io.StringIO()
    blocks = [
        ("geometry", cfg.geom, _GEOMETRY_KEYS),
        ("thermo", cfg.thermo, _THERMO_KEYS),
        ("sap", cfg.sap, _SAP_KEYS),
        ("regularization", cfg, _REG_KEYS),
        ("numerics", cfg, SECTIONS["numerics"]),
        ("output", cfg, _OUTPUT_KEYS),
    ]
    for i, (section, obj, keys) in enumerate(blocks):
        if i:
            out.write("\n")
        out.write(f"[{section}]\n")
        for key in keys:
            out.write(f"{key} = {_fmt(getattr(obj, key))}\n")
    return out.getvalue()


def _num(value) -> str:
    return format(float(value), ".17g")


def snapshot_rows(result: SimResult):
    """Rows in time-major, node-minor order; sap-only columns are empty for the reduced model."""
    sap = result.config.model == "sap"
    for snap in result.snapshots:
        for i, x in enumerate(result.x):
            melted = bool(snap["regime"][i])
            row = [_num(snap["t"]), _num(x), _num(snap["T1"][i]), _num(snap["H1"][i]), _num(snap["s_iw"][i])]
            if sap:
                row += [_num(snap[k][i]) for k in ("s_gx", "r", "U", "p_wf", "p_wv")]
            else:
                row += [""] * 5
            row.append("MELTED" if melted else "ICE_PRESENT")
            yield row


def emit_snapshots(result: SimResult, path) -> int:
    """Write the snapshot CSV; returns the number of data rows."""
    n = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SNAPSHOT_HEADER)
        for row in snapshot_rows(result):
            writer.writerow(row)
            n += 1
    return n


def emit_events(result: SimResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("node", "x", "melt_time"))
        for node, t in result.events:
            writer.writerow((node, _num(result.x[node]), _num(t)))


def emit_convergence(table, path) -> None:
    """``eps,time,l2_error`` rows from the fine-scale ladder."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("eps", "time", "l2_error"))
        for eps, t, err in table:
            writer.writerow((_num(eps), _num(t), _num(err)))


def _threads(n: int) -> int:
    if n < 0:
        raise ConfigError("--threads must be >= 0")
    return (os.cpu_count() or 1) if n == 0 else n


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    overrides = {"threads": _threads(args.threads)}
    if args.model and args.model != cfg.model:
        overrides["model"] = args.model
        if not _sets_t_end(args.config):
            overrides["t_end"] = None  # the default end time depends on the model
    try:
        cfg = dataclasses.replace(cfg, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    result = run_simulation(cfg)
    n = emit_snapshots(result, args.out)
    if args.events:
        emit_events(result, args.events)
    log.info("wrote %d rows to %s; final melt time %.1f s", n, args.out, result.final_melt_time)
    return EXIT_OK


def _sets_t_end(path) -> bool:
    if path is None:
        return False
    with open(path) as fh:
        return ("numerics", "t_end") in _locate(fh.read())


def _cmd_corrector(args) -> int:
    cfg = parse_config(args.config)
    tensor = compute_effective_tensor(cfg.geom, args.mesh_h or cfg.mesh_h, threads=_threads(args.threads))
    write_tensor(tensor, cfg.geom, args.out)
    log.info("Pi/delta^2 = %.9f, ratio to |Y1| = %.6f", tensor.pi0 / cfg.geom.delta ** 2, tensor.ratio)
    return EXIT_OK


def _cmd_finescale(args) -> int:
    from .finescale import convergence_study

    cfg = parse_config(args.config)
    try:
        inverse = [int(v) for v in args.eps_ladder.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--eps-ladder expects integers 1/eps, got {args.eps_ladder!r}") from None
    table = convergence_study(inverse, thermo=cfg.thermo, geom=cfg.geom, reg=cfg.regularization,
                              threads=_threads(args.threads))
    emit_convergence(table, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default="WARNING",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"))
    common.add_argument("--threads", type=int, default=1, help="worker threads (0 = all cores)")
    common.add_argument("--config", default=None, help="scenario file (defaults when omitted)")
    parser = argparse.ArgumentParser(prog="simulate", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="run a thaw scenario")
    run.add_argument("--model", choices=("reduced", "sap"))
    run.add_argument("--out", required=True, help="snapshot CSV")
    run.add_argument("--events", help="optional melt-event CSV")
    run.set_defaults(func=_cmd_run)
    cor = sub.add_parser("corrector", parents=[common], help="compute the effective tensor")
    cor.add_argument("--out", required=True)
    cor.add_argument("--mesh-h", type=float, default=None)
    cor.set_defaults(func=_cmd_corrector)
    fine = sub.add_parser("finescale", parents=[common], help="fine-scale convergence ladder")
    fine.add_argument("--eps-ladder", default="4,8,16", help="comma-separated values of 1/eps")
    fine.add_argument("--out", required=True)
    fine.set_defaults(func=_cmd_finescale)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        log.error("%s", exc)
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IntegrationError, ClosureError, ArithmeticError, np.linalg.LinAlgError) as exc:
        log.error("%s", exc)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
