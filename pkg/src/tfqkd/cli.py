"""Command-line front end: run, sweeps, disturbance recovery and self-test.

Every result file starts with ``#`` comment lines carrying the schema
version, the package version and the full effective configuration, then a
mandatory header row. Floats are written with ``repr`` so they parse back
exactly. Writing to ``--out`` also produces a JSON mirror of a CSV result and
a ``.manifest.json`` next to it.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import binary_entropy, pattern_visibility, visibility
from .config import (
    SCHEMA_VERSION, ConfigError, PRESETS, SimConfig, SweepSpec,
    config_from_document, config_to_document, preset,
)
from .protocol import sifting_table_check

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3

RESULT_COLUMNS = (
    "variable", "value", "frames", "seed", "visibility", "pattern_visibility", "e_b", "e_b_uncorrected",
    "R_sift", "R", "R_uncorrected", "inconclusive_fraction", "sifted_bits", "errors", "status",
)
DISTURBANCE_COLUMNS = (
    "segment_start", "segment_end", "frames", "seed", "baseline_qber", "segment_qber_uncorrected",
    "segment_qber_corrected", "overall_qber_uncorrected", "overall_qber_corrected",
    "flipped_windows", "flagged_windows", "status",
)

DEFAULT_GRIDS = {
    "guard_band": tuple(float(g) for g in range(0, 451, 50)),
    "distance": (0.0, 10.0, 20.0, 50.0),
    "beta": (0.0, 1e-4),
}
SWEEP_COMMANDS = {"sweep-guard": "guard_band", "sweep-distance": "distance", "sweep-beta": "beta"}

log = logging.getLogger("tfqkd")


class InvariantError(RuntimeError):
    pass


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def render_csv(columns, rows, doc: dict) -> str:
    buf = io.StringIO()
    buf.write(f"# schema_version={SCHEMA_VERSION}\n")
    buf.write(f"# tfqkd_version={__version__}\n")
    buf.write("# config=" + json.dumps(doc, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def parse_csv(text: str):
    """Inverse of render_csv: returns (meta, rows) with floats parsed back exactly."""
    meta = {}
    body = []
    for line in text.splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition("=")
            meta[k] = json.loads(v) if k == "config" else v
        else:
            body.append(line)
    reader = csv.DictReader(body)
    return meta, list(reader)


def render_json(columns, rows, doc: dict) -> str:
    clean = [{c: _json_value(r.get(c)) for c in columns} for r in rows]
    out = {
        "schema_version": SCHEMA_VERSION,
        "tfqkd_version": __version__,
        "config": doc,
        "columns": list(columns),
        "rows": clean,
    }
    return json.dumps(out, indent=2, sort_keys=True) + "\n"


def _json_value(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        v = float(v)
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def manifest(doc: dict, seed: int, command: str, outputs: list[str]) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "tfqkd_version": __version__,
        "command": command,
        "seed": seed,
        "config": doc,
        "outputs": outputs,
    }


def emit(args, columns, rows, doc: dict, seed: int) -> None:
    text = render_csv(columns, rows, doc) if args.format == "csv" else render_json(columns, rows, doc)
    if args.out is None:
        sys.stdout.write(text)
        return
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    written = [out.name]
    if args.format == "csv":
        mirror = out.with_suffix(".json")
        mirror.write_text(render_json(columns, rows, doc))
        written.append(mirror.name)
    man = out.with_name(out.stem + ".manifest.json")
    man.write_text(json.dumps(manifest(doc, seed, args.command, written), indent=2, sort_keys=True) + "\n")


def load_config(args) -> tuple[SimConfig, SweepSpec | None]:
    base = preset(args.preset) if args.preset else SimConfig()
    sweep_spec = None
    if args.config:
        path = Path(args.config)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError([f"config file not found: {path}"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None
        base, sweep_spec = config_from_document(doc, base)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.frames is not None:
        overrides["frames"] = args.frames
    if args.workers is not None:
        overrides["workers"] = args.workers
    cfg = replace(base, **overrides)
    errs = cfg.validate()
    if errs:
        raise ConfigError(errs)
    return cfg, sweep_spec


def check_run_invariants(stats) -> None:
    total = stats.sifted_bits + stats.inconclusive + stats.no_key_click
    if total != stats.frames_simulated:
        raise InvariantError(f"frame accounting broken: {total} != {stats.frames_simulated}")
    if stats.errors > stats.sifted_bits:
        raise InvariantError("more errors than sifted bits")


def cmd_run(args, cfg: SimConfig, _spec) -> None:
    from .sim import run

    res = run(cfg)
    check_run_invariants(res.stats)
    row = {"variable": "none", "value": None, "status": "ok", **res.summary()}
    doc = config_to_document(cfg)
    emit(args, RESULT_COLUMNS, [row], doc, cfg.seed)
    if args.records:
        from .protocol import write_records

        with open(args.records, "w", newline="") as fh:
            write_records(res.iter_records(), fh)


def cmd_sweep(args, cfg: SimConfig, spec: SweepSpec | None) -> None:
    from .sim import sweep

    variable = SWEEP_COMMANDS[args.command]
    if args.values:
        values = tuple(args.values)
    elif spec is not None and spec.variable == variable:
        values = spec.values
    else:
        values = DEFAULT_GRIDS[variable]
    fpp = args.frames_per_point or (spec.frames_per_point if spec is not None else None)
    mode = spec.seed_mode if spec is not None else "derived"
    spec = SweepSpec(variable, values, fpp, mode)
    errs = spec.validate()
    if variable == "guard_band":
        errs += [f"guard {v:g} ps needs 2*guard < bin width" for v in values
                 if not 2 * v * 1e-12 < cfg.grid.bin_width_s]
    if errs:
        raise ConfigError(errs)
    rows = sweep(spec, cfg)
    emit(args, RESULT_COLUMNS, rows, config_to_document(cfg, spec), cfg.seed)
    if any(r["status"] != "ok" for r in rows):
        raise InvariantError("one or more sweep points failed")


def cmd_disturbance(args, cfg: SimConfig, _spec) -> None:
    from .sim import disturbance_experiment

    if args.segment:
        start, end = args.segment
    else:
        start = round(cfg.frames * (1 - args.fraction) / 2)
        end = start + round(cfg.frames * args.fraction)
    if not 0 <= start < end <= cfg.frames:
        raise ConfigError([f"segment [{start}, {end}) must lie within the {cfg.frames}-frame run"])
    out = disturbance_experiment(cfg, (start, end), args.phase)
    check_run_invariants(out["result"].stats)
    row = {k: v for k, v in out.items() if k not in ("result", "segment")}
    row.update(segment_start=start, segment_end=end, frames=cfg.frames, seed=cfg.seed, status="ok")
    emit(args, DISTURBANCE_COLUMNS, [row], config_to_document(out["result"].config), cfg.seed)


def selftest(stream=None) -> bool:
    stream = stream or sys.stdout
    ok = True

    def report(name, passed, detail=""):
        nonlocal ok
        ok &= bool(passed)
        stream.write(f"{'PASS' if passed else 'FAIL'} {name}{': ' + detail if detail else ''}\n")

    rows = sifting_table_check()
    combos = {(r["a1"], r["a2"], r["b1"], r["b2"]) for r in rows}
    report("sifting table", len(combos) == 16 and all(r["pass"] for r in rows),
           f"{sum(r['pass'] for r in rows)}/{len(rows)} outcomes over {len(combos)} bit combinations")
    report("h(0) = h(1) = 0", binary_entropy(0.0) == 0.0 and binary_entropy(1.0) == 0.0)
    report("h(1/2) = 1", binary_entropy(0.5) == 1.0)
    xs = np.linspace(0.01, 0.49, 49)
    report("h(x) = h(1-x)", bool(np.allclose(binary_entropy(xs), binary_entropy(1 - xs), rtol=0, atol=1e-15)))
    report("visibility(n, 0) = 1", visibility(10, 0) == 1.0)
    report("visibility(n, n) = 0", visibility(7, 7) == 0.0)
    report("visibility(0, n) = -1", visibility(0, 5) == -1.0)
    report("visibility(0, 0) undefined", visibility(0, 0) is None)
    report("visibility = 1 - 2 QBER", all(
        math.isclose(visibility(c, e), 1 - 2 * e / (c + e), abs_tol=1e-15) for c, e in [(9, 1), (3, 5), (100, 7)]))
    report("pattern visibility ideal", pattern_visibility(5, 5, 0) == 1.0)
    return ok


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tfqkd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"tfqkd {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config document")
    common.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    common.add_argument("--seed", type=int)
    common.add_argument("--frames", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out", metavar="PATH", help="result file (default: stdout)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--print-config", action="store_true", help="print the effective config and exit")

    r = sub.add_parser("run", parents=[common], help="single simulation run")
    r.add_argument("--records", metavar="PATH", help="also write the sifted record stream as CSV")
    for name, var in SWEEP_COMMANDS.items():
        s = sub.add_parser(name, parents=[common], help=f"sweep over {var.replace('_', ' ')}")
        s.add_argument("--values", type=float, nargs="+", help="grid values (guard in ps, distance in km)")
        s.add_argument("--frames-per-point", type=int)
    d = sub.add_parser("disturbance", parents=[common], help="pi disturbance with and without flip correction")
    d.add_argument("--segment", type=int, nargs=2, metavar=("START", "END"), help="disturbed frames [START, END)")
    d.add_argument("--fraction", type=float, default=0.2, help="centred disturbed fraction when --segment is absent")
    d.add_argument("--phase", type=float, default=math.pi, help="disturbance phase (rad)")
    sub.add_parser("selftest", help="sifting oracle and entropy/visibility identities")
    return p


COMMANDS = {"run": cmd_run, "disturbance": cmd_disturbance, **{k: cmd_sweep for k in SWEEP_COMMANDS}}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "selftest":
        return EXIT_OK if selftest() else EXIT_INVARIANT

    try:
        cfg, spec = load_config(args)
        if args.print_config:
            sys.stdout.write(json.dumps(config_to_document(cfg, spec), indent=2, sort_keys=True) + "\n")
            return EXIT_OK
        COMMANDS[args.command](args, cfg, spec)
    except ConfigError as exc:
        for e in exc.errors:
            sys.stderr.write(f"config error: {e}\n")
        return EXIT_CONFIG
    except InvariantError as exc:
        sys.stderr.write(f"invariant failure: {exc}\n")
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
