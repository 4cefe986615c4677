"""Command-line interface.

Subcommands mirror the pipeline stages: geometry-check, sections, perturb,
pencil, measure, report.  Each run writes one directory containing the
config echo, the serialized final section, the perturbation plans, and the
structured reports.  Exit codes: 0 success, 2 transversality failure
(eta_cert <= 0), 3 oracle disagreement, 4 configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .bundle import BundleSpec, curvature_residual
from .errors import (ConfigError, OracleDisagreement, TorusjetError,
                     TransversalityFailure)
from .geometry import (GeometryContext, TwoFormField, compatible_almost_complex,
                       moser_darboux, standard_J_field, standard_omega_field,
                       standard_omega_matrix)
from .pipeline import (RunConfig, emit_report, measure_record,
                       parse_config_file, run_pipeline)
from .sections import (ah_norms, make_reference_section, section_from_text,
                       section_to_text)

WORKER_ENV = "TORUSJET_WORKERS"


def _load_config(args) -> RunConfig:
    values = {}
    if args.config:
        values.update(parse_config_file(args.config).values)
        cfg = RunConfig(values={})
        cfg.values = values
    else:
        cfg = RunConfig(values={})
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    if overrides:
        merged = dict(cfg.values)
        tmp = RunConfig(values=overrides)
        for key in overrides:
            merged[key] = tmp.values[key]
        cfg.values = merged
    return cfg


def cmd_geometry_check(args) -> int:
    cfg = _load_config(args)
    n = cfg["model.n"]
    k = cfg.k_list[0]
    ctx = GeometryContext(n=n, k=k)
    rng = np.random.default_rng(cfg["seed"])
    pts = rng.uniform(0, 1, size=(20, ctx.dim))
    J = compatible_almost_complex(standard_omega_field(n), standard_J_field(n), pts)
    spec = BundleSpec(ctx, 1)
    out = {
        "compatible_J_residual": J.square_residual(pts),
        "deviation_constant": J.metadata["deviation_constant"],
        "curvature_residual": curvature_residual(spec, pts[0]),
    }

    def omega1(p):
        M = np.broadcast_to(standard_omega_matrix(n), (p.shape[0], 2 * n, 2 * n)).copy()
        M[:, 0, 1] *= (1 + 0.05 * p[:, 0])
        M[:, 1, 0] *= (1 + 0.05 * p[:, 0])
        return M

    def domega1(p):
        out = np.zeros((p.shape[0], 2 * n, 2 * n, 2 * n))
        out[:, 0, 1, 0] = 0.05
        out[:, 1, 0, 0] = -0.05
        return out

    chart = moser_darboux(TwoFormField(n=n, evaluator=omega1, jacobian=domega1),
                          np.zeros(ctx.dim), 0.5, 0.02)
    out["moser_residual"] = chart.residual
    print(json.dumps(out, indent=1))
    return 0


def cmd_sections(args) -> int:
    cfg = _load_config(args)
    n = cfg["model.n"]
    k = cfg.k_list[0]
    ctx = GeometryContext(n=n, k=k)
    spec = BundleSpec(ctx, m_plus_1=cfg["model.m"] + 1)
    s = make_reference_section([0.5] * ctx.dim, 0, spec)
    rep = ah_norms(s, r=min(cfg["jets.r"], 2), spacing=0.25)
    out_dir = cfg["output.dir"]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "section.txt")
    with open(path, "w") as fh:
        fh.write(section_to_text(s))
    print(json.dumps({"section": path, "nabla": list(rep.nabla),
                      "nabla_dbar": list(rep.nabla_dbar)}, indent=1))
    return 0


def _run_and_emit(cfg: RunConfig) -> int:
    for k in cfg.k_list:
        record = run_pipeline(cfg, k=k)
        out_dir = os.path.join(cfg["output.dir"], f"k{k}")
        paths = emit_report(record, out_dir)
        summary = {
            "k": k,
            "out": out_dir,
            "strata": {sd["report"]["stratum_id"]:
                       {"eta_grid": sd["report"]["eta_grid"],
                        "eta_cert": sd["report"]["eta_cert"]}
                       for sd in record.strata},
            "timing": record.timing,
        }
        if "zero_total" in record.counts:
            summary["zeros"] = record.counts["zero_total"]
        if "pencil" in record.counts:
            summary["critical"] = len(record.counts["pencil"]["critical_points"])
            summary["base"] = len(record.counts["pencil"]["base_points"])
        print(json.dumps(summary, indent=1))
    return 0


def cmd_perturb(args) -> int:
    return _run_and_emit(_load_config(args))


def cmd_pencil(args) -> int:
    cfg = _load_config(args)
    merged = dict(cfg.values)
    merged.setdefault("model.m", 1)
    if merged.get("model.m") == 0:
        merged["model.m"] = 1
    if merged.get("jets.r", 0) < 2:
        merged["jets.r"] = 2
    cfg.values = merged
    return _run_and_emit(cfg)


def cmd_measure(args) -> int:
    cfg = _load_config(args)
    with open(args.section) as fh:
        section = section_from_text(fh.read())
    out = measure_record(section, cfg)
    print(json.dumps(out, indent=1))
    return 0


def cmd_report(args) -> int:
    with open(args.record) as fh:
        data = json.load(fh)
    from .pipeline import RunRecord
    record = RunRecord(config=data["config"], k=data["k"],
                       ah_norms=data["ah_norms"], strata=data["strata"],
                       counts=data["counts"], timing=data["timing"],
                       section_text=open(args.section).read() if args.section else "",
                       plans=data.get("plans", []))
    paths = emit_report(record, args.out)
    print(json.dumps(paths, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="torusjet",
        description="Certified uniform transversality on flat model tori")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="dotted-key config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key")

    p = sub.add_parser("geometry-check", help="compatible-J and Moser diagnostics")
    common(p); p.set_defaults(fn=cmd_geometry_check)
    p = sub.add_parser("sections", help="build a reference section, report AH norms")
    common(p); p.set_defaults(fn=cmd_sections)
    p = sub.add_parser("perturb", help="run the stratum-induction sweep")
    common(p); p.set_defaults(fn=cmd_perturb)
    p = sub.add_parser("pencil", help="perturb with pencil defaults and extract")
    common(p); p.set_defaults(fn=cmd_pencil)
    p = sub.add_parser("measure", help="measure-only mode on a serialized section")
    common(p)
    p.add_argument("section", help="path to section.txt")
    p.set_defaults(fn=cmd_measure)
    p = sub.add_parser("report", help="re-emit report files from a record")
    p.add_argument("record", help="path to report.json")
    p.add_argument("--section", help="path to section.txt", default=None)
    p.add_argument("--out", default="report-out")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    os.environ.setdefault(WORKER_ENV, "1")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 4
    except OracleDisagreement as e:
        print(f"oracle disagreement: {e}", file=sys.stderr)
        return 3
    except TransversalityFailure as e:
        print(f"transversality failure: {e}", file=sys.stderr)
        return 2
    except TorusjetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
