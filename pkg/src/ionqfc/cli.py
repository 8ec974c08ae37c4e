"""Command-line entry point (``ionqfc``)."""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis as an
from .atomic import attempt_rate
from .converter import ConversionCurve, matched_operating_point, write_curve_csv
from .entangled import BELL, SWAPPED_BELL, dm, depolarize
from .harness import (HWP_SCAN_DEG, PHASE_SCAN_RAD, ROTATED_HWP_OFFSET, CorrelationResult,
                      ExperimentConfig, build_apparatus, calibrate, load_config,
                      max_correlation_setting, rate_summary, run_experiment, run_fringe_scan,
                      run_phase_scan, write_scan_csv, write_timetags)


def _table(header, rows) -> str:
    cols = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cols) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cols)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _config(args, wavelength=None) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if wavelength is not None and wavelength != cfg.wavelength:
        cfg = cfg.for_wavelength(wavelength)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def _bounds_rows(b: an.FidelityBounds):
    return [["lower", f"{b.lower:.4f}", f"{b.lower_stderr:.4f}"],
            ["upper", f"{b.upper:.4f}", f"{b.upper_stderr:.4f}"]]


def _bounds_ok(b: an.FidelityBounds) -> bool:
    return b.consistent and not b.convention_mismatch and not b.clamped


# -- commands ------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _config(args, args.wavelength)
    run = run_experiment(cfg)
    path = _out(args, f"timetags_{cfg.wavelength}.csv")
    write_timetags(run.records, path)
    b = run.bounds
    print(f"wavelength {cfg.wavelength} nm, seed {cfg.seed}: {len(run.records)} events, "
          f"{run.total_attempts} attempts")
    print(f"max-correlation HWP {run.hwp_opt:.2f} deg, RF phase {run.phase_opt:.3f} rad")
    print(_table(["bound", "value", "stderr"], _bounds_rows(b)))
    for note in b.notes:
        print(f"warning: {note}")
    print(f"time tags -> {path}")
    return 0 if _bounds_ok(b) else 1


def _scan_report(results, col):
    rows = [[f"{r.setting_value:.4f}", f"{r.p1_given_H:.3f}", f"{r.p1_given_V:.3f}",
             r.n_events] for r in results]
    return _table([col, "P(1|H)", "P(1|V)", "n"], rows)


def cmd_scan_hwp(args) -> int:
    cfg = _config(args, args.wavelength)
    app = build_apparatus(cfg)
    rng = np.random.default_rng(cfg.seed)
    scan = run_fringe_scan(cfg, HWP_SCAN_DEG, rng, app)
    path = _out(args, f"scan_hwp_{cfg.wavelength}.csv")
    write_scan_csv(scan.results, path)
    fit = an.fit_fringe([r.setting_value for r in scan.results],
                        [r.p1_given_H for r in scan.results], 90.0)
    print(_scan_report(scan.results, "hwp_deg"))
    print(f"P(1|H) fit: visibility {fit.visibility:.3f}, residual rms {fit.residual_rms:.3f}")
    print(f"fringe -> {path}")
    return 0


def cmd_scan_phase(args) -> int:
    cfg = _config(args, args.wavelength)
    app = build_apparatus(cfg)
    rng = np.random.default_rng(cfg.seed)
    analyzer = calibrate(app)
    z = run_fringe_scan(cfg, HWP_SCAN_DEG, rng, app, analyzer)
    h = max_correlation_setting(z.results, 90.0, cfg.orientation)
    rotated = analyzer.with_angles(hwp_deg=h + ROTATED_HWP_OFFSET)
    scan = run_phase_scan(cfg, PHASE_SCAN_RAD, rng, app, rotated)
    path = _out(args, f"scan_phase_{cfg.wavelength}.csv")
    write_scan_csv(scan.results, path)
    fit = an.fit_fringe([r.setting_value for r in scan.results],
                        [r.p1_given_H for r in scan.results], 2 * np.pi)
    print(_scan_report(scan.results, "phase_rad"))
    print(f"P(1|H) fit: visibility {fit.visibility:.3f}, residual rms {fit.residual_rms:.3f}")
    print(f"fringe -> {path}")
    return 0


def cmd_convert_curve(args) -> int:
    curve = ConversionCurve()
    path = _out(args, "conversion_curve.csv")
    write_curve_csv(curve, path, n=args.points)
    pv, ph = matched_operating_point(curve, args.target)
    print(_table(["pol", "eta_peak", "pump_at_target"],
                 [["V", f"{curve.eta_peak_V:.3f}", f"{pv:.6f}"],
                  ["H", f"{curve.eta_peak_H:.3f}", f"{ph:.6f}"]]))
    print(f"curve -> {path}")
    return 0


def _results_by_setting(tags, kind):
    mask = tags["setting_kind"] == kind
    out = []
    for v in np.unique(tags["setting_value"][mask]):
        sel = mask & (tags["setting_value"] == v)
        out.append(CorrelationResult(kind, float(v), an.counts_from_tags(tags, sel)))
    return out


def _basis_counts(tags, fixed_kind, scan_kind, period, orientation):
    if np.any(tags["setting_kind"] == fixed_kind):
        return an.counts_from_tags(tags, tags["setting_kind"] == fixed_kind)
    results = _results_by_setting(tags, scan_kind)
    if len(results) < 5:
        raise ValueError(f"no {fixed_kind} records and too few {scan_kind} settings")
    best = max_correlation_setting(results, period, orientation)
    x = np.array([r.setting_value for r in results])
    dist = np.abs((x - best + period / 2) % period - period / 2)
    return results[int(np.argmin(dist))].counts


def cmd_analyze_fidelity(args) -> int:
    tags = an.read_timetags(args.tags)
    if tags["wavelength"].size == 0:
        print("error: no events in file", file=sys.stderr)
        return 1
    wl = int(np.bincount(tags["wavelength"]).argmax())
    orient = 1 if wl == 493 else -1
    z = _basis_counts(tags, "z_basis", "hwp_scan", 90.0, orient)
    x = _basis_counts(tags, "x_basis", "phase_scan", 2 * np.pi, orient)
    elems = an.density_elements(z, x, args.equal_marginals)
    b = an.fidelity_bounds(elems, wl, rng=np.random.default_rng(args.seed or 0))
    print(f"convention {wl}: {int(z.sum())} unrotated, {int(x.sum())} rotated events")
    rows = [[k, f"{v:.4f}"] for k, v in elems.as_dict().items()]
    print(_table(["element", "value"], rows))
    print(_table(["bound", "value", "stderr"], _bounds_rows(b)))
    for note in b.notes:
        print(f"warning: {note}")
    if args.out:
        _write_csv(args.out, ["quantity", "value", "stderr"],
                   [["lower", b.lower, b.lower_stderr], ["upper", b.upper, b.upper_stderr]]
                   + [[k, v, ""] for k, v in elems.as_dict().items()]
                   + [["clamped", int(b.clamped), ""],
                      ["convention_mismatch", int(b.convention_mismatch), ""]])
    return 0 if _bounds_ok(b) else 1


def cmd_analyze_rate(args) -> int:
    tags = an.read_timetags(args.tags)
    gaps = an.gaps_from_tags(tags)
    if gaps.size and np.any(gaps < 1):
        print("error: attempt indices are not strictly increasing", file=sys.stderr)
        return 1
    fit = an.fit_gap_distribution(gaps, args.attempt_rate)
    rows = [["mean_gap", f"{fit.mean_gap:.2f}", f"{fit.ci95[0]:.2f}", f"{fit.ci95[1]:.2f}"],
            ["rate_per_s", f"{fit.rate:.2f}", f"{fit.rate_ci95[0]:.2f}", f"{fit.rate_ci95[1]:.2f}"]]
    print(f"{fit.n} gaps")
    print(_table(["quantity", "estimate", "ci95_low", "ci95_high"], rows))
    if fit.zero_variance:
        print("warning: all gaps identical (zero variance)")
    if args.out:
        _write_csv(args.out, ["quantity", "estimate", "ci95_low", "ci95_high"], rows)
    return 0


def cmd_budget(args) -> int:
    cfg = _config(args)
    rows = an.error_budget_report(cfg.budget, args.wavelength)
    print(f"error budget at {args.wavelength} nm (infidelity, %)")
    print(an.format_budget(rows))
    if args.out:
        an.write_budget_csv(rows, args.out)
    rs = rate_summary(cfg.for_wavelength(args.wavelength))
    print(f"per-attempt success {rs['p_success']:.3e} (1/{rs['mean_gap']:.0f}), "
          f"{rs['event_rate']:.1f} events/s at {rs['attempt_rate']:.0f} attempts/s")
    return 0


def cmd_validate(args) -> int:
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    checks = []
    r = an.bounds_bracket_check(dm(BELL), 100_000, rng)
    checks.append(("Bell state, 1e5 events", r.passed, str(r)))
    r = an.bounds_bracket_check(depolarize(dm(BELL), 0.1), 100_000, rng)
    checks.append(("Bell + 10% white noise", r.passed, str(r)))
    r = an.bounds_bracket_check(dm(SWAPPED_BELL), 100_000, rng, convention=780)
    checks.append(("swapped Bell, 780 convention", r.passed, str(r)))
    n_ok = sum(an.bounds_bracket_check(an.random_density_matrix(rng), 5000, rng,
                                       n_boot=400).passed for _ in range(args.n_random))
    need = int(np.ceil(0.98 * args.n_random))
    checks.append((f"{args.n_random} random states", n_ok >= need, f"{n_ok}/{args.n_random} bracketed"))
    worst = -np.inf
    ok_sep = True
    for _ in range(args.n_product):
        st = an.random_product_state(rng)
        z = an.sample_counts(an.basis_probabilities(st, "z"), 5000, rng)
        x = an.sample_counts(an.basis_probabilities(st, "x"), 5000, rng)
        b = an.fidelity_bounds(an.density_elements(z, x), 493, n_boot=400, rng=rng)
        worst = max(worst, b.lower_raw - 0.5 - 3 * b.lower_stderr)
        ok_sep &= b.lower_raw <= 0.5 + 3 * b.lower_stderr
    checks.append((f"{args.n_product} product states", ok_sep,
                   f"max(lower - 0.5 - 3 sigma) = {worst:+.4f}"))
    print(_table(["check", "result", "detail"],
                 [[n, "PASS" if ok else "FAIL", d] for n, ok, d in checks]))
    if args.out:
        _write_csv(args.out, ["check", "passed", "detail"], [[n, int(ok), d] for n, ok, d in checks])
    return 0 if all(ok for _, ok, _ in checks) else 1


# -- parser --------------------------------------------------------------------

def _common(default) -> argparse.ArgumentParser:
    c = argparse.ArgumentParser(add_help=False, argument_default=default)
    c.add_argument("--config", help="key = value configuration file")
    c.add_argument("--seed", type=int, help="random seed")
    c.add_argument("--out", help="output path (CSV)")
    return c


def build_parser() -> argparse.ArgumentParser:
    # subcommands suppress their defaults so options given before the
    # subcommand name are not overwritten
    common = _common(argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="ionqfc", parents=[_common(None)],
                                description="Ion-photon entanglement and frequency conversion simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    for name, func, help_ in (("simulate", cmd_simulate, "full run to a time-tag file"),
                              ("scan-hwp", cmd_scan_hwp, "unrotated-basis HWP fringe"),
                              ("scan-phase", cmd_scan_phase, "rotated-basis RF phase fringe")):
        sp = add(name, func, help_)
        sp.add_argument("--wavelength", type=int, choices=(493, 780), default=None)

    sp = add("convert-curve", cmd_convert_curve, "conversion efficiency versus pump")
    sp.add_argument("--points", type=int, default=101)
    sp.add_argument("--target", type=float, default=0.345)

    ana = sub.add_parser("analyze", help="analyze a time-tag file")
    asub = ana.add_subparsers(dest="what", required=True)
    sp = asub.add_parser("fidelity", parents=[common], help="fidelity bounds")
    sp.add_argument("tags")
    sp.add_argument("--equal-marginals", action="store_true", help="fix P(gamma) = 1/2")
    sp.set_defaults(func=cmd_analyze_fidelity)
    sp = asub.add_parser("rate", parents=[common], help="gap distribution and rate")
    sp.add_argument("tags")
    sp.add_argument("--attempt-rate", type=float, default=attempt_rate())
    sp.set_defaults(func=cmd_analyze_rate)

    sp = add("budget", cmd_budget, "itemized error budget")
    sp.add_argument("--wavelength", type=int, choices=(493, 780), default=493)

    sp = add("validate", cmd_validate, "bound bracketing suite")
    sp.add_argument("--n-random", type=int, default=50)
    sp.add_argument("--n-product", type=int, default=200)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
