"""``mashvco`` command line: run recipes, compare results, theory, calibration."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import calibration as cal
from . import experiments as ex
from . import mash
from . import signalcore as sc
from . import theory

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_BREACH = 3

NUMERICAL_ERRORS = (sc.FitError, cal.ConvergenceError, cal.CalibrationError,
                    np.linalg.LinAlgError, ArithmeticError)


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which would read as a numerical failure
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mashvco", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", help="run a bundled recipe or a YAML spec file")
    r.add_argument("spec", help="recipe name or path to a spec file")
    r.add_argument("overrides", nargs="*", metavar="key=value",
                   help="override a spec field; bare keys address the config section")
    r.add_argument("--out", help=f"result directory (default ${ex.OUTPUT_ROOT_ENV}/<name>)")
    r.add_argument("--workers", type=int, default=1, help="parallel simulation processes")
    r.add_argument("--no-plots", action="store_true", help="skip PNG figures")

    sub.add_parser("list", help="list bundled recipes")

    c = sub.add_parser("compare", help="compare headline metrics of two runs")
    c.add_argument("a", help="manifest.json or result directory")
    c.add_argument("b")
    c.add_argument("--tol-db", type=float, default=0.5)

    t = sub.add_parser("theory", help="closed-form SQNR versus OSR")
    t.add_argument("--osr", type=float, nargs="+", default=[2, 4, 8, 16, 32, 64, 128])
    t.add_argument("--amplitude-fraction", type=float, default=1.0)
    t.add_argument("--csv", help="also write the table to this CSV file")
    t.add_argument("params", nargs="*", metavar="key=value", help="config overrides, e.g. n_phi2=16")

    k = sub.add_parser("calibrate", help="fit the correction model on a single-tone capture")
    k.add_argument("--capture", required=True, help="stream CSV (with # rate= header)")
    k.add_argument("--out", required=True, help="model JSON to write")
    k.add_argument("--f-in", type=float, help="tone frequency guess (default: spectral peak)")
    k.add_argument("--rate", type=float, help="sample rate if the CSV has no header")
    k.add_argument("--osr", type=int, default=16)
    k.add_argument("--pre-factor", type=int, default=4)
    k.add_argument("--orders", type=int, nargs=3, default=[5, 5, 2], metavar=("NI", "NJ", "NK"))
    k.add_argument("--hex", action="store_true", help="also write the two LUTs as hex files")

    o = sub.add_parser("correct", help="apply a fitted correction to a stream")
    o.add_argument("--in", dest="inp", required=True, help="stream CSV")
    o.add_argument("--model", required=True, help="model JSON from `calibrate`")
    o.add_argument("--out", required=True, help="corrected (decimated) stream CSV")
    o.add_argument("--rate", type=float)
    o.add_argument("--float", action="store_true", help="floating-point model instead of the LUTs")
    return p


def _cmd_run(args) -> int:
    m = ex.run(args.spec, args.overrides, output_dir=args.out, workers=args.workers,
               plots=not args.no_plots)
    print(f"# {m.recipe} -> {m.output_dir}")
    print("metric,value")
    for k, v in m.headline.items():
        print(f"{k},{v:.4f}")
    return EXIT_OK


def _cmd_list(args) -> int:
    for name, kind, desc in ex.list_experiments():
        print(f"{name:18s} {kind:12s} {desc}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    cmp = ex.compare(args.a, args.b, args.tol_db)
    print("metric,a,b,delta")
    for k, a, b, d in cmp.rows:
        print(",".join([k] + ["" if v is None else f"{v:.4f}" for v in (a, b, d)]))
    if not cmp.ok:
        print(f"# {len(cmp.breaches)} metric(s) beyond {args.tol_db} dB: {', '.join(cmp.breaches)}",
              file=sys.stderr)
        return EXIT_BREACH
    return EXIT_OK


def _cmd_theory(args) -> int:
    params = dict(ex.parse_overrides(args.params))
    cfg = ex.build_config(params)
    p = theory.TheoryParams(
        fs=cfg.fs, osr=cfg.osr, n_phi1=cfg.n_phi1, n_phi2=cfg.n_phi2,
        f_range1=cfg.curve1.f_range, f_range2=cfg.curve2.f_range,
        f0_1=cfg.curve1.f0, f0_2=cfg.curve2.f0, amplitude_fraction=args.amplitude_fraction)
    rows = theory.sqnr_curve(p, args.osr)
    print("osr,sqnr_single_db,sqnr_mash_db")
    for osr, s1, s2 in rows:
        print(f"{osr:g},{s1:.3f},{s2:.3f}")
    if args.csv:
        theory.write_curve_csv(rows, args.csv)
    return EXIT_OK


def _read_stream(path, rate):
    try:
        return sc.read_csv(path, rate)
    except OSError as exc:
        raise ex.SpecError(f"{path}: {exc.strerror}") from None


def _peak_frequency(stream: sc.SampleStream) -> float:
    spec = sc.spectrum(stream, len(stream), 1, "hann")
    p = spec.power.copy()
    p[:4] = 0.0
    return float(spec.bin_freqs[int(np.argmax(p))])


def _cmd_calibrate(args) -> int:
    capture = _read_stream(args.capture, args.rate)
    f = args.f_in if args.f_in is not None else _peak_frequency(capture)
    run = cal.calibrate(capture, f, tuple(args.orders), args.osr, args.pre_factor)
    out = cal.save_model(run.model, args.out, run.lut,
                         {"osr": args.osr, "pre_factor": args.pre_factor})
    print(f"# model -> {out}")
    if args.hex:
        stem = Path(args.out).with_suffix("")
        for p in cal.write_lut_hex(run.lut, stem):
            print(f"# lut -> {p}")
    print(f"iterations,{run.model.iterations}")
    print(f"residual,{run.model.residual:.6g}")
    print(f"f_in,{run.fit.frequency:.6f}")
    return EXIT_OK


def _cmd_correct(args) -> int:
    stream = _read_stream(args.inp, args.rate)
    try:
        model, lut = cal.load_model(args.model)
        dparams = cal.read_decimation(args.model) or {"osr": 16, "pre_factor": 4}
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ex.SpecError(f"{args.model}: cannot read model ({exc})") from None
    dec = cal.DecimationSpec.default(dparams["osr"], dparams["pre_factor"])
    if args.float or lut is None:
        corrector = model
    else:
        corrector = lut
    stats = cal.CorrectionStats()
    out = cal.correct(stream, corrector, dec, stats=stats if corrector is lut else None)
    sc.write_csv(out, args.out)
    print(f"# corrected -> {args.out}")
    print(f"samples,{len(out)}")
    print(f"rate,{out.rate:.6g}")
    print(f"n_clamped,{stats.n_clamped}")
    print(f"n_saturated,{stats.n_saturated}")
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "list": _cmd_list, "compare": _cmd_compare, "theory": _cmd_theory,
            "calibrate": _cmd_calibrate, "correct": _cmd_correct}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except NUMERICAL_ERRORS as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ex.SpecError, mash.ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
