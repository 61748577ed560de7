"""Command-line front end: ``nvstorm {simulate,reconstruct,odmr,sweep,info}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as _config
from . import experiments as ex
from .localization import write_localizations_csv
from .nvfs import NvfsError, read_header, read_stack, write_stack
from .odmr import ScheduleError, ZeroCrossingNotFound, write_report, write_spectra_csv
from .reconstruction import RenderedImage, export_image, write_cluster_csv

EXIT_OK, EXIT_CONFIG, EXIT_NO_RESULT, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("nvstorm")


class NoResult(RuntimeError):
    pass


def _out(args) -> Path:
    p = Path(args.output or args.cfg.experiment.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _load_config(args) -> _config.ExperimentConfig:
    cfg = _config.load(args.config) if args.config else _config.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _write_csv(path: Path, rows: list[dict], comments: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _read_stack(path: str):
    stack = read_stack(path)
    log.info("read %s: %d frames", path, len(stack))
    return stack


def cmd_simulate(args) -> int:
    cfg = args.cfg
    if not cfg.emitters:
        log.warning("configuration has no emitters; the stack is background only")
    out = _out(args)
    run = ex.run_simulation(cfg, args.threads)
    prov = cfg.provenance()
    write_stack(run.stack, out / "stack.nvfs")
    # the container has no metadata block, so provenance travels next to it
    write_report(out / "stack.nvfs.meta", {"frames": len(run.stack), "exposure_s": run.stack.camera.exposure_s}, prov)
    _write_csv(out / "ground_truth.csv", ex.ground_truth_rows(run), prov)
    with open(out / "config.toml", "w") as fh:
        fh.write("".join(f"# {line}\n" for line in prov))
        fh.write(cfg.to_toml())
    _say(args, f"wrote {len(run.stack)} frames to {out / 'stack.nvfs'}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = args.cfg
    if args.render_pixel is not None:
        cfg = cfg.model_copy(update={"analysis": cfg.analysis.model_copy(update={"render_pixel_nm": args.render_pixel})})
    if args.min_photons is not None or args.max_photons is not None:
        upd = {k: v for k, v in (("min_photons", args.min_photons), ("max_photons", args.max_photons)) if v is not None}
        cfg = _config.from_dict({**cfg.resolved(), "selection": {**cfg.resolved()["selection"], **upd}})
    stack = _read_stack(args.stack)
    try:
        rec = ex.reconstruct(stack, cfg)
    except ValueError as exc:
        raise NoResult(f"{exc}: none of {len(stack)} frames accepted") from None
    out = _out(args)
    prov = cfg.provenance()
    write_localizations_csv(rec.result.localizations, out / "localizations.csv", prov)
    write_cluster_csv(rec.clusters, out / "clusters.csv", prov, rec.line_fwhm_nm)
    export_image(rec.image, out / "image.pgm", {"provenance": "; ".join(prov)})
    summ = rec.result.summary()
    _say(args, "frames {frames} accepted {accepted} empty {empty} multi_emitter {multi_emitter} "
               "asymmetric {asymmetric} bad_fit {bad_fit}".format(**summ))
    for k, (c, f) in enumerate(zip(rec.clusters, rec.line_fwhm_nm)):
        flag = " low-confidence" if c.low_confidence else ""
        _say(args, f"cluster {k}: x={c.mean_x_nm:.2f} y={c.mean_y_nm:.2f} nm M={c.M} "
                   f"sigma={c.sigma_cluster_nm:.2f} accuracy={c.accuracy_nm:.3f} fwhm={f:.2f} nm{flag}")
    return EXIT_OK


def cmd_odmr(args) -> int:
    cfg = args.cfg
    if cfg.schedule is None:
        raise _config.ConfigError(["schedule: required for odmr analysis"], args.config)
    stack = _read_stack(args.stack)
    sched = cfg.mw_schedule()
    sched.index_of(stack.mw_tags_mhz)
    out = _out(args)
    prov = cfg.provenance()
    if args.mode == "difference":
        try:
            dr = ex.difference_run(stack, cfg)
        except (ZeroCrossingNotFound, ValueError) as exc:
            raise NoResult(str(exc)) from None
        meta = {"provenance": "; ".join(prov)}
        pos = RenderedImage(np.clip(dr.image.grid, 0, None), dr.image.origin_x_nm, dr.image.origin_y_nm,
                            dr.image.pixel_nm, dr.image.normalization)
        neg = RenderedImage(np.clip(-dr.image.grid, 0, None), dr.image.origin_x_nm, dr.image.origin_y_nm,
                            dr.image.pixel_nm, dr.image.normalization)
        export_image(pos, out / "difference_pos.pgm", {**meta, "part": "positive"})
        export_image(neg, out / "difference_neg.pgm", {**meta, "part": "negative"})
        report = {
            "zero_crossing_x_nm": dr.crossing.x_nm, "zero_crossing_y_nm": dr.crossing.y_nm,
            "scan_start_x_nm": float(dr.p1[0]), "scan_start_y_nm": float(dr.p1[1]),
            "scan_end_x_nm": float(dr.p2[0]), "scan_end_y_nm": float(dr.p2[1]),
            "profile_depth": dr.crossing.depth, "localizations_used": dr.n_locs, "photons_used": dr.photons,
        }
        write_report(out / "zero_crossing.txt", report, prov)
        _say(args, f"zero crossing at x={dr.crossing.x_nm:.2f} y={dr.crossing.y_nm:.2f} nm")
        return EXIT_OK
    try:
        sr = ex.spectrum_run(stack, cfg)
    except ValueError as exc:
        raise NoResult(str(exc)) from None
    write_spectra_csv(sr.spectra, out / "spectra.csv", prov)
    report: dict = {"total_time_s": sr.total_time_s, "exposure_s": stack.camera.exposure_s}
    for k, (c, f, err, dB) in enumerate(zip(sr.clusters, sr.fits, sr.errors, sr.sensitivity_t)):
        report[f"cluster{k}.mean_x_nm"] = c.mean_x_nm
        report[f"cluster{k}.mean_y_nm"] = c.mean_y_nm
        report[f"cluster{k}.bursts"] = int(sr.spectra[k].counts.sum())
        if f is None:
            report[f"cluster{k}.resonance"] = "none"
            report[f"cluster{k}.fit_error"] = err
            _say(args, f"cluster {k}: no resonance ({err})")
            continue
        report[f"cluster{k}.resonance"] = "hyperfine_triplet"
        for name in ("center_mhz", "hyperfine_mhz", "fwhm_mhz", "contrast", "baseline", "sigma_gamma"):
            report[f"cluster{k}.{name}"] = float(getattr(f, name))
        report[f"cluster{k}.sensitivity_t_per_sqrt_hz"] = dB
        _say(args, f"cluster {k}: spacing {f.hyperfine_mhz:.3f} MHz, contrast {f.contrast:.3f}, "
                   f"sensitivity {dB * 1e6:.1f} uT/sqrt(Hz)")
    write_report(out / "sensitivity.txt", report, prov)
    if all(f is None for f in sr.fits):
        _say(args, "no cluster shows a resolved resonance")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = args.cfg
    var = args.variable or cfg.sweep.variable
    out = _out(args)
    prov = cfg.provenance()
    if var == "tau_on":
        pts = ex.tau_on_experiment(cfg, threads=args.threads)
        rows = [{"tau_on_s": p.tau_on_s, "predicted_fwhm_nm": p.predicted_fwhm_nm,
                 "measured_fwhm_nm": p.measured_fwhm_nm, "rendered_fwhm_nm": p.rendered_fwhm_nm,
                 "bursts": p.bursts} for p in pts]
        s = ex.tau_on_summary(pts)
        prov = prov + [f"minimum at tau_on={s['tau_min_s']:.3f} s, fwhm={s['fwhm_min_nm']:.2f} nm, unimodal={s['unimodal']}"]
    elif var == "separation":
        if cfg.schedule is None or len(cfg.emitters) < 2:
            raise _config.ConfigError(["separation sweep needs a schedule and two emitters"], args.config)
        pts = ex.separation_experiment(cfg, threads=args.threads)
        rows = [{"d_nm": p.d_nm, "predicted_photons": p.predicted_photons, "measured_photons": p.required_photons,
                 "depth_mean": p.depth_mean, "depth_std": p.depth_std} for p in pts]
    else:
        if not cfg.emitters:
            raise _config.ConfigError(["emitters: the accuracy sweep needs one emitter"], args.config)
        res = ex.accuracy_experiment(cfg, threads=args.threads)
        rows = [{"M": p.M, "predicted_nm": p.predicted_nm, "measured_nm": p.measured_nm, "samples": p.samples}
                for p in res.points]
        prov = prov + [f"log-log slope {res.slope:.4f}, pool {res.pool} bursts"]
    path = out / f"sweep_{var}.csv"
    _write_csv(path, rows, prov)
    _say(args, f"wrote {path}")
    return EXIT_OK


def cmd_info(args) -> int:
    h = read_header(args.stack)
    for k, v in h.items():
        print(f"{k} = {v}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    def common(p, suppress: bool):
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        p.add_argument("--config", metavar="PATH", default=d(None), help="TOML config file or preset name")
        p.add_argument("--seed", type=int, metavar="N", default=d(None), help="override the configured seed")
        p.add_argument("--threads", type=int, metavar="N", default=d(1), help="worker threads for rendering")
        p.add_argument("--output", metavar="DIR", default=d(None), help="output directory")
        p.add_argument("-q", "--quiet", action="store_true", default=d(False), help="suppress progress output")

    parser = argparse.ArgumentParser(prog="nvstorm", description=__doc__)
    parser.add_argument("--version", action="version", version=f"nvstorm {__version__}")
    common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a frame stack from a config")
    common(p, True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="localize, cluster and render a stack")
    p.add_argument("stack")
    p.add_argument("--render-pixel", type=float, metavar="NM")
    p.add_argument("--min-photons", type=int)
    p.add_argument("--max-photons", type=int)
    common(p, True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("odmr", help="difference image or per-emitter spectra")
    p.add_argument("stack")
    p.add_argument("--mode", choices=("difference", "spectrum"), default="difference")
    common(p, True)
    p.set_defaults(func=cmd_odmr)

    p = sub.add_parser("sweep", help="exposure, separation or burst-count sweep")
    p.add_argument("--variable", choices=("tau_on", "separation", "M"))
    common(p, True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("info", help="print a stack header")
    p.add_argument("stack")
    common(p, True)
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command != "info":
            args.cfg = _load_config(args)
        return args.func(args)
    except _config.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ScheduleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoResult as exc:
        print(f"error: no result: {exc}", file=sys.stderr)
        return EXIT_NO_RESULT
    except (NvfsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
