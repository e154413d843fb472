"""Command-line driver: ``dudodp {gen,build-prior,run,ablate,mask-sweep,report}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 denoiser error.
Logs go to standard error; results only to files.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .errors import ConfigurationError, ContractError, DataError, DenoiserUnavailable

EXIT_CONFIG, EXIT_DATA, EXIT_DENOISER = 2, 3, 4

log = logging.getLogger("dudodp")


def _config(args, data_dir=None) -> dict:
    path = args.config
    if path is None and data_dir is not None and (Path(data_dir) / "config.json").exists():
        path = Path(data_dir) / "config.json"
    return ex.load_config(path, args.set or ())


def _denoiser_spec(args) -> dict:
    if args.denoiser:
        return {"command": args.denoiser}
    if args.prior:
        return {"prior": str(args.prior)}
    raise ConfigurationError("give --prior DIR or --denoiser COMMAND")


def cmd_gen(args):
    cfg = _config(args)
    manifest = ex.generate_dataset(cfg, args.out)
    log.info("wrote %d cases to %s", len(manifest["cases"]), args.out)


def cmd_build_prior(args):
    cfg = _config(args)
    ex.build_prior(cfg, args.out)


def cmd_run(args):
    cfg = _config(args, args.data)
    spec = _denoiser_spec(args) if args.method == "dudodp" else None
    ex.run_method(cfg, args.data, args.method, denoiser_spec=spec, out_dir=args.out, jobs=args.jobs,
                  emit_trace=args.emit_trace, limit=args.limit)


def cmd_ablate(args):
    cfg = _config(args, args.data)
    rep = ex.ablate(cfg, args.data, _denoiser_spec(args), args.out, jobs=args.jobs, limit=args.limit)
    for row in rep["rows"]:
        log.info("(%s) %-16s %.3f dB", row["label"], row["mode"], row["psnr"])


def cmd_mask_sweep(args):
    cfg = _config(args, args.data)
    rep = ex.mask_sweep(cfg, args.data, _denoiser_spec(args), args.out, jobs=args.jobs, limit=args.limit)
    log.info("best dynamic %.3f dB, constant %.3f dB, spread %.3f dB", rep["best_dynamic"]["psnr"],
             rep["constant_psnr"], rep["dynamic_spread_db"])


def cmd_report(args):
    ex.combine_reports(args.runs, args.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dudodp", description="Dual-domain diffusion-prior metal artifact reduction.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=False, method=False):
        sp.add_argument("--config", type=Path, help="JSON config (defaults: built-in, or the dataset's)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
        sp.add_argument("-o", "--out", type=Path, required=True, help="output directory")
        if data:
            sp.add_argument("--data", type=Path, required=True, help="dataset directory from 'gen'")
            sp.add_argument("--jobs", type=int, default=1, help="parallel case workers")
            sp.add_argument("--limit", type=int, help="only the first N cases")
        if method:
            sp.add_argument("--prior", type=Path, help="template prior directory from 'build-prior'")
            sp.add_argument("--denoiser", help="external denoiser plugin command line")
        return sp

    common(sub.add_parser("gen", help="simulate the metal-artifact dataset")).set_defaults(fn=cmd_gen)
    common(sub.add_parser("build-prior", help="build the template prior")).set_defaults(fn=cmd_build_prior)

    run = sub.add_parser("run", help="run one method over the dataset")
    common(run, data=True, method=True)
    run.add_argument("--method", choices=ex.METHODS, default="dudodp")
    run.add_argument("--emit-trace", action="store_true", help="save every fused intermediate image")
    run.set_defaults(fn=cmd_run)

    for name, fn, text in (("ablate", cmd_ablate, "module ablation (a)-(d)"),
                           ("mask-sweep", cmd_mask_sweep, "dynamic weight mask grid")):
        sp = sub.add_parser(name, help=text)
        common(sp, data=True, method=True)
        sp.set_defaults(fn=fn)

    rep = sub.add_parser("report", help="merge run directories into one table")
    rep.add_argument("runs", nargs="+", type=Path)
    rep.add_argument("-o", "--out", type=Path, required=True)
    rep.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    if getattr(args, "jobs", 1) < 1:
        log.error("--jobs must be >= 1")
        return EXIT_CONFIG
    try:
        args.fn(args)
    except ConfigurationError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except DenoiserUnavailable as exc:
        log.error("denoiser error: %s", exc)
        return EXIT_DENOISER
    except (DataError, ContractError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    finally:
        ex.close_denoisers()
    return 0


if __name__ == "__main__":
    sys.exit(main())
