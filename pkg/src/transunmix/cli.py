"""Command-line entry point: ``transunmix <command> ...``.

Exit codes: 0 success, 1 usage, 2 data/format problem, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .classical import (
    ConditioningError,
    DegenerateDataError,
    match_endmembers,
    rmse,
    sad,
    vca,
    fclsu,
)
from .io import (
    FormatError,
    export_abundance_pgm,
    export_endmembers_csv,
    read_abundances,
    read_endmembers_csv,
    read_hsic,
    save_checkpoint,
    write_abundances,
    write_hsic,
    write_json,
)
from .mixing import AbundanceCube, EndmemberMatrix, SceneConfig, synth_scene
from .tensor import ConfigurationError, DimensionError
from .training import PROFILES, NumericalError, build_model, predict, split_profile, train

log = logging.getLogger("transunmix")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SWEEP_PARAMS = ("gamma", "beta", "lr0", "weight_decay")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Profiles
# ---------------------------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_profile(profile: str, overrides: list[str] | None = None) -> dict:
    """Flat settings dict from a built-in name or a JSON file, plus key=value overrides.

    A JSON profile may name a built-in under ``"base"`` and override any key.
    """
    if profile in PROFILES:
        settings = dict(PROFILES[profile])
    else:
        path = Path(profile)
        if not path.exists():
            raise UsageError(f"unknown profile {profile!r} (built-ins: {', '.join(PROFILES)})")
        custom = json.loads(path.read_text())
        base = custom.pop("base", None)
        if base is not None and base not in PROFILES:
            raise UsageError(f"profile {profile}: unknown base {base!r}")
        settings = dict(PROFILES[base]) if base else {}
        settings.update(custom)
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"override {item!r} is not key=value")
        settings[key] = _parse_value(value)
    return settings


def _run_record(args, argv: list[str], resolved: dict) -> dict:
    return {
        "toolkit": "transunmix",
        "version": __version__,
        "command": args.command,
        "argv": argv,
        "seed": resolved.get("seed", getattr(args, "seed", None)),
        "resolved": resolved,
    }


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args, argv) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = SceneConfig(B=args.B, H=args.H, W=args.W, R=args.R, snr_db=args.snr,
                      dirichlet_alpha=args.alpha, smoothing_sigma=args.sigma, seed=args.seed)
    cube, E, A = synth_scene(cfg)
    write_hsic(cube, out / "cube.hsic")
    export_endmembers_csv(E, None, out / "E.csv")
    write_abundances(A, out / "A.hsic")
    resolved = {k: getattr(cfg, k) for k in ("B", "H", "W", "R", "snr_db", "dirichlet_alpha",
                                              "smoothing_sigma", "endmember_model", "seed")}
    write_json(_run_record(args, argv, resolved), out / "run.json")
    return EXIT_OK


def cmd_vca(args, argv) -> int:
    cube = read_hsic(args.input)
    E = vca(cube.as_matrix(), args.r, seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    export_endmembers_csv(E, cube.wavelengths, args.out)
    write_json(_run_record(args, argv, {"R": args.r, "seed": args.seed}),
               Path(args.out).with_name("run.json"))
    return EXIT_OK


def cmd_fclsu(args, argv) -> int:
    cube = read_hsic(args.input)
    E, _ = read_endmembers_csv(args.endmembers)
    A = fclsu(cube.as_matrix(), E, cube.height, cube.width)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_abundances(A, args.out)
    write_json(_run_record(args, argv, {"endmembers": str(args.endmembers)}),
               Path(args.out).with_name("run.json"))
    return EXIT_OK


def _train_one(cube, settings: dict):
    model_cfg, train_cfg = split_profile(settings, cube.data.shape)
    params = build_model(cube, model_cfg, seed=train_cfg.seed)
    params, history = train(cube, params, train_cfg)
    return model_cfg, train_cfg, params, history


def cmd_train(args, argv) -> int:
    settings = resolve_profile(args.profile, args.set)
    cube = read_hsic(args.input)
    if args.seed is not None:
        settings["seed"] = args.seed
    model_cfg, train_cfg, params, history = _train_one(cube, settings)
    M, E_hat, _ = predict(cube, params)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / "checkpoint.hsck", extra={"train": train_cfg.__dict__})
    history.to_csv(out / "history.csv")
    export_endmembers_csv(E_hat, cube.wavelengths, out / "E_hat.csv")
    write_abundances(M, out / "A_hat.hsic")
    export_abundance_pgm(M, out / "maps")
    resolved = {"model": model_cfg.to_dict(), "train": dict(train_cfg.__dict__)}
    write_json(_run_record(args, argv, {**resolved, "seed": train_cfg.seed}), out / "run.json")
    log.info("final loss %.6g after %d epochs", history.loss[-1], len(history))
    return EXIT_OK


def evaluate(pred_a: AbundanceCube, ref_a: AbundanceCube, pred_e: EndmemberMatrix | None,
             ref_e: EndmemberMatrix | None) -> dict:
    """Align estimates to the reference (by SAD when endmembers are given) and score them."""
    if pred_e is not None and ref_e is not None:
        perm = match_endmembers(pred_e, ref_e)
        e_aligned = perm.apply_columns(pred_e.E)
        a_aligned = perm.apply_rows(pred_a.data)
        angles = sad(e_aligned, ref_e)
    else:
        perm, a_aligned, angles = None, pred_a.data, None
    errors = rmse(a_aligned, ref_a.data)
    names = ref_e.labels() if ref_e is not None else [f"em{k + 1}" for k in range(ref_a.R)]
    return {"names": names, "permutation": None if perm is None else list(perm.mapping),
            "rmse": errors, "sad": angles}


def format_table(result: dict, degrees: bool = False) -> str:
    unit = "deg" if degrees else "rad"
    scale = 180.0 / np.pi if degrees else 1.0
    lines = [f"{'class':<12} {'RMSE':>10} {'SAD(' + unit + ')':>12}"]
    for k, name in enumerate(result["names"]):
        s = "" if result["sad"] is None else f"{result['sad'].per_endmember[k] * scale:.4f}"
        lines.append(f"{name:<12} {result['rmse'].per_endmember[k]:>10.4f} {s:>12}")
    s = "" if result["sad"] is None else f"{result['sad'].overall * scale:.4f}"
    lines.append(f"{'Overall':<12} {result['rmse'].overall:>10.4f} {s:>12}")
    return "\n".join(lines)


def cmd_eval(args, argv) -> int:
    pred_a, ref_a = read_abundances(args.pred_a), read_abundances(args.ref_a)
    pred_e = read_endmembers_csv(args.pred_e)[0] if args.pred_e else None
    ref_e = read_endmembers_csv(args.ref_e)[0] if args.ref_e else None
    print(format_table(evaluate(pred_a, ref_a, pred_e, ref_e), args.degrees))
    return EXIT_OK


def cmd_sweep(args, argv) -> int:
    base = resolve_profile(args.profile, args.set)
    cube = read_hsic(args.input)
    ref_a = read_abundances(args.ref_a) if args.ref_a else None
    ref_e = read_endmembers_csv(args.ref_e)[0] if args.ref_e else None
    rows = []
    for value in args.values:
        settings = dict(base, **{args.param: value})
        _, _, params, history = _train_one(cube, settings)
        row = {args.param: value, "final_loss": history.loss[-1], "rmse": "", "sad": ""}
        if ref_a is not None:
            M, E_hat, _ = predict(cube, params)
            scores = evaluate(AbundanceCube(M), ref_a, EndmemberMatrix(E_hat), ref_e)
            row["rmse"] = scores["rmse"].overall
            row["sad"] = "" if scores["sad"] is None else scores["sad"].overall
        rows.append(row)
        log.info("%s=%g loss=%.6g", args.param, value, row["final_loss"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=[args.param, "final_loss", "rmse", "sad"])
        writer.writeheader()
        writer.writerows(rows)
    best = min(rows, key=lambda r: r["final_loss"])
    print(f"best {args.param} by final loss: {best[args.param]}")
    write_json(_run_record(args, argv, {"base": base, "param": args.param, "values": args.values}),
               out.with_name("run.json"))
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    record = json.loads(Path(args.record).read_text())
    replayed = list(record["argv"])
    if args.out is not None:
        for flag in ("--out",):
            if flag in replayed:
                replayed[replayed.index(flag) + 1] = args.out
    return main(replayed)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="transunmix", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--out", required=True)
    p.add_argument("--B", type=int, default=64)
    p.add_argument("--H", type=int, default=32)
    p.add_argument("--W", type=int, default=32)
    p.add_argument("--R", type=int, default=3)
    p.add_argument("--snr", type=float, default=30.0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=0.0, help="spatial smoothing (pixels)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("vca", help="extract endmembers with VCA")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vca)

    p = sub.add_parser("fclsu", help="fully constrained least-squares abundances")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--endmembers", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fclsu)

    p = sub.add_parser("train", help="train the unmixing network on one image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--profile", required=True, help="samson | apex | wdc | path to JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score abundances/endmembers against a reference")
    p.add_argument("--pred-a", required=True)
    p.add_argument("--ref-a", required=True)
    p.add_argument("--pred-e")
    p.add_argument("--ref-e")
    p.add_argument("--degrees", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid search over one training hyperparameter")
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True, nargs="+", type=float)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--ref-a")
    p.add_argument("--ref-e")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("replay", help="re-run the command recorded in a run.json")
    p.add_argument("record")
    p.add_argument("--out", default=None, help="redirect outputs")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, ConditioningError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, DimensionError, ConfigurationError, DegenerateDataError,
            FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
