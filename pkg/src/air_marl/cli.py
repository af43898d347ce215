"""Operator entry point: train, evaluate, verify (oracle suite), plot.

Exit codes: 0 success, 1 runtime fault, 2 validation error, 3 resource limit.
The output root defaults to ./runs and can be overridden with AIR_RUN_DIR.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time

import numpy as np
import yaml

from . import envs, nn, oracle, trainer as trainer_mod
from . import value_decomposition as vd
from .errors import BudgetExceeded, ContractViolation, NumericFault
from .trainer import METRICS_COLUMNS, TrainConfig

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2
EXIT_RESOURCE = 3


def _run_root():
    return os.environ.get("AIR_RUN_DIR", "runs")


def _write_manifest(run_dir, config, seed):
    manifest = {
        "config": dataclasses.asdict(config),
        "seed": seed,
        "version": "air-marl 0.1.0",
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": {
            "metrics": "metrics.csv",
            "checkpoint": "final.ckpt",
        },
    }
    tmp = os.path.join(run_dir, "manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2)
    os.replace(tmp, os.path.join(run_dir, "manifest.json"))


def _load_config(args) -> TrainConfig:
    values = {}
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ContractViolation(f"cannot read config file: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ContractViolation("config file must hold a key/value mapping")
        values.update(loaded)
    overrides = {
        "env": args.env,
        "mixer": args.mixer,
        "total_steps": args.steps,
        "seed": args.seed,
    }
    if args.air is not None:
        overrides["air_enabled"] = args.air == "on"
    for key, val in overrides.items():
        if val is not None:
            values[key] = val
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(values) - known
    if unknown:
        raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
    if "env" not in values:
        raise ContractViolation("missing required config key 'env'")
    return TrainConfig(**values)


def cmd_train(args):
    try:
        config = _load_config(args)
        envs.make_env(config.env)  # validate before creating the run dir
    except (ContractViolation, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    run_dir = args.out or os.path.join(_run_root(), time.strftime("%Y%m%d-%H%M%S"))
    os.makedirs(run_dir, exist_ok=True)
    _write_manifest(run_dir, config, config.seed)
    try:
        _, metrics_path, ckpt_path = trainer_mod.run(config, run_dir)
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"run complete: {metrics_path} {ckpt_path}")
    return EXIT_OK


def cmd_eval(args):
    if args.episodes < 1:
        print("error: episodes must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        env = envs.make_env(args.env)
        with open(args.checkpoint, "rb") as fh:
            loaded = nn.load_params(fh.read(), requires_grad=False)
        spec = vd.AgentNetSpec(env.obs_dim, env.n_actions, args.hidden_dim)
        params = {k: v for k, v in loaded.items() if k.startswith("agent.")}
        expected = {}
        vd.init_agent_net(np.random.default_rng(0), spec, expected)
        if set(params) != set(expected) or any(
            params[k].data.shape != expected[k].data.shape for k in expected
        ):
            print("error: checkpoint does not match env dimensions", file=sys.stderr)
            return EXIT_VALIDATION
    except (ContractViolation, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    mean_ret, solve_rate, _ = trainer_mod.evaluate(env, spec, params, args.episodes, args.seed)
    print(f"mean_return {mean_ret:.6g}")
    print(f"solve_rate {solve_rate:.6g}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(f"mean_return={mean_ret:.12g}\n")
            fh.write(f"solve_rate={solve_rate:.12g}\n")
    return EXIT_OK


def cmd_verify(args):
    specs = None
    if args.spec:
        try:
            spec = envs.load_tabular_spec(args.spec)
        except ContractViolation as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        specs = [(os.path.basename(args.spec), spec)]
        if not spec.has_shared_observations():
            print(
                "note: observation functions differ across agents; the "
                "posterior/policy-ratio check is skipped because its "
                "cancellation requires a shared observation function"
            )
    try:
        results = oracle.run_all_checks(specs=specs)
    except BudgetExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    all_passed = True
    lines = []
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        all_passed &= res.passed
        line = (
            f"{status} {res.name} lhs={res.lhs:.12g} rhs={res.rhs:.12g} "
            f"error={res.error:.3e}"
        )
        if res.detail:
            line += f" {res.detail}"
        print(line)
        lines.append(res)
    if args.out:
        with open(args.out, "w") as fh:
            for res in lines:
                fh.write(
                    f"{res.name}.lhs={res.lhs:.17g}\n{res.name}.rhs={res.rhs:.17g}\n"
                    f"{res.name}.error={res.error:.17g}\n"
                    f"{res.name}.passed={int(res.passed)}\n"
                )
    print(f"{'all checks passed' if all_passed else 'SOME CHECKS FAILED'}")
    return EXIT_OK if all_passed else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# SVG metrics chart (hand-emitted: the charts are simple polylines)

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def render_svg(rows, columns, x_column="env_steps", width=800, height=480):
    margin = 60
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>',
        f'<text x="{width // 2}" y="{height - margin // 4}" text-anchor="middle" '
        f'font-size="14">{x_column}</text>',
        f'<text x="{margin // 4}" y="{height // 2}" text-anchor="middle" '
        f'font-size="14" transform="rotate(-90 {margin // 4} {height // 2})">value</text>',
    ]
    series = {}
    if rows:
        xs = np.array([float(r[x_column]) for r in rows])
        for col in columns:
            ys = np.array([float(r[col]) for r in rows])
            keep = np.isfinite(ys)
            if keep.any():
                series[col] = (xs[keep], ys[keep])
    if series:
        all_x = np.concatenate([s[0] for s in series.values()])
        all_y = np.concatenate([s[1] for s in series.values()])
        x_lo, x_hi = float(all_x.min()), float(all_x.max())
        y_lo, y_hi = float(all_y.min()), float(all_y.max())
        x_span = (x_hi - x_lo) or 1.0
        y_span = (y_hi - y_lo) or 1.0

        def px(x):
            return margin + (x - x_lo) / x_span * (width - 2 * margin)

        def py(y):
            return height - margin - (y - y_lo) / y_span * (height - 2 * margin)

        for tick in np.linspace(x_lo, x_hi, 5):
            parts.append(
                f'<text x="{px(tick):.1f}" y="{height - margin + 18}" '
                f'text-anchor="middle" font-size="11">{tick:.4g}</text>'
            )
        for tick in np.linspace(y_lo, y_hi, 5):
            parts.append(
                f'<text x="{margin - 6}" y="{py(tick):.1f}" text-anchor="end" '
                f'font-size="11">{tick:.4g}</text>'
            )
        for i, (col, (xs, ys)) in enumerate(series.items()):
            color = _PALETTE[i % len(_PALETTE)]
            points = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
            parts.append(
                f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                f'points="{points}"/>'
            )
            parts.append(
                f'<text x="{width - margin + 4}" y="{margin + 16 * i}" '
                f'font-size="12" fill="{color}">{col}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts)


def cmd_plot(args):
    try:
        with open(args.metrics) as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            rows = list(reader)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if header and tuple(header) != METRICS_COLUMNS:
        print(f"error: CSV header does not match metrics schema", file=sys.stderr)
        return EXIT_VALIDATION
    available = [c for c in METRICS_COLUMNS if c not in ("iter", "env_steps")]
    for col in args.columns:
        if col not in available:
            print(
                f"error: unknown column '{col}'; available: {', '.join(available)}",
                file=sys.stderr,
            )
            return EXIT_VALIDATION
    svg = render_svg(rows, args.columns)
    with open(args.out, "w") as fh:
        fh.write(svg)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="air-marl")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training session")
    p_train.add_argument("--config", help="YAML config file (flags override)")
    p_train.add_argument("--env", help="climb | penalty | spread | tabular:<path>")
    p_train.add_argument("--mixer", choices=["vdn", "qmix"])
    p_train.add_argument("--steps", type=int, help="total environment steps")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--air", choices=["on", "off"])
    p_train.add_argument("--out", help="run directory (default runs/<timestamp>)")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--env", required=True)
    p_eval.add_argument("--episodes", type=int, default=100)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--hidden-dim", type=int, default=64)
    p_eval.add_argument("--out", help="key/value output file")
    p_eval.set_defaults(func=cmd_eval)

    p_verify = sub.add_parser("verify", help="run the exact oracle suite")
    p_verify.add_argument("--spec", help="optional tabular Dec-POMDP spec file")
    p_verify.add_argument("--out", help="machine-readable key/value report")
    p_verify.set_defaults(func=cmd_verify)

    p_plot = sub.add_parser("plot", help="render metrics columns to an SVG")
    p_plot.add_argument("metrics", help="metrics CSV file")
    p_plot.add_argument("columns", nargs="+", help="metric columns to draw")
    p_plot.add_argument("--out", default="metrics.svg")
    p_plot.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
