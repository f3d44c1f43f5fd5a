"""Command line entry point: ``run``, ``explain`` and ``report``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .errors import ConfigError, FormatError
from .explain import lle_importance, render_importance, select_instances
from .model import predict
from .sim import (
    round_lle_config,
    emit_reports,
    prepare,
    read_fairness,
    read_rounds,
    run_experiment,
    run_round,
)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    _, reports, summary, _ = run_experiment(cfg)
    paths = emit_reports(reports, summary, args.out, cfg.n_clients)
    final = reports[-1].accuracy if reports else float("nan")
    print(f"{cfg.rounds} rounds, final accuracy {final:.4f}; wrote {len(paths)} files to {args.out}")
    return 0


def explain_images(cfg, rnd: int, client: int) -> dict[str, np.ndarray]:
    """Replay up to round ``rnd`` and render the submitted model of ``client``.

    One image per sampled validation instance, for the class the model predicts.
    """
    if not 0 <= rnd < cfg.rounds:
        raise ConfigError(f"round {rnd} outside 0..{cfg.rounds - 1}")
    state = prepare(cfg)
    params = state.initial.copy()
    reports = []
    for r in range(rnd + 1):
        params, rep = run_round(state, params, r, keep_models=(r == rnd))
        reports.append(rep)
    models = reports[-1].models
    if client not in models:
        raise ConfigError(f"client {client} did not take part in round {rnd}")

    model = models[client]
    lle = round_lle_config(cfg, rnd)
    val = state.federation.server_validation
    picked = select_instances(len(val), lle.max_instances, lle.seed)
    images = {}
    for idx in picked:
        x = val.features[idx]
        klass = int(predict(state.layout, model, x[None, :])[0])
        A = lle_importance(state.layout, model, x, lle.mode, lle.n_perturb, lle.radius,
                           seed=lle.seed + int(idx), ridge=lle.ridge)
        images[f"round{rnd}_client{client}_inst{int(idx)}_class{klass}"] = render_importance(A, klass, val.image_shape)
    return images


def cmd_explain(args) -> int:
    cfg = load_config(args.config)
    images = explain_images(cfg, args.round, args.client)
    out = Path(args.out)
    from .explain import encode_pgm

    out.mkdir(parents=True, exist_ok=True)
    for name, img in sorted(images.items()):
        (out / f"{name}.pgm").write_bytes(encode_pgm(img))
    print(f"wrote {len(images)} images to {out}")
    return 0


def format_report(fairness: dict[str, str], rounds: list[dict[str, str]]) -> str:
    lines = [f"{'role':<12} {'min':>8} {'max':>8} {'mean':>8}"]
    for role in ("adversarial", "poor"):
        vals = [fairness.get(f"{role}_discard_{k}", "") for k in ("min", "max", "mean")]
        lines.append(f"{role:<12} " + " ".join(f"{v:>8}" for v in vals))
    lines.append(f"poor client mean accuracy: {fairness.get('poor_accuracy_mean', '')}")
    if rounds:
        last = rounds[-1]
        lines.append(f"final accuracy: {last['accuracy']}")
        if last.get("backdoor_accuracy"):
            lines.append(f"final backdoor accuracy: {last['backdoor_accuracy']}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    src = Path(args.inp)
    fpath = src / "fairness.csv"
    if not fpath.exists():
        raise FormatError(f"{fpath} not found")
    rpath = src / "rounds.csv"
    rounds = read_rounds(rpath) if rpath.exists() else []
    print(format_report(read_fairness(fpath), rounds))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rab2def", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write CSV reports")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    run.set_defaults(func=cmd_run)

    ex = sub.add_parser("explain", help="render explanation maps for one client in one round")
    ex.add_argument("--config", required=True)
    ex.add_argument("--round", type=int, required=True)
    ex.add_argument("--client", type=int, required=True)
    ex.add_argument("--out", required=True)
    ex.set_defaults(func=cmd_explain)

    rep = sub.add_parser("report", help="print the fairness summary of a finished run")
    rep.add_argument("--in", dest="inp", required=True)
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
