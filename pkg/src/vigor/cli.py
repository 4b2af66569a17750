"""Command-line entry point: ``vigor {synth,train-baseline,validate,loop,report}``.

Exit codes for ``loop``: 0 success, 3 iteration budget exhausted, 4 diminishing
returns, 1 internal error. Usage errors exit with 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .data import SyntheticSpec, generate_synthetic, load_csv, load_sidecar, save_csv, save_sidecar
from .orchestrator import CevaeValidator, Decision, LoopConfig, render_table, run_loop
from .generator import ConfounderProposal, Distribution

log = logging.getLogger("vigor")

EXIT_CODES = {Decision.SUCCESS: 0, Decision.MAX_ITERS: 3, Decision.DIMINISHING: 4}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _loop_config(args) -> LoopConfig:
    raw = _load_config(args.config).get("loop", {})
    config = LoopConfig.from_dict(raw)
    cevae_over = {k: v for k, v in {
        "epochs": args.epochs, "latent_dim": args.latent_dim, "hidden_dim": args.hidden_dim,
        "batch_size": args.batch_size, "learning_rate": args.learning_rate,
    }.items() if v is not None}
    loop_over = {k: v for k, v in {
        "seeds": args.seeds, "k_max": getattr(args, "k_max", None),
        "tau_elbo": getattr(args, "tau_elbo", None), "tau_rho": getattr(args, "tau_rho", None),
        "workers": args.workers,
    }.items() if v is not None}
    gen_over = {k: v for k, v in {
        "backend": getattr(args, "backend", None), "script_path": getattr(args, "script", None),
        "oracle_noise": getattr(args, "oracle_noise", None), "endpoint": getattr(args, "endpoint", None),
        "model": getattr(args, "model", None),
    }.items() if v is not None}
    if isinstance(gen_over.get("oracle_noise"), tuple) and len(gen_over["oracle_noise"]) == 1:
        gen_over["oracle_noise"] = gen_over["oracle_noise"][0]
    return replace(config, cevae=replace(config.cevae, **cevae_over),
                   generator=replace(config.generator, **gen_over), **loop_over)


def _snapshot(out: Path, command: str, payload: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"command": command, **payload}, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")


def cmd_synth(args) -> int:
    base = _load_config(args.config).get("synthetic", {})
    over = {k: v for k, v in {"n": args.n, "d": args.d, "a_t": args.a_t, "a_y": args.a_y, "tau": args.tau,
                              "seed": args.seed, "leakage": args.leakage}.items() if v is not None}
    spec = SyntheticSpec(**{**base, **over})
    out = Path(args.out)
    _snapshot(out, "synth", {"synthetic": asdict(spec)})
    data = generate_synthetic(spec)
    save_csv(data, out / "dataset.csv")
    save_sidecar(data, spec, out / "truth.json")
    print(f"wrote {data.n} rows to {out / 'dataset.csv'}; ground truth in {out / 'truth.json'}")
    print(f"naive ATE {data.naive_ate():+.4f}, true ATE {data.true_ate:+.4f}")
    return 0


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def cmd_train_baseline(args) -> int:
    config = _loop_config(args)
    out = Path(args.out)
    _snapshot(out, "train-baseline", {"loop": config.to_dict(), "dataset": str(args.dataset)})
    data = load_csv(args.dataset)
    validator = CevaeValidator(data, config)
    validator.prepare()
    rows = []
    for seed in config.seeds:
        base = validator.baselines[seed]
        base.model.save(out / f"baseline_seed{seed}.npz")
        rows.append({"seed": seed, "elbo": base.report.elbo, "ate": base.ate})
    mean, std = _mean_std([r["elbo"] for r in rows])
    (out / "baseline.json").write_text(json.dumps({"seeds": rows, "elbo_mean": mean, "elbo_sample_std": std},
                                                  indent=2) + "\n", encoding="utf-8")
    print(f"Baseline held-out ELBO: {mean:.4f} (sample std {std:.4f}, {len(rows)} seeds)")
    return 0


def cmd_validate(args) -> int:
    config = _loop_config(args)
    out = Path(args.out)
    data = load_csv(args.dataset, u_column=args.u_column)
    _snapshot(out, "validate", {"loop": config.to_dict(), "dataset": str(args.dataset), "u_column": args.u_column})
    u = data.u_hat
    proposal = ConfounderProposal(args.u_column, "user-supplied column",
                                  Distribution("Normal", mean=u, std=np.zeros(u.size)), u)
    validator = CevaeValidator(data.with_u_hat(None), config)
    signal, per_seed, _ = validator(proposal, 1)
    base_mean, base_std = _mean_std([r.baseline_elbo for r in per_seed])
    aug_mean, aug_std = _mean_std([r.augmented_elbo for r in per_seed])
    gain_std = signal.delta_elbo_std or 0.0
    lines = [
        f"ELBO comparison (held-out, {len(per_seed)} seeds, sample std)",
        f"  Baseline (without U_hat)   {base_mean:+.4f}  +/- {base_std:.4f}",
        f"  Augmented (with U_hat)     {aug_mean:+.4f}  +/- {aug_std:.4f}",
        f"  Information Gain           {signal.delta_elbo:+.4f}  +/- {gain_std:.4f}",
        "",
        "Consistency with baseline latent z (seed mean)",
        f"  Max |Spearman|             {signal.rho_max:.3f}  (least significant seed p={signal.p_value:.3g})",
        f"  Average Mutual Information {signal.i_avg:.3f}",
        f"  Predictive R^2             {signal.r_squared:.3f}",
    ]
    print("\n".join(lines))
    payload = {"signal": signal.to_dict(), "per_seed": [r.to_dict() for r in per_seed]}
    (out / "validation.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_loop(args) -> int:
    config = _loop_config(args)
    out = Path(args.out)
    _snapshot(out, "loop", {"loop": config.to_dict(), "dataset": str(args.dataset)})
    data = load_csv(args.dataset)
    if config.generator.backend == "oracle":
        if not args.truth:
            print("vigor loop: error: the oracle backend needs --truth", file=sys.stderr)
            return 2
        _, _, u_star = load_sidecar(args.truth)
        data = replace(data, u_star=u_star)
    run_log = run_loop(data, config)
    (out / "run_log.json").write_text(run_log.to_json(), encoding="utf-8")
    report = render_table(run_log)
    (out / "report.txt").write_text(report, encoding="utf-8")
    print(report, end="")
    return EXIT_CODES[run_log.termination]


def cmd_report(args) -> int:
    payload = json.loads(Path(args.run_log).read_text(encoding="utf-8"))
    print(render_table(payload), end="")
    return 0


def _add_training_flags(p):
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", type=_ints, help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--epochs", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vigor", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a planted-confounder benchmark dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--a-t", type=float)
    p.add_argument("--a-y", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--leakage", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-baseline", help="train and checkpoint the baseline model per seed")
    p.add_argument("dataset")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("validate", help="score one candidate column against the baseline")
    p.add_argument("dataset")
    p.add_argument("--u-column", required=True, help="CSV column holding the candidate confounder")
    _add_training_flags(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("loop", help="run the generate/validate/feedback loop")
    p.add_argument("dataset")
    _add_training_flags(p)
    p.add_argument("--backend", choices=["llm_http", "scripted", "oracle"])
    p.add_argument("--script", help="proposal script for the scripted backend")
    p.add_argument("--truth", help="synthetic sidecar (oracle backend only)")
    p.add_argument("--oracle-noise", type=_floats, help="noise level or per-round schedule, e.g. 2,1,0.3")
    p.add_argument("--endpoint")
    p.add_argument("--model")
    p.add_argument("--k-max", type=int)
    p.add_argument("--tau-elbo", type=float)
    p.add_argument("--tau-rho", type=float)
    p.set_defaults(func=cmd_loop)

    p = sub.add_parser("report", help="render a saved run log as tables")
    p.add_argument("run_log")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001 - mapped to exit code 1
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
