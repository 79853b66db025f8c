#!/usr/bin/env python3
"""End-to-end driver: train all phases, evaluate every method, run the ablation.

Example:
    python3 scripts/run_experiment.py --config configs/tblock_top.json \
        --seed 0 --out runs/tblock_top
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import time
from pathlib import Path

from pushfuse.pipeline import (
    evaluate_method,
    load_config,
    run_ablation,
    run_finetune,
    run_train_phase1,
    run_train_phase2,
    write_cdf_csv,
    write_metrics_json,
    write_traces_jsonl,
    config_hash,
    METHODS,
)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", required=True)
    ap.add_argument("--quick", action="store_true", help="shrink budgets for a fast functional pass")
    ap.add_argument("--skip-ablation", action="store_true")
    args = ap.parse_args()

    cfg = load_config(args.config)
    if args.quick:
        budget = dataclasses.replace(
            cfg.budget, num_envs=64, phase1_updates=30, phase15_updates=10,
            dr_updates=30, ensemble_episodes=32, ensemble_epochs=10,
        )
        cfg = dataclasses.replace(cfg, budget=budget, trials=16, ablation_trials=8, seeds=(0,))
    h = config_hash(cfg)
    out = Path(args.out)

    t0 = time.time()
    print(f"[{time.time()-t0:7.1f}s] phase 1 (conditioned)")
    run_train_phase1(cfg, out, args.seed)
    print(f"[{time.time()-t0:7.1f}s] phase 1 (domain randomized baseline)")
    run_train_phase1(dataclasses.replace(cfg, method="dr"), out, args.seed)
    print(f"[{time.time()-t0:7.1f}s] phase 1.5 (noisy conditioning)")
    run_finetune(cfg, out, args.seed)
    print(f"[{time.time()-t0:7.1f}s] phase 2 (ensemble)")
    run_train_phase2(cfg, out, args.seed)

    import numpy as np

    table = {}
    for method in METHODS:
        for seed in cfg.seeds:
            summary, records = evaluate_method(cfg, out, method, seed)
            write_metrics_json(out / "metrics" / f"evaluate_{method}_seed{seed}.json", summary)
            errors = np.array([r.final_pos_err for r in records])
            write_cdf_csv(out / "metrics" / f"cdf_{method}_seed{seed}.csv", errors, h)
            write_traces_jsonl(out / "traces" / f"evaluate_{method}_seed{seed}.jsonl", records, h)
            table.setdefault(method, []).append(summary["success_rate_pct"])
        rates = table[method]
        print(f"[{time.time()-t0:7.1f}s] {method:10s} success {np.mean(rates):5.1f}% (per seed: {rates})")

    if not args.skip_ablation:
        print(f"[{time.time()-t0:7.1f}s] ablation ladder")
        path = run_ablation(cfg, out, args.seed)
        with open(path) as f:
            rep = json.load(f)
        for rung in rep["rungs"]:
            print(
                f"    prior {rung['prior_value_m']*100:+5.1f}cm sigma {rung['prior_sigma_m']*100:4.1f}cm"
                f" fused {rung['fused_success_rate_pct']:5.1f}%"
                f" direct {rung['phase15_only_success_rate_pct']:5.1f}%"
            )
    print(f"[{time.time()-t0:7.1f}s] done; artifacts under {out}")


if __name__ == "__main__":
    main()
