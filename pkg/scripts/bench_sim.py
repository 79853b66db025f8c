#!/usr/bin/env python3
"""Measure simulator and rollout throughput at a few batch sizes."""

from __future__ import annotations

import argparse
import time

import numpy as np

from pushfuse.env import PushingEnv
from pushfuse.geometry import realize_com, tblock_with_weight
from pushfuse.pipeline import RunConfig, collect_rollout, fresh_task_bundle
from pushfuse.sim import BodyModel, SimulatorBatch


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="+", default=[1, 16, 64, 256])
    ap.add_argument("--steps", type=int, default=50)
    args = ap.parse_args()

    cfg = RunConfig()
    spec, props = realize_com(tblock_with_weight(), 0.02)
    body = BodyModel.from_spec(spec, props)
    for n in args.sizes:
        sim = SimulatorBatch.from_body(body, cfg.sim, n)
        sim.set_state_rows(np.arange(n), np.tile([[0.0, 0.0, 0.0]], (n, 1)), np.tile([[-0.2, 0.0]], (n, 1)))
        deltas = np.tile([[0.005, 0.0]], (n, 1))
        t0 = time.time()
        for _ in range(args.steps):
            sim.control_step(deltas)
        dt = time.time() - t0
        print(f"sim   N={n:4d}: {args.steps * n / dt:9.0f} env-steps/s")

    for n in args.sizes:
        if n < 2:
            continue
        env = PushingEnv(cfg.task("ground_truth"), cfg.sim, n, seed=0)
        bundle = fresh_task_bundle(cfg, seed=0)
        rng = np.random.default_rng(0)
        t0 = time.time()
        collect_rollout(env, bundle, args.steps, rng, cfg.ppo)
        dt = time.time() - t0
        print(f"envrl N={n:4d}: {args.steps * n / dt:9.0f} env-steps/s (with policy + GAE)")


if __name__ == "__main__":
    main()
