"""Desk-scale training experiment on the synthetic dataset.

Used by the acceptance suite; also runnable directly::

    python -m angiosynth.smoke --steps 300 --seed 0 [--no-attention]
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import time
from pathlib import Path

from .synthetic import SynthConfig, generate_pair
from .trainer import PairStore, TrainState, heldout_l1, iter_batches, load_train_config, train_step

SMOKE_CONFIG = Path(__file__).resolve().parent / "configs" / "smoke.cfg"
DATA_SEED = 0
HELDOUT_SEED = 1000


def smoke_pairs(n_train=16, n_heldout=4, height=256, width=320):
    train_cfg = SynthConfig(seed=DATA_SEED, height=height, width=width)
    held_cfg = SynthConfig(seed=HELDOUT_SEED, height=height, width=width)
    return ([generate_pair(train_cfg, i) for i in range(n_train)],
            [generate_pair(held_cfg, i) for i in range(n_heldout)])


def run_smoke(steps=300, seed=0, use_attention=True, config_path=SMOKE_CONFIG, pairs=None,
              eval_at=()):
    """Train from scratch; returns a dict with held-out L1 before/after and the loss log.

    ``eval_at`` lists intermediate steps at which the held-out L1 is also
    recorded (under ``l1_at``); the trajectory does not depend on ``steps``.
    """
    cfg = load_train_config(config_path)
    cfg = dataclasses.replace(
        cfg, seed=seed, max_steps=steps,
        generator_config=dataclasses.replace(cfg.generator_config, use_attention=use_attention))
    train_pairs, held = pairs or smoke_pairs()
    state = TrainState(cfg)
    store = PairStore(train_pairs, cfg.preprocess_config)
    l1_before = heldout_l1(state.model, held)
    t0 = time.perf_counter()
    reports, l1_at = [], {}
    for _, batch in iter_batches(store, cfg):
        reports.append(train_step(state, batch))
        if state.step in eval_at:
            l1_at[state.step] = heldout_l1(state.model, held)
    elapsed = time.perf_counter() - t0
    l1_after = heldout_l1(state.model, held)
    finite = all(math.isfinite(v) for r in reports for v in dataclasses.asdict(r).values())
    return {
        "seed": seed,
        "variant": cfg.generator_config.variant,
        "steps": len(reports),
        "l1_before": l1_before,
        "l1_after": l1_after,
        "l1_at": l1_at,
        "improvement": 1.0 - l1_after / l1_before,
        "finite": finite,
        "train_seconds": elapsed,
        "reports": reports,
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-attention", action="store_true")
    args = p.parse_args(argv)
    res = run_smoke(args.steps, args.seed, not args.no_attention)
    res.pop("reports")
    print(json.dumps(res))


if __name__ == "__main__":
    main()
