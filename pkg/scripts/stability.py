"""Do the planted components survive when the fit rank grows past the truth?

    python scripts/stability.py --rank 6 --extra 2 --support 2
"""

import argparse
import logging
from dataclasses import dataclass

import numpy as np

from migsys.selection import stability_check
from migsys.solver import FitOptions
from migsys.synth import PlantSpec, plant_model, synth_tensor


@dataclass
class StabilityConfig:
    size: int = 12
    periods: int = 8
    rank: int = 6
    support: int = 2
    extra: int = 2
    noise: float = 0.0
    seeds: int = 20


def run(cfg: StabilityConfig):
    print("seed,fit_rank,min_congruence,mean_congruence")
    stable = 0
    for seed in range(cfg.seeds):
        truth = plant_model(PlantSpec(cfg.size, cfg.size, cfg.periods, cfg.rank,
                                      cfg.support, cfg.support, seed=seed))
        X, mask = synth_tensor(truth, cfg.noise, seed)
        out = stability_check(X, mask, cfg.rank, cfg.extra, FitOptions(rank=cfg.rank, seed=seed))
        for step, m in enumerate(out, start=1):
            print(f"{seed},{cfg.rank + step},{min(m.congruences):.5f},{np.mean(m.congruences):.5f}")
        stable += all(m.stable for m in out)
    print(f"# all components kept in {stable}/{cfg.seeds} seeds")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for name, default in vars(StabilityConfig()).items():
        p.add_argument("--" + name, type=type(default), default=default)
    logging.basicConfig(level=logging.ERROR)
    run(StabilityConfig(**vars(p.parse_args())))


if __name__ == "__main__":
    main()
