"""Walktrap partitions before and after a split on a constructed shrink scenario.

Twelve nodes; before the split n00..n07 form one block and n08..n11 another,
afterwards the large block breaks into two halves. The focal node's
community should halve.

    python scripts/prepost_walktrap.py --seed 0
"""

import argparse
from dataclasses import dataclass

import numpy as np

from migsys.io import FlowRecord
from migsys.walktrap import compare_pre_post


@dataclass
class ShrinkConfig:
    seed: int = 0
    within: float = 40.0     # Poisson mean inside a block
    between: float = 1.0
    periods: int = 9
    split: int = 5
    focal: str = "n00"
    t: int = 4


def shrink_flows(cfg: ShrinkConfig):
    rng = np.random.default_rng(cfg.seed)
    ids = [f"n{i:02d}" for i in range(12)]
    before = [range(0, 8), range(8, 12)]
    after = [range(0, 4), range(4, 8), range(8, 12)]
    out = []
    for k in range(1, cfg.periods + 1):
        block = {i: b for b, blk in enumerate(before if k < cfg.split else after) for i in blk}
        for i in range(12):
            for j in range(12):
                lam = cfg.within if block[i] == block[j] else cfg.between
                c = int(rng.poisson(lam)) if i != j else 0
                if c:
                    out.append(FlowRecord(ids[i], ids[j], str(k), c))
    return out


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for name, default in vars(ShrinkConfig()).items():
        p.add_argument("--" + name, type=type(default), default=default)
    cfg = ShrinkConfig(**vars(p.parse_args()))
    cmp = compare_pre_post(shrink_flows(cfg), str(cfg.split), cfg.focal, cfg.t)
    print(f"pre  Q={cmp.pre.modularity:.4f} sizes {cmp.pre.sizes()}")
    print(f"post Q={cmp.post.modularity:.4f} sizes {cmp.post.sizes()}")
    f = cmp.focal
    print(f"{f['node']}: {f['pre_size']} -> {f['post_size']} members (ratio {f['size_ratio']:.2f})")
    print("pre: ", " ".join(f["pre_members"]))
    print("post:", " ".join(f["post_members"]))


if __name__ == "__main__":
    main()
