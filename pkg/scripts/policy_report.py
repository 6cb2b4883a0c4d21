"""Per-class mean-action tracking reward of a saved policy.

usage: python scripts/policy_report.py POLICY_STEM [--per-class N] [--seed S]
"""

import argparse

from physguide.datagen import build_dataset
from physguide.imitation import Policy, evaluate_policy
from physguide.motion import CLASSES


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("policy")
    ap.add_argument("--per-class", type=int, default=20)
    ap.add_argument("--seed", type=int, default=1000)
    args = ap.parse_args()
    pol = Policy.load(args.policy)
    ds = build_dataset(None, {c: args.per_class for c in CLASSES}, seed=args.seed, write=False)
    for c in CLASSES:
        ms = [m for m in ds.motions if m.condition.label == c]
        print(f"{c:>6}  {evaluate_policy(pol, ms):.3f}")


if __name__ == "__main__":
    main()
