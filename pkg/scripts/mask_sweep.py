"""TAG dev F1 of the HE-ready model for several finite mask values and seeds."""

import numpy as np

from _common import base_parser, task_args
from hexform import cli


def main():
    p = base_parser(__doc__)
    p.add_argument("--values", type=float, nargs="+", default=[-1.0, -3.0, -5.0, -10.0, -30.0])
    args = p.parse_args()
    print("mask\t" + "\t".join(f"seed{s}" for s in args.seeds) + "\tmean")
    for mv in args.values:
        scores = []
        for seed in args.seeds:
            ns = task_args(args.estimator, "--task", "tag", "--seed", str(seed), "--epochs", str(args.epochs))
            _, report = cli.finetune_pipeline(ns, mask_value=mv, with_baselines=False)
            scores.append(float(dict(report)["relu-s-l"]))
        print(f"{mv}\t" + "\t".join(f"{s:.1f}" for s in scores) + f"\t{np.mean(scores):.1f}", flush=True)


if __name__ == "__main__":
    main()
