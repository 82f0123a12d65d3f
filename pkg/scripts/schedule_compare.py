"""Final dev metric of the four workflow schedules on one synthetic task."""

import numpy as np

from _common import base_parser, task_args
from hexform import cli
from hexform.workflow import WorkflowSchedule


def main():
    p = base_parser(__doc__)
    p.add_argument("--task", default="regress")
    args = p.parse_args()
    print("schedule\t" + "\t".join(f"seed{s}" for s in args.seeds) + "\tmean")
    for schedule in WorkflowSchedule:
        scores = []
        for seed in args.seeds:
            ns = task_args(args.estimator, "--task", args.task, "--schedule", schedule.value, "--seed", str(seed),
                           "--epochs", str(args.epochs))
            _, report = cli.finetune_pipeline(ns, with_baselines=False)
            scores.append(float(dict(report)["relu-s-l"]))
        print(f"{schedule.value}\t" + "\t".join(f"{s:.1f}" for s in scores) + f"\t{np.mean(scores):.1f}",
              flush=True)


if __name__ == "__main__":
    main()
