"""Max pre-LN activation, distill MSE and final accuracy across weight decay values."""

from _common import base_parser, task_args
from hexform import cli


def main():
    p = base_parser(__doc__)
    p.add_argument("--values", type=float, nargs="+", default=[0.0, 0.01, 0.1])
    p.add_argument("--task", default="classify")
    args = p.parse_args()
    print("seed\tdecay\tmax_pre_ln\tdistill_mse\tmetric")
    for seed in args.seeds:
        for wd in args.values:
            ns = task_args(args.estimator, "--task", args.task, "--seed", str(seed), "--epochs", str(args.epochs))
            _, report = cli.finetune_pipeline(ns, weight_decay=wd, with_baselines=False)
            r = dict(report)
            print(f"{seed}\t{wd}\t{r['max-pre-ln']}\t{r['distill-mse']}\t{r['relu-s-l']}", flush=True)


if __name__ == "__main__":
    main()
