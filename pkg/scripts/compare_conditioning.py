"""Condition-number and robustness comparison on the desk MNIST subset.

Trains CondLR at several tau values next to the vanilla U V^T factorization
(same data, seeds and epochs) and writes compare.csv plus SVG charts of the
condition-number product per epoch and of robust accuracy versus the FGSM
budget.

    python scripts/compare_conditioning.py [--out runs/compare_conditioning] [--taus 0.1,0.5]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from condlr import experiment  # noqa: E402
from condlr.config import load_config  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.ini"))
    ap.add_argument("--out", default="runs/compare_conditioning")
    ap.add_argument("--taus", default="0.1,0.5")
    ap.add_argument("--extra", default="vanilla_uv", help="comma-separated baseline variants")
    args = ap.parse_args()

    base = load_config(args.config, ["timing=false"])
    configs = [base.replace(variant="condlr", tau=float(t)) for t in args.taus.split(",")]
    configs += [base.replace(variant=v) for v in args.extra.split(",") if v]
    results = experiment.run_compare(configs, args.out, log=print)

    last_eps = base.epsilons[-1]
    print(f"\n{'run':>16} {'clean':>7} {'racc@' + format(last_eps, 'g'):>10} {'final prod cond':>16} "
          f"{'max prod cond':>14} {'lr used':>8}")
    for label, res in results.items():
        s = res.summary
        print(f"{label:>16} {s['final_clean_acc']:7.4f} {res.rows[-1][f'racc_eps_{last_eps:g}']:10.4f} "
              f"{s['final_cond_prod']:16.4g} {s['max_cond_prod']:14.4g} {s['lr_used']:8g}")


if __name__ == "__main__":
    main()
