"""Training from an ill-conditioned start: core spectrum 1, 1/2, 1/4, ...

Runs CondLR and the vanilla U V^T factorization from the exp_decay
initialization on the desk MNIST subset and prints the loss and accuracy
trajectories next to the condition-number product.

    python scripts/compare_exp_decay.py [--out runs/compare_exp_decay]
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
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk_exp_decay.ini"))
    ap.add_argument("--out", default="runs/compare_exp_decay")
    args = ap.parse_args()

    base = load_config(args.config, ["timing=false"])
    configs = [base.replace(variant="condlr"), base.replace(variant="vanilla_uv")]
    results = experiment.run_compare(configs, args.out, log=print)

    print(f"\n{'epoch':>5}" + "".join(f" {lab + ' loss':>20} {lab + ' acc':>20}" for lab in results))
    for k in range(base.epochs + 1):
        cells = "".join(f" {res.rows[k]['loss']:20.4f} {res.rows[k]['acc']:20.4f}" for res in results.values())
        print(f"{k:>5}{cells}")
    for label, res in results.items():
        loss0 = res.rows[0]["loss"]
        k = min(10, base.epochs)
        print(f"{label}: loss after {k} epochs / initial = {res.rows[k]['loss'] / loss0:.3f}, "
              f"lr used {res.summary['lr_used']:g}")


if __name__ == "__main__":
    main()
