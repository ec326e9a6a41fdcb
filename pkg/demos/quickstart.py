"""Train a tiny student on a few micro scenes and print its IoU table.

Runs in well under a minute on one CPU core.
"""
import argparse

from occforge import BranchConfig, evaluate, generate_scene, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--toggles", default="aux,icca", help="student components to enable")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    scenes = [generate_scene(100 + i, "micro") for i in range(4)]
    val = [generate_scene(900 + i, "micro") for i in range(2)]
    cfg = BranchConfig.student("micro", args.toggles, dim=8, heads=2, points=2, hidden=4)
    result = train(scenes, cfg, seed=args.seed, epochs=args.epochs, lr=1e-2)
    print(f"final loss {result.curve.rows[-1][-1]:.4f}")
    print(evaluate(result.store, cfg, val).table())


if __name__ == "__main__":
    main()
