"""Two-phase distillation: a privileged multi-frame branch teaches a single-frame student.

Compares the distilled student with the same student trained alone.
"""
import argparse

from occforge import BranchConfig, evaluate, generate_scene, train, train_distilled


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenes", type=int, default=6)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model = dict(dim=8, heads=2, points=2, hidden=4)
    scenes = [generate_scene(100 + i, "micro") for i in range(args.scenes)]
    val = [generate_scene(900 + i, "micro") for i in range(3)]

    alone_cfg = BranchConfig.student("micro", "aux,icca", **model)
    alone = train(scenes, alone_cfg, seed=args.seed, epochs=args.epochs, lr=1e-2)

    s_cfg = BranchConfig.student("micro", "aux,icca,distill", **model)
    t_cfg = BranchConfig.teacher("micro", **model)
    student, teacher = train_distilled(scenes, s_cfg, t_cfg, seed=args.seed, epochs=args.epochs,
                                       lr=1e-2, teacher_epochs=2 * args.epochs)

    for name, store, cfg in (("teacher", teacher.store, t_cfg), ("student alone", alone.store, alone_cfg),
                             ("student distilled", student.store, s_cfg)):
        print(f"{name:>18}: mIoU {evaluate(store, cfg, val).miou:.4f}")


if __name__ == "__main__":
    main()
