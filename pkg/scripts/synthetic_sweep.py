"""F1 against rank on generated data, one training run per K (seed + K)."""

import argparse

from lrtabl.data import build_datasets, synthetic_lob
from lrtabl.model import build_structure, evaluate, total_param_count
from lrtabl.training import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--structure", default="B", choices=["A", "B", "C"])
    ap.add_argument("--max-rank", type=int, default=6)
    ap.add_argument("--signal", type=float, default=1.0)
    ap.add_argument("--events", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    train_set, test_set, _ = build_datasets(synthetic_lob(10, args.events, args.signal, args.seed), 0,
                                            normalize=True)
    print(f"{'K':>4} {'params':>7} {'acc':>6} {'f1':>6}")
    for k in [None] + list(range(1, args.max_rank + 1)):
        seed = args.seed + (k or 0)
        net = build_structure(args.structure, "lowrank" if k else "full", k, seed=seed)
        cfg = TrainConfig(max_epochs=args.epochs, batch_size=64, learning_rate=3e-3, seed=seed)
        res = train(net, train_set, cfg)
        m = evaluate(res.net, test_set.windows, test_set.labels)
        print(f"{k or 'full':>4} {total_param_count(net.spec):>7} {m.accuracy:6.3f} {m.macro_f1:6.3f}")


if __name__ == "__main__":
    main()
