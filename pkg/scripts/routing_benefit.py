"""Compare oracle-routed LLMoE against the single MLP across several synthetic datasets.

The oracle router labels each window with the true next-day regime, so the gap
measures what perfect context routing is worth on data with regime structure.

    python3 scripts/routing_benefit.py --data-seeds 3 7 11 --seeds 1-10 --epochs 100
"""
import argparse
import statistics
import sys

from llmoe import backtest as bt
from llmoe.experts import TrainConfig
from llmoe.features import build_window_samples
from llmoe.market_data import RegimeSpec, SplitSpec, generate_synthetic_series, split_sequence
from llmoe.pipeline import infer_llmoe, infer_single_mlp, train_llmoe, train_single_mlp
from llmoe.router import route_all, route_oracle


def seed_range(text: str) -> list[int]:
    lo, _, hi = text.partition("-")
    return list(range(int(lo), int(hi or lo) + 1))


def total_return(preds, test) -> float:
    curve, _ = bt.simulate_all_in_all_out(preds, [s.next_return for s in test])
    return bt.total_return(curve)


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data-seeds", type=int, nargs="+", default=[3, 7, 11])
    p.add_argument("--seeds", type=seed_range, default=seed_range("1-10"))
    p.add_argument("--days", type=int, default=1000)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--drift", type=float, default=RegimeSpec.up_drift, help="absolute daily drift per regime")
    args = p.parse_args()

    spec = RegimeSpec(up_drift=args.drift, down_drift=-args.drift)
    print(f"{'data seed':>9}  {'LLMoE TR':>10}  {'MLP TR':>10}  {'gap':>8}")
    for data_seed in args.data_seeds:
        samples = build_window_samples(generate_synthetic_series(data_seed, args.days, spec))
        train, test = split_sequence(samples, SplitSpec(0.8))
        train_dec, test_dec = route_all(train, route_oracle), route_all(test, route_oracle)
        llmoe, mlp = [], []
        for seed in args.seeds:
            cfg = TrainConfig(epochs=args.epochs, seed=seed)
            policy = train_llmoe(train, train_dec, cfg, router_kind="oracle")
            llmoe.append(total_return(infer_llmoe(policy, test, test_dec), test))
            mlp.append(total_return(infer_single_mlp(train_single_mlp(train, cfg), test), test))
        a, b = statistics.mean(llmoe), statistics.mean(mlp)
        print(f"{data_seed:>9}  {a:>10.2f}  {b:>10.2f}  {a - b:>8.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
