"""Train every ablation row on a corpus and print (or save) the results table.

Example:
    python scripts/ablation_table.py --train data/train --test data/test --rows module --steps 500
"""

import argparse
import logging
import sys

import pandas as pd

from stream_tracker.models import ModelConfig, TrainConfig, default_log_level, default_threads
from stream_tracker.synth import load_corpus
from stream_tracker.trainer import LENGTH_ROWS, MODULE_ROWS, SPLAT_ROWS, WARM_START_ROWS, run_ablation_grid

ROW_SETS = {
    "module": MODULE_ROWS,
    "splat": SPLAT_ROWS,
    "warm": WARM_START_ROWS,
    "length": LENGTH_ROWS,
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--train", required=True, help="Training corpus root")
    parser.add_argument("--test", required=True, help="Held-out corpus root")
    parser.add_argument("--rows", choices=[*ROW_SETS, "all"], default="all")
    parser.add_argument("--steps", type=int, default=1000)
    parser.add_argument("--iters-N", type=int, default=4, dest="iters")
    parser.add_argument("--video-length", type=int, default=24)
    parser.add_argument("--workers", type=int, default=default_threads())
    parser.add_argument("--csv", help="Also write the table here")
    args = parser.parse_args()

    logging.basicConfig(level=default_log_level(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    train_corpus, test_corpus = load_corpus(args.train), load_corpus(args.test)
    if not train_corpus or not test_corpus:
        print("both corpora need at least one sequence", file=sys.stderr)
        return 2

    base = TrainConfig(
        model=ModelConfig.toy(train_iters=args.iters, eval_iters=args.iters),
        steps=args.steps,
        video_length=args.video_length,
    )
    selected = ROW_SETS.values() if args.rows == "all" else [ROW_SETS[args.rows]]
    tables = [run_ablation_grid(base, rows, train_corpus, test_corpus, workers=args.workers) for rows in selected]
    table = pd.concat(tables, ignore_index=True).drop_duplicates("row")

    print(table.to_string(index=False, float_format="%.3f"))
    if args.csv:
        table.to_csv(args.csv, index=False)
    return 0


if __name__ == "__main__":
    sys.exit(main())
