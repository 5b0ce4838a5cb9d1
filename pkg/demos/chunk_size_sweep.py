"""Average best-chunk retrieval mAP of the full model as the chunk size grows.

Four chunks are kept throughout; only the per-chunk width changes.  The
curve is written as TSV and is expected to flatten once chunks are wide
enough to hold one factor each.

    python demos/chunk_size_sweep.py --sizes 2,4,8,16,32 --out chunk_sizes.tsv
"""
import argparse

from chunkmix import evaluation as ev
from chunkmix.dataset import generate_arrays
from chunkmix.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="2,4,8,16,32")
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", default="chunk_sizes.tsv")
    args = ap.parse_args()

    splits = generate_arrays(0)
    test = splits["test"]
    sizes = [int(s) for s in args.sizes.split(",")]

    def progress(size, table):
        print(f"chunk size {size}: average mAP {table.average:.4f}")

    curve = ev.chunk_size_ablation(splits["train"].images, test.images, test.labels, sizes,
                                   TrainConfig(epochs=args.epochs, seed=args.seed), progress)
    text = ev.curve_tsv(curve)
    with open(args.out, "w") as fh:
        fh.write(text)
    print(text, end="")


if __name__ == "__main__":
    main()
