"""Write the synthetic corpus in the CIFAR-10 binary layout so any CIFAR tooling can read it.

    python scripts/export_synthetic.py --out data/synthetic-cifar --size 32
"""
import argparse
from pathlib import Path

from sslpurify.data import SyntheticSpec, generate_synthetic, write_cifar10


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--train", type=int, default=50_000)
    ap.add_argument("--test", type=int, default=10_000)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    train = generate_synthetic(SyntheticSpec(args.train, args.size, 10, args.seed))
    test = generate_synthetic(SyntheticSpec(args.test, args.size, 10, args.seed + 1))
    write_cifar10(train, test, args.out)
    print(f"wrote {len(train)} + {len(test)} records to {args.out}")


if __name__ == "__main__":
    main()
