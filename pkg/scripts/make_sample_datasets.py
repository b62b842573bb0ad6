"""Write synthetic dataset bundles usable by ``fieldsearch eval --level 2/3/4``.

    python3 scripts/make_sample_datasets.py --out data/sample --n 4
"""
import argparse

from fieldsearch.synth import BundleSpec, make_bundles


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/sample")
    ap.add_argument("--n", type=int, default=4)
    ap.add_argument("--M", type=int, default=24, help="grid cells per side")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for p in make_bundles(args.out, args.n, BundleSpec(M=args.M), seed=args.seed):
        print(p)


if __name__ == "__main__":
    main()
