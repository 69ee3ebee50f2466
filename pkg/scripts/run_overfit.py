"""Memorize 16 micro-world captions and report loss and exact-match count."""
import argparse
import logging

from semicap.experiments import overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--examples", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    r = overfit(args.seed, args.examples, args.epochs, args.lr)
    print(f"epochs {r.epochs}  loss {r.loss:.4f} nats/token  exact {r.exact}/{r.total}  {r.seconds:.0f}s")


if __name__ == "__main__":
    main()
