#!/usr/bin/env python3
"""
Dataset Fetch Script

Downloads MNIST (IDX, gzip) and/or the CIFAR-10/100 binary archives into the
data directory used by `confidence-iqn` (CONFIDENCE_IQN_DATA_DIR, default `data`).

Usage:
    uv run python scripts/fetch_datasets.py mnist
    uv run python scripts/fetch_datasets.py mnist cifar10 cifar100 --data-dir /tmp/data
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, "src")

from confidence_iqn.config import Settings
from confidence_iqn.data_io import DatasetKind
from confidence_iqn.fetch import DatasetFetcher, FetchError
from confidence_iqn.log import configure_logging


def main() -> int:
    settings = Settings.from_env()
    parser = argparse.ArgumentParser(description="Download benchmark datasets.")
    parser.add_argument("datasets", nargs="+", choices=[k.value for k in DatasetKind])
    parser.add_argument("--data-dir", type=Path, default=settings.data_dir)
    parser.add_argument("--overwrite", action="store_true")
    args = parser.parse_args()
    configure_logging(settings.log_level, settings.log_format)

    print("=" * 60)
    print(f"Fetching into {args.data_dir}")
    print("=" * 60)
    try:
        with DatasetFetcher() as fetcher:
            for name in args.datasets:
                files = fetcher.fetch(DatasetKind(name), args.data_dir, overwrite=args.overwrite)
                print(f"\n{name}: {len(files)} files")
                for path in files:
                    print(f"   {path}")
    except FetchError as exc:
        print(f"\nError: {exc}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
