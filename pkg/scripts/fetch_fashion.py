#!/usr/bin/env python3
"""Download the Fashion corpus into the IDX layout the harness expects.

Fetches the four gzipped IDX files, decompresses them, and places them under
<root>/fashion/ with their canonical names (train-images-idx3-ubyte and so
on).  The root defaults to the NOISEGATE_DATA environment variable so that

    python scripts/fetch_fashion.py
    NOISEGATE_RUN_LONG=1 pytest tests/test_acceptance.py -k fashion

works end to end.  Files already present are not re-downloaded.
"""

import argparse
import gzip
import os
import sys
import urllib.request
from pathlib import Path

DEFAULT_MIRROR = "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com"
FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


def fetch(mirror: str, name: str, dest: Path) -> None:
    url = f"{mirror.rstrip('/')}/{name}.gz"
    print(f"fetching {url}")
    with urllib.request.urlopen(url) as response:
        blob = gzip.decompress(response.read())
    dest.write_bytes(blob)
    print(f"wrote {dest} ({len(blob)} bytes)")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--root", default=os.environ.get("NOISEGATE_DATA", "."),
                        help="dataset root directory (default: $NOISEGATE_DATA or .)")
    parser.add_argument("--mirror", default=DEFAULT_MIRROR,
                        help="base URL serving the four .gz IDX files")
    args = parser.parse_args(argv)

    out_dir = Path(args.root) / "fashion"
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in FILES:
        dest = out_dir / name
        if dest.exists():
            print(f"keeping existing {dest}")
            continue
        fetch(args.mirror, name, dest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
