"""Download the handwritten-digit idx files into data/digits/*.gz.

The files are taken from a published wheel that bundles the four raw idx
files; each one is checked against its known SHA-256 before it is written.

Usage: python scripts/fetch_digits.py [--out data/digits]
"""

from __future__ import annotations

import argparse
import gzip
import hashlib
import io
import sys
import urllib.request
import zipfile
from pathlib import Path

WHEEL_URL = ("https://files.pythonhosted.org/packages/1f/a8/"
             "181fb894115c8efdb4f9412b301c6048bb105d55d68eeab5f680a53def5c/"
             "MNIST_dir-0.2-py3-none-any.whl")
MEMBER_DIR = "MNIST_dir-0.2-py3-none-any/MNIST_dir/"

# sha256 of the uncompressed idx files
FILES = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "digits"))
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if all((out / f"{name}.gz").exists() for name in FILES):
        print(f"digit files already present in {out}")
        return 0
    print(f"downloading {WHEEL_URL}")
    with urllib.request.urlopen(WHEEL_URL, timeout=120) as resp:
        wheel = zipfile.ZipFile(io.BytesIO(resp.read()))
    for name, digest in FILES.items():
        raw = wheel.read(MEMBER_DIR + name.replace("-idx", ".idx"))
        if hashlib.sha256(raw).hexdigest() != digest:
            print(f"checksum mismatch for {name}", file=sys.stderr)
            return 1
        with gzip.GzipFile(out / f"{name}.gz", "wb", mtime=0) as f:
            f.write(raw)
        print(f"wrote {out / name}.gz")
    return 0


if __name__ == "__main__":
    sys.exit(main())
