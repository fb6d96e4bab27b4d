#!/usr/bin/env python3
"""Install MNIST IDX files from the npm package mirror.

Use this when the canonical MNIST hosts are unreachable. The npm package
`mnist-data` 1.2.6 carries the four original (uncompressed) IDX files. They
are validated (magic, counts, sizes) and written gzip'd under the standard
file names, so `prcn` finds them exactly as after `prcn fetch`.
"""

import argparse
import gzip
import struct
import subprocess
import tarfile
import tempfile
from pathlib import Path

NPM_SPEC = "mnist-data@1.2.6"
FILES = {
    "train-images-idx3-ubyte": (0x803, 60000),
    "train-labels-idx1-ubyte": (0x801, 60000),
    "t10k-images-idx3-ubyte": (0x803, 10000),
    "t10k-labels-idx1-ubyte": (0x801, 10000),
}


def fetch_npm(workdir: Path) -> Path:
    subprocess.run(["npm", "pack", NPM_SPEC, "--silent"], cwd=workdir, check=True, stdout=subprocess.DEVNULL)
    return next(workdir.glob("mnist-data-*.tgz"))


def validate(name: str, payload: bytes):
    magic, count = struct.unpack(">II", payload[:8])
    want_magic, want_count = FILES[name]
    if magic != want_magic or count != want_count:
        raise SystemExit(f"{name}: header ({magic:#x}, {count}) != ({want_magic:#x}, {want_count})")
    if magic == 0x803:
        rows, cols = struct.unpack(">II", payload[8:16])
        expected = 16 + count * rows * cols
    else:
        expected = 8 + count
    if len(payload) != expected:
        raise SystemExit(f"{name}: {len(payload)} bytes, expected {expected}")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="data/mnist", help="output directory")
    ap.add_argument("--tgz", type=Path, help="existing mnist-data-1.2.6.tgz (skips npm pack)")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        tgz = args.tgz or fetch_npm(Path(tmp))
        with tarfile.open(tgz) as tar:
            for name in FILES:
                payload = tar.extractfile(f"package/data/{name}").read()
                validate(name, payload)
                with open(out / f"{name}.gz", "wb") as f, gzip.GzipFile(fileobj=f, mode="wb", mtime=0) as gz:
                    gz.write(payload)
                print(f"{name}: {FILES[name][1]} records")
    print(f"wrote MNIST to {out}")


if __name__ == "__main__":
    main()
