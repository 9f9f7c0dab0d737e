"""Download MNIST / FashionMNIST into the predcode cache and verify MD5s.

    python3 scripts/fetch_datasets.py mnist fashion_mnist [--dest DIR] [--mirror URL]

The library itself never touches the network; this helper is the only
place that does.
"""

import argparse
import hashlib
import sys
import urllib.request
from pathlib import Path

from predcode.data import KNOWN_MD5, data_dir

MIRRORS = {
    "mnist": "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "fashion_mnist": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
}


def fetch(name, dest, mirror=None):
    base = mirror or MIRRORS[name]
    target = Path(dest) / name
    target.mkdir(parents=True, exist_ok=True)
    ok = True
    for fname, md5 in KNOWN_MD5[name].items():
        path = target / fname
        if not (path.exists() and hashlib.md5(path.read_bytes()).hexdigest() == md5):
            print(f"downloading {base}{fname}")
            try:
                with urllib.request.urlopen(base + fname, timeout=60) as resp:
                    path.write_bytes(resp.read())
            except OSError as exc:
                print(f"cannot download {base}{fname}: {exc}", file=sys.stderr)
                ok = False
                continue
        digest = hashlib.md5(path.read_bytes()).hexdigest()
        if digest != md5:
            print(f"checksum mismatch for {path}: {digest} != {md5}", file=sys.stderr)
            ok = False
    return ok


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("names", nargs="+", choices=sorted(MIRRORS))
    ap.add_argument("--dest", default=str(data_dir()))
    ap.add_argument("--mirror", help="base URL holding the four .gz files")
    args = ap.parse_args(argv)
    ok = all([fetch(n, args.dest, args.mirror) for n in args.names])
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
