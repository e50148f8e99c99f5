"""Rebuild the bundled UCI-format raw files from the ``keel_ds`` wheel.

The UCI archive is not always reachable; the KEEL repository mirrors the three
datasets and ``keel_ds`` ships them inside its wheel.  This script rewrites the
KEEL ``.dat`` files into the original UCI raw layouts so that ``load_uci`` can
read either source interchangeably.

Known differences from the UCI originals (inherited from KEEL):

* spambase: 4597 rows instead of 4601.
* crx: the 37 rows with missing values are already removed and the decimal
  points of the continuous columns were stripped (``30.83`` became ``3083``).
* house-votes-84: only the 232 complete rows are present.

Usage::

    pip download --no-deps keel_ds==0.2.5 -d /tmp/keel
    python tools/import_keel.py /tmp/keel/keel_ds-0.2.5-py3-none-any.whl src/poisonlab/_data
"""

import sys
import zipfile
from pathlib import Path


def _lines(zf, name):
    text = zf.read(f"keel_ds/data/balanced/raw/{name}.dat").decode()
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("@")]


def main(wheel, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(wheel) as zf:
        spam = [",".join(v.strip() for v in ln.split(",")) for ln in _lines(zf, "spambase")]
        (out / "spambase.data").write_text("\n".join(spam) + "\n")

        crx = []
        for ln in _lines(zf, "crx"):
            *feats, label = ln.split(",")
            crx.append(",".join(feats + ["+" if label == "positive" else "-"]))
        (out / "crx.data").write_text("\n".join(crx) + "\n")

        votes = []
        for ln in _lines(zf, "housevotes"):
            *feats, label = ln.split(",")
            votes.append(",".join([label] + feats))
        (out / "house-votes-84.data").write_text("\n".join(votes) + "\n")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(sys.argv[1], sys.argv[2])
