"""Transcribe the LR / BiasedLR / MonotonicLR rows of the published result
tables (LaTeX source) into the reference JSON used by ``tabprior compare``.

Usage: python3 scripts/transcribe_tables.py SOURCE.md OUT.json
"""

import json
import re
import sys

SHOTS = ["4", "8", "16", "32", "64", "128", "256", "512"]
ROWS = {
    "LR - Raw": ["lr_raw"],
    "LR - Ordered": ["lr_ordered"],
    "LR - Onehot": ["lr_onehot"],
    "BiasedLR": ["biased_ordered"],
    "MonotonicLR": ["monotonic_ordered"],
}
CELL = re.compile(r"(\d\.\d\d)_\{\.(\d\d)\}|&\s*(-)\s*")
HEAD = re.compile(r"\\textbf\{([\w-]+)\} & \\multicolumn")


def main(src, dst):
    out, current = {}, None
    for line in open(src, encoding="utf-8"):
        head = HEAD.match(line)
        if head:
            current = head.group(1).lower().replace("-", "")
            out[current] = {}
            continue
        label = line.split("&")[0].strip()
        if current is None or label not in ROWS:
            continue
        cells = CELL.findall(line)
        row = {}
        for shots, (mean, err, dash) in zip(SHOTS, cells):
            if not dash:
                row[shots] = {"mean": float(mean), "std": float("0." + err)}
        for key in ROWS[label]:
            out[current][key] = row
    for ds, table in out.items():
        # numeric-only datasets: every encoding is the raw table
        if "lr_ordered" not in table and "lr_raw" in table:
            table["lr_ordered"] = table["lr_raw"]
            table["biased_raw"] = table["biased_ordered"]
            table["monotonic_raw"] = table["monotonic_ordered"]
    with open(dst, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=1, sort_keys=True)


if __name__ == "__main__":
    main(*sys.argv[1:3])
