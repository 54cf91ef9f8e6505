"""Rebuild the bundled dataset CSVs under data/ from public PyPI wheels.

The sandbox that produced this repository could only reach a PyPI mirror, so
the public datasets are pulled out of wheels that vendor them:

  * Pima Indians Diabetes (768 rows)   -- tabmemcheck, resources/csv/openml-diabetes.csv
  * Adult / Income (32561 rows)        -- tabmemcheck, resources/csv/adult-train.csv
  * UCI Cleveland heart (303 rows)     -- scikit-lego, sklego/data/hearts.zip

The 918-row Kaggle "Heart Failure Prediction" table is not vendored by any wheel
we could find; drop it at data/heart/heart.csv to enable the Heart runs.

Usage: python scripts/build_assets.py [--wheel-dir DIR]
"""

import argparse
import csv
import glob
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def _wheel(name, wheel_dir):
    found = glob.glob(str(Path(wheel_dir) / f"{name.replace('-', '_')}-*.whl"))
    if not found:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", name, "-d", str(wheel_dir)],
            check=True,
        )
        found = glob.glob(str(Path(wheel_dir) / f"{name.replace('-', '_')}-*.whl"))
    return zipfile.ZipFile(found[0])


def _write(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    print(f"wrote {path} rows={len(rows)}")


def build_diabetes(wheel_dir):
    z = _wheel("tabmemcheck", wheel_dir)
    text = z.read("tabmemcheck/resources/csv/openml-diabetes.csv").decode()
    rows = list(csv.reader(io.StringIO(text)))
    _write(ROOT / "data/diabetes/diabetes.csv", rows[0], rows[1:])


def build_income(wheel_dir):
    z = _wheel("tabmemcheck", wheel_dir)
    text = z.read("tabmemcheck/resources/csv/adult-train.csv").decode()
    rows = [[c.strip() for c in r] for r in csv.reader(io.StringIO(text)) if r]
    header = rows[0]
    # fnlwgt is a census sampling weight and EducationNum duplicates Education.
    keep = [i for i, h in enumerate(header) if h not in ("fnlwgt", "EducationNum")]
    target = header.index("Income")
    out = []
    for r in rows[1:]:
        rec = [r[i] for i in keep]
        rec[keep.index(target)] = "1" if r[target] == ">50K" else "0"
        out.append(rec)
    _write(ROOT / "data/income/income.csv", [header[i] for i in keep], out)


def build_cleveland(wheel_dir):
    z = _wheel("scikit-lego", wheel_dir)
    inner = zipfile.ZipFile(io.BytesIO(z.read("sklego/data/hearts.zip")))
    rows = list(csv.DictReader(io.StringIO(inner.read("heart.csv").decode())))
    cp = {"1": "TA", "2": "ATA", "3": "NAP", "4": "ASY"}
    ecg = {"0": "Normal", "1": "ST", "2": "LVH"}
    slope = {"1": "Up", "2": "Flat", "3": "Down"}
    header = [
        "Age", "Sex", "ChestPainType", "RestingBP", "Cholesterol", "FastingBS",
        "RestingECG", "MaxHR", "ExerciseAngina", "Oldpeak", "ST_Slope", "HeartDisease",
    ]
    out = []
    for r in rows:
        # A handful of rows carry chest-pain code 0, which the UCI codebook does not define.
        if r["cp"] not in cp:
            continue
        out.append([
            r["age"], "M" if r["sex"] == "1" else "F", cp[r["cp"]], r["trestbps"],
            r["chol"], r["fbs"], ecg[r["restecg"]], r["thalach"],
            "Y" if r["exang"] == "1" else "N", r["oldpeak"], slope[r["slope"]],
            r["target"],
        ])
    _write(ROOT / "data/cleveland/cleveland.csv", header, out)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--wheel-dir", default=None)
    args = ap.parse_args()
    wheel_dir = args.wheel_dir or tempfile.mkdtemp(prefix="tabprior-wheels-")
    build_diabetes(wheel_dir)
    build_income(wheel_dir)
    build_cleveland(wheel_dir)


if __name__ == "__main__":
    main()
