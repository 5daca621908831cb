"""Build data/adult.csv and data/titanic.csv.

Adult: raw UCI `adult.data` (as shipped inside the `responsibly` wheel, or the
UCI archive), regrouped into the 8-feature layout used by the built-in preset.

Titanic: the passenger-level `Titanicp` table from the `rdatasets` wheel
(vcdExtra). Rows with a missing age are dropped; the loader rejects missing
values rather than imputing them.

Usage:
    python3 scripts/prepare_data.py --adult-raw path/to/adult.data --out data/
"""
import argparse
import os

import pandas as pd

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "educational-num", "marital-status",
    "occupation", "relationship", "race", "gender", "capital-gain", "capital-loss",
    "hours-per-week", "native-country", "income",
]

WORKCLASS = {
    "Without-pay": "Other/Unknown", "Never-worked": "Other/Unknown", "?": "Other/Unknown",
    "Federal-gov": "Government", "State-gov": "Government", "Local-gov": "Government",
    "Self-emp-not-inc": "Self-Employed", "Self-emp-inc": "Self-Employed",
}
OCCUPATION = {
    "Adm-clerical": "White-Collar", "Exec-managerial": "White-Collar",
    "Craft-repair": "Blue-Collar", "Farming-fishing": "Blue-Collar",
    "Handlers-cleaners": "Blue-Collar", "Machine-op-inspct": "Blue-Collar",
    "Transport-moving": "Blue-Collar",
    "Other-service": "Service", "Priv-house-serv": "Service",
    "Protective-serv": "Service", "Tech-support": "Service",
    "Prof-specialty": "Professional",
    "Armed-Forces": "Other/Unknown", "?": "Other/Unknown",
}
MARITAL = {
    "Married-civ-spouse": "Married", "Married-AF-spouse": "Married",
    "Married-spouse-absent": "Married", "Never-married": "Single",
}
RACE = {"Black": "Other", "Asian-Pac-Islander": "Other", "Amer-Indian-Eskimo": "Other"}
EDUCATION = {
    "Assoc-voc": "Assoc", "Assoc-acdm": "Assoc",
    "Preschool": "School", "1st-4th": "School", "5th-6th": "School", "7th-8th": "School",
    "9th": "School", "10th": "School", "11th": "School", "12th": "School",
}


def adult(raw_path):
    df = pd.read_csv(raw_path, names=ADULT_COLUMNS, sep=r",\s*", engine="python").dropna()
    df["workclass"] = df["workclass"].replace(WORKCLASS)
    df["occupation"] = df["occupation"].replace(OCCUPATION)
    df["marital-status"] = df["marital-status"].replace(MARITAL)
    df["race"] = df["race"].replace(RACE)
    df["education"] = df["education"].replace(EDUCATION)
    df["income"] = df["income"].str.rstrip(".").map({"<=50K": 0, ">50K": 1})
    df = df[["age", "workclass", "education", "marital-status", "occupation",
             "race", "gender", "hours-per-week", "income"]]
    return df.rename(columns={"marital-status": "marital_status",
                              "hours-per-week": "hours_per_week"})


def titanic():
    import rdatasets

    df = rdatasets.data("vcdExtra", "Titanicp").drop(columns=["rownames"]).dropna()
    df["survived"] = (df["survived"] == "survived").astype(int)
    df["age"] = df["age"].round(4)
    return df[["pclass", "sex", "age", "sibsp", "parch", "survived"]]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--adult-raw", required=True)
    parser.add_argument("--out", default="data")
    args = parser.parse_args()
    adult(args.adult_raw).to_csv(os.path.join(args.out, "adult.csv"), index=False)
    titanic().to_csv(os.path.join(args.out, "titanic.csv"), index=False)


if __name__ == "__main__":
    main()
