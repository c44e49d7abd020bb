#!/usr/bin/env python3
"""Regenerate the bundled example dataset, schema, and simulation config.

The example mimics a systematic review of tweet-classifier accuracies:
20 studies, 195 trials, twelve features with reference levels and
grouping rules.  Accuracy effects are drawn from the three-level model
(between-study sd ~0.11, within-study sd ~0.08 on the transformed
scale) around 0.78-0.88 depending on the model family, so the
moderator structure is actually recoverable.

Study S20 is the only study with both ml_model and topic set to
'Not specified', which makes those two dummy columns exactly collinear:
the encoder must drop one, leaving 29 design columns.

Deterministic; run from the repository root:

    python3 scripts/make_example_dataset.py
"""

import csv
import math
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from metaprop import rng
from metaprop.ingest import load_schema, parse_dataset, encode_design
from metaprop.transforms import ft_inverse, ft_variance, HALF_PI

SEED = 20220131
TRIALS = [2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 2, 3, 4, 12, 39]

ML_RAW = [
    "Logistic Regression", "Naive Bayes", "Multinomial Naive Bayes",
    "Genetic Algorithm", "SVM/Clustering", "Tree-based",
    "Neural networks/Deep learning",
]
ML_EFFECT = {
    "Classical machine learning": 0.0,
    "SVM/Clustering": 0.05,
    "Tree-based": 0.03,
    "Neural networks/Deep learning": 0.10,
    "Not specified": 0.02,
}
ML_GROUPING = {
    "Logistic Regression": "Classical machine learning",
    "Naive Bayes": "Classical machine learning",
    "Multinomial Naive Bayes": "Classical machine learning",
    "Genetic Algorithm": "Classical machine learning",
}

EXTRACTION_RAW = [
    "TF-IDF", "FastText", "FastText + TF-IDF", "Bag of Words", "Word2Vec",
    "Keras Embedding Layer", "Count Vector", "N-Grams", "GloVe",
    "Bert Tokenizer", "Bag of Words + TF-IDF",
]
EXTRACTION_GROUPING = {
    "Count Vector": "Other",
    "N-Grams": "Other",
    "GloVe": "Other",
    "Bert Tokenizer": "Other",
    "Bag of Words + TF-IDF": "Other",
}

LANGUAGES = {3: "Nepali", 7: "Italian", 12: "Tamil"}  # 1-based study -> raw label
TOPICS = {1: "Brands", 2: "COVID-19", 4: "LGBTQ", 5: "Railway infrastructure",
          20: "Not specified"}
LABELING = {1: "Human annotation", 2: "Lexicon Approach", 3: "Pre-labeled dataset",
            6: "Not specified", 9: "Manual + ML"}
MAJORITY = ["0.0-0.4", "0.41-0.5", "0.51-0.6", "0.61-0.9", "0.91-1.0", "Not specified"]
N_EXTRACTION = ["1 method", "2 methods", "Not specified"]
CLASSES = ["2 classes", "3 or 10 classes"]

SCHEMA_YAML = """\
features:
  train_test_ratio:
    kind: numeric
  training_size:
    kind: numeric
    scale: 1000
  sentiment_classes:
    kind: categorical
    reference_level: 2 classes
  ml_model:
    kind: categorical
    reference_level: Classical machine learning
    grouping:
      Logistic Regression: Classical machine learning
      Naive Bayes: Classical machine learning
      Multinomial Naive Bayes: Classical machine learning
      Genetic Algorithm: Classical machine learning
      SVM/Clustering: SVM/Clustering
      Tree-based: Tree-based
      Neural networks/Deep learning: Neural networks/Deep learning
      Not specified: Not specified
  n_extraction_methods:
    kind: categorical
    reference_level: 1 method
  extraction_method:
    kind: categorical
    reference_level: TF-IDF
    grouping:
      TF-IDF: TF-IDF
      FastText: FastText
      FastText + TF-IDF: FastText + TF-IDF
      Bag of Words: Bag of Words
      Word2Vec: Word2Vec
      Keras Embedding Layer: Keras Embedding Layer
      Count Vector: Other
      N-Grams: Other
      GloVe: Other
      Bert Tokenizer: Other
      Bag of Words + TF-IDF: Other
  language:
    kind: categorical
    reference_level: English
    grouping:
      Nepali: Other
      Italian: Other
      Tamil: Other
  labeling_method:
    kind: categorical
    reference_level: Human annotation
    grouping:
      Lexicon Approach: Lexicon Approach
      Not specified: Not specified
      Pre-labeled dataset: Other
      Manual + ML: Other
  majority_class:
    kind: categorical
    reference_level: 0.0-0.4
  topic:
    kind: categorical
    reference_level: Brands
    grouping:
      COVID-19: COVID-19
      Not specified: Not specified
      LGBTQ: Other
      Railway infrastructure: Other
  dataset_type:
    kind: categorical
    reference_level: Existing
  confusion_matrix:
    kind: categorical
    reference_level: "No"
"""

SIMCONFIG_YAML = """\
simulation:
  h: 20
  trials_per_study: [2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 2, 3, 4, 12, 39]
  mu: 1.1071487177940904   # transformed value whose back-transform is 0.80
  sigma2_xi: 0.020
  sigma2_zeta: 0.008
  n_range: [500, 5000]
  mode: gaussian
  seed: 20260810
"""


def pick(stream, items):
    return items[int(stream.uniform()[0] * len(items)) % len(items)]


def main():
    root = pathlib.Path(__file__).resolve().parents[1]
    data_dir = root / "data"
    data_dir.mkdir(exist_ok=True)

    base_mu = math.asin(math.sqrt(0.78))
    sd_xi = math.sqrt(0.012)
    sd_zeta = math.sqrt(0.006)

    rows = []
    for j, n_trials in enumerate(TRIALS, start=1):
        sid = f"S{j:02d}"
        study = rng.Streams(rng.stream_key(SEED, j, -1))
        xi = float(study.normal()[0]) * sd_xi
        language = LANGUAGES.get(j, "English")
        topic = TOPICS.get(j, pick(study, ["Brands", "COVID-19"]))
        labeling = LABELING.get(j, pick(study, ["Human annotation", "Lexicon Approach"]))
        dataset_type = pick(study, ["Existing", "Self-scraped"])
        # force full category coverage on the first studies, then randomize
        majority = MAJORITY[j - 1] if j <= len(MAJORITY) else pick(study, MAJORITY)
        confusion = ("No", "Yes")[j - 1] if j <= 2 else pick(study, ["No", "Yes"])

        for i in range(n_trials):
            trial = rng.Streams(rng.stream_key(SEED, j, i))
            if j == 20:
                ml_raw = "Not specified"
            else:
                ml_raw = ML_RAW[(j + 2 * i) % len(ML_RAW)]
            ml_group = ML_GROUPING.get(ml_raw, ml_raw)
            extraction = EXTRACTION_RAW[(j + i) % len(EXTRACTION_RAW)]
            n_extract = N_EXTRACTION[(j + i) % 3]
            classes = CLASSES[(j + i) % 2]

            n = int(trial.integers(500, 5000)[0])
            zeta = float(trial.normal()[0]) * sd_zeta
            eps = float(trial.normal()[0]) * math.sqrt(float(ft_variance(n)))
            theta = base_mu + ML_EFFECT[ml_group] + xi + zeta + eps
            theta = min(max(theta, 0.0), HALF_PI)
            p = ft_inverse(theta, n)
            k = min(max(int(math.floor(p * n + 0.5)), 0), n)

            ratio = round(1.0 + 8.0 * float(trial.uniform()[0]), 2)
            size = int(trial.integers(1000, 100000)[0])
            rows.append([sid, f"{sid}-t{i + 1}", k, n, ratio, size, classes,
                         ml_raw, n_extract, extraction, language, labeling,
                         majority, topic, dataset_type, confusion])

    csv_path = data_dir / "example_trials.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["study_id", "trial_id", "k", "n", "train_test_ratio",
                         "training_size", "sentiment_classes", "ml_model",
                         "n_extraction_methods", "extraction_method", "language",
                         "labeling_method", "majority_class", "topic",
                         "dataset_type", "confusion_matrix"])
        writer.writerows(rows)

    schema_path = data_dir / "example_schema.yaml"
    schema_path.write_text(SCHEMA_YAML, encoding="utf-8")
    (data_dir / "example_simconfig.yaml").write_text(SIMCONFIG_YAML, encoding="utf-8")

    # sanity: schema parses, encoder sees 29 full-rank columns, one drop
    dataset = parse_dataset(csv_path.read_text(encoding="utf-8"), load_schema(schema_path))
    design = encode_design(dataset, dataset.schema.names)
    print(f"wrote {csv_path}: {dataset.m} trials, {dataset.h} studies")
    print(f"design columns: {design.f}, dropped: {design.dropped}")
    assert dataset.m == 195 and dataset.h == 20
    assert design.f == 29, design.f
    assert design.dropped == ["topic=Not specified"], design.dropped


if __name__ == "__main__":
    main()
