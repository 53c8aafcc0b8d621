"""Feature-based form classifier: gradient-boosted trees over hand features.

Features reuse the probing module's label derivations verbatim (single
source of truth), one-hot encoded, plus positional/structural extras and
the document genre. The boosted-tree configuration is fixed to learning
rate 0.05, minimum split loss 0.01, maximum depth 5, and subsample ratio
0.5; the number of rounds is chosen on dev macro F1 with early stopping.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .builder import RFSInstance
from .conll import GENRES, Document
from .evaluation import macro_prf
from .forms import LabelScheme
from .probing import TASKS, derive_labels

log = logging.getLogger(__name__)

GBT_PARAMS = {
    "learning_rate": 0.05,
    "min_split_loss": 0.01,
    "max_depth": 5,
    "subsample": 0.5,
}
MAX_ROUNDS = 500
EARLY_STOP_PATIENCE = 20


class BaselineError(Exception):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    probing_features: bool = True
    positional_features: bool = True
    genre_feature: bool = True


def feature_names(config: FeatureConfig = FeatureConfig()) -> list[str]:
    names: list[str] = []
    if config.probing_features:
        for task in TASKS:
            names.extend(f"{task.name}={label}" for label in task.labels)
    if config.positional_features:
        names.extend(["mention_index_in_chain", "sentence_index", "chain_length"])
    if config.genre_feature:
        names.extend(f"genre={g}" for g in GENRES)
    return names


def featurize(instance: RFSInstance, doc: Document,
              config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Deterministic feature vector; categorical slots are one-hot."""
    values: list[float] = []
    if config.probing_features:
        labels = derive_labels(instance, doc)
        for task in TASKS:
            for label in task.labels:
                values.append(1.0 if labels[task.name] == label else 0.0)
    if config.positional_features:
        mention = doc.chains[instance.chain_id][instance.mention_index]
        values.append(float(instance.mention_index))
        values.append(float(mention.sentence_index))
        values.append(float(len(doc.chains[instance.chain_id])))
    if config.genre_feature:
        for genre in GENRES:
            values.append(1.0 if doc.genre == genre else 0.0)
    return np.asarray(values, dtype=np.float64)


def featurize_all(instances: Sequence[RFSInstance], docs: Sequence[Document],
                  config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    by_key = {d.doc_key: d for d in docs}
    if not instances:
        raise BaselineError("no instances to featurize")
    return np.stack([featurize(inst, by_key[inst.doc_id], config)
                     for inst in instances])


def export_features_csv(matrix: np.ndarray, path: Union[str, Path],
                        config: FeatureConfig = FeatureConfig()) -> None:
    names = feature_names(config)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(",".join(names) + "\n")
        for row in matrix:
            handle.write(",".join(format(v, "g") for v in row) + "\n")


@dataclass
class BaselineModel:
    classifier: object
    labels: list[str]
    scheme: str
    feature_config: FeatureConfig
    params: dict = field(default_factory=dict)
    best_rounds: int = 0
    dev_macro_f1: float = 0.0

    def predict(self, matrix: np.ndarray) -> list[str]:
        return [self.labels[i] for i in self.classifier.predict(matrix)]


def train_gbt(train_matrix: np.ndarray, train_labels: Sequence[str],
              dev_matrix: np.ndarray, dev_labels: Sequence[str],
              scheme: LabelScheme,
              feature_config: FeatureConfig = FeatureConfig(),
              seed: int = 0,
              max_rounds: int = MAX_ROUNDS,
              patience: int = EARLY_STOP_PATIENCE) -> BaselineModel:
    """Boosted trees with the fixed hyperparameters; rounds picked on dev."""
    from sklearn.ensemble import GradientBoostingClassifier

    labels = list(scheme.labels)
    index = {c: i for i, c in enumerate(labels)}
    y_train = np.array([index[c] for c in train_labels])
    if len(set(y_train.tolist())) < 2:
        raise BaselineError("training labels are degenerate (single class)")

    classifier = GradientBoostingClassifier(
        learning_rate=GBT_PARAMS["learning_rate"],
        min_impurity_decrease=GBT_PARAMS["min_split_loss"],
        max_depth=GBT_PARAMS["max_depth"],
        subsample=GBT_PARAMS["subsample"],
        n_estimators=max_rounds,
        random_state=seed,
    )
    classifier.fit(train_matrix, y_train)

    best_rounds, best_f1 = max_rounds, float("-inf")
    if len(dev_labels):
        stale = 0
        for rounds, pred in enumerate(classifier.staged_predict(dev_matrix), start=1):
            predicted = [labels[i] for i in pred]
            _, _, f1 = macro_prf(list(dev_labels), predicted, labels)
            if f1 > best_f1:
                best_f1, best_rounds, stale = f1, rounds, 0
            else:
                stale += 1
                if stale >= patience:
                    break
        # predict() walks estimators_, so truncating it stops at the chosen round
        classifier.estimators_ = classifier.estimators_[:best_rounds]
        log.info("boosting stopped at %d rounds (dev macro-F1 %.2f)",
                 best_rounds, best_f1)

    return BaselineModel(
        classifier=classifier,
        labels=labels,
        scheme=scheme.name.lower(),
        feature_config=feature_config,
        params=dict(GBT_PARAMS),
        best_rounds=best_rounds,
        dev_macro_f1=best_f1 if best_f1 != float("-inf") else 0.0,
    )


def train_baseline(data: dict[str, list[RFSInstance]], docs: Sequence[Document],
                   scheme: LabelScheme,
                   feature_config: FeatureConfig = FeatureConfig(),
                   seed: int = 0) -> BaselineModel:
    """Featurize the splits and fit the boosted-tree model."""
    train_matrix = featurize_all(data["train"], docs, feature_config)
    dev_matrix = featurize_all(data["dev"], docs, feature_config) \
        if data["dev"] else np.zeros((0, train_matrix.shape[1]))
    return train_gbt(
        train_matrix, [i.labels[scheme.key] for i in data["train"]],
        dev_matrix, [i.labels[scheme.key] for i in data["dev"]],
        scheme, feature_config, seed=seed)
