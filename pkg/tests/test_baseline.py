import numpy as np
import pytest

from rfsel.baseline import (BaselineError, FeatureConfig, GBT_PARAMS,
                            BaselineModel, export_features_csv, feature_names,
                            featurize, featurize_all, train_baseline, train_gbt)
from rfsel.evaluation import accuracy
from rfsel.forms import LabelScheme
from rfsel.probing import TASKS, derive_labels

from conftest import doc_by_id


def get_instance(dataset, instance_id):
    return [i for i in dataset.all_instances() if i.instance_id == instance_id][0]


class TestFeaturize:
    def test_first_mention_sets_discourse_new_slot(self, en_dataset, en_docs):
        doc = doc_by_id(en_docs, "en_0002")
        inst = get_instance(en_dataset, "bn/mini/en_0002#0|c20|m0")
        names = feature_names()
        vector = featurize(inst, doc)
        assert vector[names.index("DisStat=discourse-new")] == 1.0
        assert vector[names.index("DisStat=discourse-old")] == 0.0

    def test_far_antecedent_sets_more_than_one(self, en_dataset, en_docs):
        doc = doc_by_id(en_docs, "en_0002")
        inst = get_instance(en_dataset, "bn/mini/en_0002#0|c20|m3")
        names = feature_names()
        vector = featurize(inst, doc)
        assert vector[names.index("DistAnt=more-than-one")] == 1.0

    def test_golden_vector_hand_computed(self, en_dataset, en_docs):
        # "She" in the council document: discourse-old sentence-new subject,
        # antecedent one sentence away, different preceding entity, locally
        # and globally prominent; second mention of a five-mention chain in
        # sentence 1 of a bn document.
        doc = doc_by_id(en_docs, "en_0002")
        inst = get_instance(en_dataset, "bn/mini/en_0002#0|c20|m1")
        got = {name: value
               for name, value in zip(feature_names(), featurize(inst, doc))}
        expected_ones = {"DisStat=discourse-old", "SenStat=sentence-new",
                         "Syn=subject", "DistAnt=one", "IntRef=different-entity",
                         "LocPro=locally-prominent", "GloPro=globally-prominent",
                         "genre=bn"}
        for name, value in got.items():
            if name in expected_ones:
                assert value == 1.0, name
            elif name == "mention_index_in_chain":
                assert value == 1.0
            elif name == "sentence_index":
                assert value == 1.0
            elif name == "chain_length":
                assert value == 5.0
            else:
                assert value == 0.0, name

    def test_matches_probing_derivations_everywhere(self, en_dataset, en_docs):
        names = feature_names()
        by_key = {d.doc_key: d for d in en_docs}
        for inst in en_dataset.all_instances():
            doc = by_key[inst.doc_id]
            vector = featurize(inst, doc)
            labels = derive_labels(inst, doc)
            for task in TASKS:
                for label in task.labels:
                    slot = vector[names.index(f"{task.name}={label}")]
                    assert slot == (1.0 if labels[task.name] == label else 0.0)

    def test_feature_toggles(self, en_dataset, en_docs):
        config = FeatureConfig(probing_features=False, genre_feature=False)
        names = feature_names(config)
        assert names == ["mention_index_in_chain", "sentence_index", "chain_length"]
        doc = doc_by_id(en_docs, "en_0002")
        inst = get_instance(en_dataset, "bn/mini/en_0002#0|c20|m0")
        assert featurize(inst, doc, config).shape == (3,)

    def test_csv_export_header(self, tmp_path, en_dataset, en_docs):
        matrix = featurize_all(en_dataset.splits["dev"], en_docs)
        path = tmp_path / "features.csv"
        export_features_csv(matrix, path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0].split(",") == feature_names()
        assert len(lines) == 1 + matrix.shape[0]


def separable_toy(n=200, seed=0):
    rng = np.random.default_rng(seed)
    labels = list(LabelScheme.EN4.labels)
    X = rng.normal(scale=0.05, size=(n, 6))
    y = []
    for k in range(n):
        c = k % 4
        X[k, c] += 3.0
        y.append(labels[c])
    return X, y


class TestTrainGBT:
    def test_hyperparameters_echoed_exactly(self):
        X, y = separable_toy()
        model = train_gbt(X, y, X[:40], y[:40], LabelScheme.EN4)
        assert model.params == {"learning_rate": 0.05, "min_split_loss": 0.01,
                                "max_depth": 5, "subsample": 0.5}
        clf = model.classifier
        assert clf.learning_rate == 0.05
        assert clf.min_impurity_decrease == 0.01
        assert clf.max_depth == 5
        assert clf.subsample == 0.5

    def test_separable_toy_reaches_99_train_accuracy(self):
        X, y = separable_toy()
        model = train_gbt(X, y, X[:40], y[:40], LabelScheme.EN4)
        assert accuracy(y, model.predict(X)) >= 99.0

    def test_degenerate_single_class_rejected(self):
        X = np.zeros((10, 3))
        with pytest.raises(BaselineError):
            train_gbt(X, ["Pronoun"] * 10, X, ["Pronoun"] * 10, LabelScheme.EN4)

    def test_early_stopping_truncates_rounds(self):
        X, y = separable_toy(n=120)
        model = train_gbt(X, y, X[:30], y[:30], LabelScheme.EN4, max_rounds=80)
        assert model.best_rounds <= 80
        assert len(model.classifier.estimators_) == model.best_rounds

    def test_seed_determinism(self):
        X, y = separable_toy()
        a = train_gbt(X, y, X[:40], y[:40], LabelScheme.EN4, seed=5)
        b = train_gbt(X, y, X[:40], y[:40], LabelScheme.EN4, seed=5)
        assert a.predict(X) == b.predict(X)
        assert a.best_rounds == b.best_rounds


class TestEndToEnd:
    def test_train_on_minicorpus(self, en_dataset, en_docs):
        model = train_baseline(en_dataset.splits, en_docs, LabelScheme.EN2)
        matrix = featurize_all(en_dataset.splits["test"], en_docs)
        predictions = model.predict(matrix)
        assert len(predictions) == len(en_dataset.splits["test"])
        assert set(predictions) <= set(LabelScheme.EN2.labels)
