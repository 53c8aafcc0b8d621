"""Probing: derive linguistic-feature labels, train diagnostic classifiers.

Seven per-mention features are read off the corpus (referential status at
discourse and sentence level, syntactic position, two recency measures,
and local/global prominence). A logistic-regression probe trained on a
model's final representations then measures how much of each feature those
representations encode, against random and majority baselines.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .builder import RFSInstance
from .conll import Document, Mention, ParseTree
from .evaluation import accuracy as accuracy_score
from .evaluation import macro_prf
from .forms import _base_label, covering_np

log = logging.getLogger(__name__)

DEFAULT_PROBE_SEEDS = (11, 12, 13, 14, 15)
PROBE_TEST_FRACTION = 0.3
PROBE_L2_STRENGTH = 1.0

CLAUSE_LABELS = {"en": ("S", "SINV", "SQ", "SBARQ"), "zh": ("IP", "CP")}

FIRST_MENTION = "first-mention"


@dataclass(frozen=True)
class ProbingTask:
    name: str
    labels: tuple[str, ...]


DIS_STAT = ProbingTask("DisStat", ("discourse-old", "discourse-new"))
SEN_STAT = ProbingTask("SenStat", ("sentence-new", "sentence-old", FIRST_MENTION))
SYN = ProbingTask("Syn", ("subject", "object"))
DIST_ANT = ProbingTask("DistAnt", ("same", "one", "more-than-one", FIRST_MENTION))
INT_REF = ProbingTask("IntRef", (FIRST_MENTION, "same-entity", "different-entity"))
LOC_PRO = ProbingTask("LocPro", ("locally-prominent", "not-locally-prominent"))
GLO_PRO = ProbingTask("GloPro", ("globally-prominent", "not-globally-prominent"))

TASKS = (DIS_STAT, SEN_STAT, SYN, DIST_ANT, INT_REF, LOC_PRO, GLO_PRO)
TASKS_BY_NAME = {t.name: t for t in TASKS}


class ProbingError(Exception):
    pass


def _ancestors(root: ParseTree, node: ParseTree) -> Optional[list[ParseTree]]:
    """Path from the root down to (excluding) ``node``."""
    path: list[ParseTree] = []

    def visit(current: ParseTree) -> bool:
        if current is node:
            return True
        if current.is_leaf:
            return False
        path.append(current)
        for child in current.children:
            if visit(child):
                return True
        path.pop()
        return False

    return path if visit(root) else None


def syntactic_position(mention: Mention, doc: Document) -> str:
    """"subject" when the mention's maximal NP precedes a VP sibling under
    a clause node; everything else (including unclassifiable spans) counts
    as "object"."""
    sentence = doc.sentences[mention.sentence_index]
    node = covering_np(sentence.tree, mention.start, mention.end)
    if node is None:
        log.warning("mention %s:[%d,%d] in %s has no covering NP; "
                    "defaulting Syn to object", mention.sentence_index,
                    mention.start, mention.end, doc.doc_key)
        return "object"
    path = _ancestors(sentence.tree, node)
    if path is None:
        return "object"
    # climb through stacked NPs to the maximal one
    while path and _base_label(path[-1].label) in ("NP", "NML"):
        node = path.pop()
    if not path:
        return "object"
    parent = path[-1]
    if _base_label(parent.label) not in CLAUSE_LABELS[doc.language]:
        return "object"
    seen_np = False
    for child in parent.children:
        if child is node:
            seen_np = True
        elif seen_np and not child.is_leaf and _base_label(child.label) == "VP":
            return "subject"
    return "object"


def derive_labels(instance: RFSInstance, doc: Document) -> dict[str, str]:
    """All seven probing labels for one instance, from its source mention."""
    if not instance.chain_id or instance.mention_index < 0:
        raise ProbingError(f"instance {instance.instance_id} lacks chain provenance")
    chain = doc.chains[instance.chain_id]
    mention = chain[instance.mention_index]
    is_first = instance.mention_index == 0

    labels: dict[str, str] = {}
    labels["DisStat"] = "discourse-new" if is_first else "discourse-old"

    if is_first:
        labels["SenStat"] = FIRST_MENTION
    else:
        same_sentence_earlier = any(
            m.sentence_index == mention.sentence_index and m.order_key < mention.order_key
            for m in chain[:instance.mention_index])
        labels["SenStat"] = "sentence-old" if same_sentence_earlier else "sentence-new"

    labels["Syn"] = syntactic_position(mention, doc)

    if is_first:
        labels["DistAnt"] = FIRST_MENTION
    else:
        distance = mention.sentence_index - chain[instance.mention_index - 1].sentence_index
        labels["DistAnt"] = {0: "same", 1: "one"}.get(distance, "more-than-one")

    if is_first:
        labels["IntRef"] = FIRST_MENTION
    else:
        everything = sorted(
            ((m.order_key, cid) for cid, ms in doc.chains.items() for m in ms))
        position = everything.index((mention.order_key, instance.chain_id))
        previous_chain = everything[position - 1][1] if position > 0 else None
        labels["IntRef"] = ("same-entity" if previous_chain == instance.chain_id
                            else "different-entity")

    subject = labels["Syn"] == "subject"
    labels["LocPro"] = ("locally-prominent"
                        if labels["DisStat"] == "discourse-old" and subject
                        else "not-locally-prominent")

    best = max(doc.chains, key=lambda cid: (len(doc.chains[cid]),
                                            tuple(-k for k in doc.chains[cid][0].order_key)))
    labels["GloPro"] = ("globally-prominent" if best == instance.chain_id
                        else "not-globally-prominent")
    return labels


def derive_label_table(instances: Sequence[RFSInstance],
                       docs: Sequence[Document]) -> list[dict[str, str]]:
    by_key = {d.doc_key: d for d in docs}
    return [derive_labels(inst, by_key[inst.doc_id]) for inst in instances]


@dataclass
class ProbingInstance:
    instance_id: str
    representation: np.ndarray
    labels: dict[str, str]

    def to_json(self) -> dict:
        return {"instance_id": self.instance_id,
                "representation": [float(x) for x in self.representation],
                "labels": self.labels}


def extract_probing_instances(model, instances: Sequence[RFSInstance],
                              docs: Sequence[Document],
                              batch_size: int = 32) -> list[ProbingInstance]:
    """Pair every instance's derived labels with the model's representation.

    The vectors are exactly those consumed by the model's output layer,
    in instance order.
    """
    from .neural import SchemeMismatchError, extract_representations
    scheme = model.config.label_scheme
    for inst in instances:
        if inst.language != scheme.language:
            raise SchemeMismatchError(
                f"{inst.language} instance given to a {scheme.language} model")
    reps = extract_representations(model, instances, batch_size).numpy()
    labels = derive_label_table(instances, docs)
    return [ProbingInstance(inst.instance_id, reps[k], labels[k])
            for k, inst in enumerate(instances)]


def write_probing_jsonl(items: Sequence[ProbingInstance],
                        path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for item in items:
            handle.write(json.dumps(item.to_json(), ensure_ascii=False) + "\n")


def read_probing_jsonl(path: Union[str, Path]) -> list[ProbingInstance]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            row = json.loads(line)
            out.append(ProbingInstance(row["instance_id"],
                                       np.asarray(row["representation"], dtype=np.float64),
                                       dict(row["labels"])))
    return out


@dataclass
class ProbeResult:
    task: str
    accuracy: float
    macro_f1: float
    per_run: list[tuple[float, float]]

    def cell(self) -> str:
        """Paper-style "accuracy (macro-F1)" rendering."""
        return f"{self.accuracy:.2f} ({self.macro_f1:.2f})"


def _split(n: int, seed: int, test_fraction: float) -> tuple[list[int], list[int]]:
    order = list(range(n))
    random.Random(seed).shuffle(order)
    cut = max(1, int(round(n * (1 - test_fraction))))
    cut = min(cut, n - 1)
    return order[:cut], order[cut:]


def run_probe(items: Sequence[ProbingInstance], task: Union[str, ProbingTask],
              n_runs: int = 5,
              seeds: Sequence[int] = DEFAULT_PROBE_SEEDS,
              test_fraction: float = PROBE_TEST_FRACTION) -> ProbeResult:
    """Multinomial logistic-regression probe, averaged over seeded splits."""
    from sklearn.linear_model import LogisticRegression

    if isinstance(task, str):
        task = TASKS_BY_NAME[task]
    if len(items) < 2:
        raise ProbingError("need at least two probing instances")
    X = np.stack([item.representation for item in items])
    y = np.array([item.labels[task.name] for item in items])

    per_run = []
    for seed in seeds[:n_runs]:
        train_idx, test_idx = _split(len(items), seed, test_fraction)
        if len(set(y[train_idx])) < 2:
            raise ProbingError(
                f"probe training portion for {task.name} has a single class")
        probe = LogisticRegression(C=PROBE_L2_STRENGTH, penalty="l2",
                                   max_iter=1000, random_state=seed)
        probe.fit(X[train_idx], y[train_idx])
        pred = probe.predict(X[test_idx]).tolist()
        gold = y[test_idx].tolist()
        _, _, f1 = macro_prf(gold, pred, list(task.labels))
        per_run.append((accuracy_score(gold, pred), f1))
    return ProbeResult(task.name,
                       sum(a for a, _ in per_run) / len(per_run),
                       sum(f for _, f in per_run) / len(per_run),
                       per_run)


def baseline(task: Union[str, ProbingTask], mode: str,
             labels: Sequence[str],
             n_runs: int = 5,
             seeds: Sequence[int] = DEFAULT_PROBE_SEEDS) -> ProbeResult:
    """Random (uniform over the task's label set) or majority baseline."""
    if isinstance(task, str):
        task = TASKS_BY_NAME[task]
    gold = list(labels)
    if not gold:
        raise ProbingError("no labels to score a baseline on")
    if mode == "majority":
        counts = {c: 0 for c in task.labels}
        for value in gold:
            counts[value] += 1
        majority = max(task.labels, key=lambda c: counts[c])
        pred = [majority] * len(gold)
        _, _, f1 = macro_prf(gold, pred, list(task.labels))
        acc = accuracy_score(gold, pred)
        return ProbeResult(task.name, acc, f1, [(acc, f1)])
    if mode == "random":
        per_run = []
        for seed in seeds[:n_runs]:
            rng = random.Random(seed)
            pred = [rng.choice(task.labels) for _ in gold]
            _, _, f1 = macro_prf(gold, pred, list(task.labels))
            per_run.append((accuracy_score(gold, pred), f1))
        return ProbeResult(task.name,
                           sum(a for a, _ in per_run) / len(per_run),
                           sum(f for _, f in per_run) / len(per_run),
                           per_run)
    raise ValueError(f"unknown baseline mode {mode!r}")


def render_probe_table(rows: dict[str, dict[str, ProbeResult]]) -> str:
    """Rows (model or baseline) by task columns, "A (B)" cells."""
    width = max([len(name) for name in rows] + [8])
    header = "Model".ljust(width) + "".join(f" | {t.name:^15}" for t in TASKS)
    lines = [header, "-" * len(header)]
    for name, results in rows.items():
        cells = []
        for t in TASKS:
            result = results.get(t.name)
            cells.append(f" | {result.cell() if result else '-':>15}")
        lines.append(name.ljust(width) + "".join(cells))
    return "\n".join(lines) + "\n"
