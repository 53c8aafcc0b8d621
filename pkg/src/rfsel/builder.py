"""Turns annotated documents into delexicalised classification instances.

Pipeline per document: drop chains without an overt non-pronominal mention,
derive an entity tag per surviving chain, replace every mention span with
the tag, then cut one (pre, target, post) instance per mention using a
3-sentence context window. Chinese datasets are character-tokenized by
default and subject to a 512-character total-length budget.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from .conll import Document, Mention
from .forms import (AnnotatedChain, ReferentialForm, annotate_document,
                    labels_for)

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 3
DEFAULT_MAX_CHARS = 512
DEFAULT_DEV_SEED = 7
DEV_FRACTION = 0.1


class BuilderError(Exception):
    pass


class SplitError(BuilderError):
    """A parsed document is missing from every split manifest."""


@dataclass
class RFSInstance:
    instance_id: str
    doc_id: str
    language: str
    entity_tag: str
    pre: list[str]
    target: list[str]
    post: list[str]
    form: ReferentialForm
    labels: dict[str, str]
    seen: bool = False
    # provenance for feature extraction and probing; not serialized
    chain_id: str = field(default="", repr=False)
    mention_index: int = field(default=-1, repr=False)

    def char_length(self) -> int:
        """Character total with delexicalisation underscores removed."""
        return sum(len(tok.replace("_", ""))
                   for tok in (*self.pre, *self.target, *self.post))

    def to_json(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "doc_id": self.doc_id,
            "language": self.language,
            "entity_tag": self.entity_tag,
            "pre": self.pre,
            "target": self.target,
            "post": self.post,
            "form": self.form.label,
            "labels": self.labels,
            "seen": self.seen,
        }


@dataclass
class CorpusStats:
    pct_first_mentions: float
    pct_proper_names: float
    avg_tokens: float
    seen_ratio: float
    split_sizes: tuple[int, int, int]

    def to_json(self) -> dict:
        return {
            "pct_first_mentions": self.pct_first_mentions,
            "pct_proper_names": self.pct_proper_names,
            "avg_tokens": self.avg_tokens,
            "seen_ratio": self.seen_ratio,
            "split_sizes": list(self.split_sizes),
        }


def filter_chains(doc: Document,
                  annotations: dict[str, AnnotatedChain]) -> dict[str, AnnotatedChain]:
    """Keep only chains with at least one overt non-pronominal mention."""
    return {cid: chain for cid, chain in annotations.items()
            if chain.has_overt_non_pronominal}


def _mention_surface(mention: Mention, doc: Document) -> str:
    tokens = doc.sentences[mention.sentence_index].tokens[mention.start:mention.end + 1]
    return "_".join(t.surface for t in tokens if not t.is_zero)


def entity_tag_for(chain: AnnotatedChain, doc: Document) -> str:
    """Underscored surface of the first proper-name mention.

    Chains without a proper name fall back to the first description, then
    to the first demonstrative (the weakest overt form that can survive
    filtering).
    """
    if not chain.mentions:
        raise BuilderError(f"chain {chain.chain_id} is empty")
    for wanted in (ReferentialForm.PROPER_NAME, ReferentialForm.DESCRIPTION,
                   ReferentialForm.DEMONSTRATIVE):
        for mention, form in chain.annotated():
            if form is wanted:
                return _mention_surface(mention, doc)
    raise BuilderError(
        f"chain {chain.chain_id} has no overt non-pronominal mention to tag")


@dataclass
class DelexMention:
    """A mention's location inside the delexicalised token stream."""
    chain_id: str
    mention_index: int  # position within the chain's full mention list
    sentence_index: int
    start: int  # offset into the delexicalised sentence
    n_tokens: int
    form: Optional[ReferentialForm]
    source: Mention


@dataclass
class DelexDocument:
    doc: Document
    mode: str  # "entity" or "lexical"
    tags: dict[str, str]
    sentences: list[list[str]]
    tag_flags: list[list[bool]]  # True where the token is an atomic entity tag
    mentions: list[DelexMention]


def _resolve_overlaps(spans: list[tuple[Mention, str, int, Optional[ReferentialForm]]],
                      doc: Document) -> list[tuple[Mention, str, int, Optional[ReferentialForm]]]:
    """Outermost span wins; overlapped inner mentions are dropped."""
    ordered = sorted(spans, key=lambda s: (s[0].start, -(s[0].end - s[0].start)))
    kept: list[tuple[Mention, str, int, Optional[ReferentialForm]]] = []
    last_end = -1
    for span in ordered:
        mention = span[0]
        if mention.start <= last_end:
            log.warning("dropping mention of chain %s at %s:[%d,%d] in %s: "
                        "overlaps an outer mention", span[1], mention.sentence_index,
                        mention.start, mention.end, doc.doc_key)
            continue
        kept.append(span)
        last_end = mention.end
    return kept


def delexicalise(doc: Document, kept: dict[str, AnnotatedChain],
                 tags: dict[str, str], mode: str = "lexical") -> DelexDocument:
    """Replace every mention span of every kept chain with its entity tag.

    ``entity`` mode inserts the underscored tag as one token; ``lexical``
    mode splits it on underscores. Empty-category leaves that are not
    themselves mention targets are removed from the text.
    """
    if mode not in ("entity", "lexical"):
        raise ValueError(f"unknown delexicalisation mode {mode!r}")

    by_sentence: dict[int, list] = {}
    for cid, chain in kept.items():
        for idx, (mention, form) in enumerate(zip(chain.mentions, chain.forms)):
            by_sentence.setdefault(mention.sentence_index, []).append(
                (mention, cid, idx, form))

    sentences: list[list[str]] = []
    flags: list[list[bool]] = []
    out_mentions: list[DelexMention] = []
    for sentence in doc.sentences:
        spans = _resolve_overlaps(by_sentence.get(sentence.index, []), doc)
        starts = {m.start: (m, cid, idx, form) for m, cid, idx, form in spans}
        covered_until = -1
        tokens: list[str] = []
        tok_flags: list[bool] = []
        for token in sentence.tokens:
            if token.index in starts:
                mention, cid, idx, form = starts[token.index]
                tag = tags[cid]
                pieces = [tag] if mode == "entity" else tag.split("_")
                out_mentions.append(DelexMention(
                    cid, idx, sentence.index, len(tokens), len(pieces), form, mention))
                tokens.extend(pieces)
                tok_flags.extend([mode == "entity"] * len(pieces))
                covered_until = mention.end
            elif token.index <= covered_until:
                continue
            elif token.is_zero:
                continue  # unreferenced empty category: no surface form
            else:
                tokens.append(token.surface)
                tok_flags.append(False)
        sentences.append(tokens)
        flags.append(tok_flags)
    out_mentions.sort(key=lambda m: (m.sentence_index, m.start))
    return DelexDocument(doc, mode, tags, sentences, flags, out_mentions)


def _expand(tokens: Sequence[str], tag_flags: Sequence[bool], tokenize: str) -> list[str]:
    if tokenize == "word":
        return list(tokens)
    out: list[str] = []
    for tok, is_tag in zip(tokens, tag_flags):
        if is_tag:
            out.append(tok)  # atomic entity tag, never split
        else:
            out.extend(tok)
    return out


def build_instances(ddoc: DelexDocument, window: int = DEFAULT_WINDOW,
                    tokenize: str = "word") -> list[RFSInstance]:
    """One instance per kept, form-annotated mention, in document order."""
    if tokenize not in ("word", "char"):
        raise ValueError(f"unknown tokenization {tokenize!r}")
    doc = ddoc.doc
    instances = []
    for dm in ddoc.mentions:
        if dm.form is None:
            continue  # annotation failure recorded upstream
        s = dm.sentence_index
        pre: list[str] = []
        for j in range(max(0, s - window), s):
            pre.extend(_expand(ddoc.sentences[j], ddoc.tag_flags[j], tokenize))
        sent, sflags = ddoc.sentences[s], ddoc.tag_flags[s]
        pre.extend(_expand(sent[:dm.start], sflags[:dm.start], tokenize))
        target = _expand(sent[dm.start:dm.start + dm.n_tokens],
                         sflags[dm.start:dm.start + dm.n_tokens], tokenize)
        post = _expand(sent[dm.start + dm.n_tokens:],
                       sflags[dm.start + dm.n_tokens:], tokenize)
        for j in range(s + 1, min(len(ddoc.sentences), s + 1 + window)):
            post.extend(_expand(ddoc.sentences[j], ddoc.tag_flags[j], tokenize))
        instances.append(RFSInstance(
            instance_id=f"{doc.doc_key}|c{dm.chain_id}|m{dm.mention_index}",
            doc_id=doc.doc_key,
            language=doc.language,
            entity_tag=ddoc.tags[dm.chain_id],
            pre=pre,
            target=target,
            post=post,
            form=dm.form,
            labels=labels_for(dm.form, doc.language),
            chain_id=dm.chain_id,
            mention_index=dm.mention_index,
        ))
    return instances


def length_filter_zh(instances: Iterable[RFSInstance],
                     max_chars: int = DEFAULT_MAX_CHARS) -> list[RFSInstance]:
    """Drop instances whose underscore-stripped character total exceeds the budget."""
    return [inst for inst in instances if inst.char_length() <= max_chars]


def load_split_ids(splits_dir: Union[str, Path]) -> dict[str, list[str]]:
    """Read train/dev/test doc-id manifests (plain text, one id per line)."""
    out = {}
    for split in ("train", "dev", "test"):
        path = Path(splits_dir) / f"{split}.ids"
        if path.exists():
            out[split] = [line.strip() for line in path.read_text(encoding="utf-8").splitlines()
                          if line.strip()]
    if "train" not in out or "dev" not in out:
        raise BuilderError(f"splits dir {splits_dir} must provide train.ids and dev.ids")
    return out


def make_splits(docs: Sequence[Document], language: str,
                split_ids: dict[str, list[str]],
                seed: int = DEFAULT_DEV_SEED) -> tuple[list[Document], list[Document], list[Document]]:
    """Assign documents to train/dev/test.

    English follows the manifests directly. For Chinese the official dev
    manifest becomes the test set (zero pronouns are only annotated in
    train/dev) and a seeded 10% document-level sample of the official
    training documents becomes the dev set.
    """
    ids = {s: set(v) for s, v in split_ids.items()}
    known = set().union(*ids.values())
    for doc in docs:
        if doc.doc_id not in known:
            raise SplitError(f"document {doc.doc_id} is missing from the split manifests")

    if language == "en":
        if "test" not in ids:
            raise BuilderError("English splits require a test manifest")
        train = [d for d in docs if d.doc_id in ids["train"]]
        dev = [d for d in docs if d.doc_id in ids["dev"]]
        test = [d for d in docs if d.doc_id in ids["test"]]
        return train, dev, test

    official_train = [d for d in docs if d.doc_id in ids["train"]]
    test = [d for d in docs if d.doc_id in ids["dev"]]
    candidates = sorted({d.doc_id for d in official_train})
    k = max(1, round(DEV_FRACTION * len(candidates)))
    sampled = set(random.Random(seed).sample(candidates, k))
    train = [d for d in official_train if d.doc_id not in sampled]
    dev = [d for d in official_train if d.doc_id in sampled]
    return train, dev, test


def _is_first_mention(inst: RFSInstance) -> bool:
    return inst.mention_index == 0


def compute_stats(splits: dict[str, list[RFSInstance]]) -> CorpusStats:
    """Corpus-level statistics over all built instances."""
    all_instances = [i for split in ("train", "dev", "test") for i in splits[split]]
    if not all_instances:
        raise BuilderError("no instances to compute statistics over")
    n = len(all_instances)
    first = sum(_is_first_mention(i) for i in all_instances)
    proper = sum(i.form is ReferentialForm.PROPER_NAME for i in all_instances)
    tokens = sum(len(i.pre) + len(i.target) + len(i.post) for i in all_instances)
    train_tags = {i.entity_tag for i in splits["train"]}
    test_tags = {i.entity_tag for i in splits["test"]}
    seen_ratio = (100.0 * len(test_tags & train_tags) / len(test_tags)) if test_tags else 0.0
    return CorpusStats(
        pct_first_mentions=100.0 * first / n,
        pct_proper_names=100.0 * proper / n,
        avg_tokens=tokens / n,
        seen_ratio=seen_ratio,
        split_sizes=(len(splits["train"]), len(splits["dev"]), len(splits["test"])),
    )


@dataclass
class BuiltDataset:
    language: str
    splits: dict[str, list[RFSInstance]]
    stats: CorpusStats
    config: dict
    documents: list[Document]

    def all_instances(self) -> list[RFSInstance]:
        return [i for s in ("train", "dev", "test") for i in self.splits[s]]


def build_dataset(docs: Sequence[Document], language: str,
                  split_ids: dict[str, list[str]],
                  tags: str = "lexical",
                  tokenize: Optional[str] = None,
                  max_chars: Optional[int] = DEFAULT_MAX_CHARS,
                  window: int = DEFAULT_WINDOW,
                  seed: int = DEFAULT_DEV_SEED) -> BuiltDataset:
    """Run the full construction pipeline over parsed documents."""
    if tokenize is None:
        tokenize = "char" if language == "zh" else "word"
    train_docs, dev_docs, test_docs = make_splits(docs, language, split_ids, seed)

    def process(doc_list: Sequence[Document]) -> list[RFSInstance]:
        out: list[RFSInstance] = []
        for doc in sorted(doc_list, key=lambda d: d.doc_key):
            annotations = annotate_document(doc)
            kept = filter_chains(doc, annotations)
            if not kept:
                continue
            chain_tags = {cid: entity_tag_for(chain, doc) for cid, chain in kept.items()}
            ddoc = delexicalise(doc, kept, chain_tags, mode=tags)
            instances = build_instances(ddoc, window=window, tokenize=tokenize)
            if language == "zh" and max_chars is not None:
                instances = length_filter_zh(instances, max_chars)
            out.extend(instances)
        return out

    splits = {"train": process(train_docs), "dev": process(dev_docs),
              "test": process(test_docs)}
    train_tags = {i.entity_tag for i in splits["train"]}
    for split in splits.values():
        for inst in split:
            inst.seen = inst.entity_tag in train_tags

    stats = compute_stats(splits)
    config = {
        "language": language,
        "tags": tags,
        "tokenize": tokenize,
        "max_chars": max_chars if language == "zh" else None,
        "window": window,
        "seed": seed,
        "dev_doc_ids": sorted({d.doc_id for d in dev_docs}),
        "zp_targets_delexicalised": True,
    }
    return BuiltDataset(language, splits, stats, config, list(docs))


def write_jsonl(instances: Iterable[RFSInstance], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for inst in instances:
            handle.write(json.dumps(inst.to_json(), ensure_ascii=False) + "\n")


def read_jsonl(path: Union[str, Path]) -> list[RFSInstance]:
    instances = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        doc_key = row["doc_id"]
        chain_id, mention_index = "", -1
        parts = row["instance_id"].split("|")
        if len(parts) == 3 and parts[1].startswith("c") and parts[2].startswith("m"):
            chain_id, mention_index = parts[1][1:], int(parts[2][1:])
        instances.append(RFSInstance(
            instance_id=row["instance_id"],
            doc_id=doc_key,
            language=row["language"],
            entity_tag=row["entity_tag"],
            pre=list(row["pre"]),
            target=list(row["target"]),
            post=list(row["post"]),
            form=ReferentialForm(row["form"]),
            labels=dict(row["labels"]),
            seen=bool(row["seen"]),
            chain_id=chain_id,
            mention_index=mention_index,
        ))
    return instances


def write_dataset(dataset: BuiltDataset, out_dir: Union[str, Path]) -> None:
    """Emit per-split JSONL plus stats and build configuration."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, instances in dataset.splits.items():
        write_jsonl(instances, out / f"{split}.jsonl")
    (out / "stats.json").write_text(
        json.dumps(dataset.stats.to_json(), indent=2) + "\n", encoding="utf-8")
    (out / "build_config.json").write_text(
        json.dumps(dataset.config, indent=2, sort_keys=True) + "\n", encoding="utf-8")
