import json
import logging
from pathlib import Path

import pytest

from rfsel.builder import (BuilderError, RFSInstance, SplitError, build_dataset,
                           build_instances, compute_stats, delexicalise,
                           entity_tag_for, filter_chains, length_filter_zh,
                           make_splits, read_jsonl, write_dataset)
from rfsel.conll import Document, Mention, ParseTree, Sentence, Token
from rfsel.forms import ReferentialForm, annotate_document, coarsen, LabelScheme

from conftest import GOLDEN, doc_by_id


def annotated_and_kept(doc):
    annotations = annotate_document(doc)
    return annotations, filter_chains(doc, annotations)


class TestFilterChains:
    def test_all_pronominal_chain_removed(self, en_docs):
        doc = doc_by_id(en_docs, "en_0001")
        annotations, kept = annotated_and_kept(doc)
        assert len(annotations) == 3
        assert set(kept) == {"10", "11"}  # "You" chain dropped

    def test_pronoun_plus_zp_chain_removed(self, zh_docs):
        doc = doc_by_id(zh_docs, "zh_0004")
        _, kept = annotated_and_kept(doc)
        assert "42" not in kept  # {Pronoun, ZeroPronoun}
        assert "41" in kept      # {ProperName, Pronoun}

    def test_no_kept_chain_is_all_pronominal(self, en_docs, zh_docs):
        for doc in (*en_docs, *zh_docs):
            _, kept = annotated_and_kept(doc)
            for chain in kept.values():
                forms = [f for f in chain.forms if f is not None]
                assert any(not f.is_pronominal for f in forms), chain.chain_id


class TestEntityTag:
    def test_multiword_proper_name(self, en_docs):
        doc = doc_by_id(en_docs, "en_0000")
        _, kept = annotated_and_kept(doc)
        assert entity_tag_for(kept["1"], doc) == "Avalon_Motors"

    def test_single_word_proper_name(self, en_docs):
        doc = doc_by_id(en_docs, "en_0000")
        _, kept = annotated_and_kept(doc)
        assert entity_tag_for(kept["3"], doc) == "Camden"

    def test_description_fallback(self, en_docs):
        doc = doc_by_id(en_docs, "en_0003")
        _, kept = annotated_and_kept(doc)
        assert entity_tag_for(kept["30"], doc) == "the_old_bridge"

    def test_first_description_not_first_mention(self, en_docs):
        # chain starts with a demonstrative; the tag comes from the
        # description that follows it
        doc = doc_by_id(en_docs, "en_0004")
        _, kept = annotated_and_kept(doc)
        assert entity_tag_for(kept["40"], doc) == "The_sauce"

    def test_demonstrative_only_chain_falls_back_to_demonstrative(self, zh_docs):
        doc = doc_by_id(zh_docs, "zh_0001")
        _, kept = annotated_and_kept(doc)
        assert entity_tag_for(kept["11"], doc) == "这_本_书"


class TestDelexicalise:
    def test_every_kept_mention_replaced_by_tag(self, en_docs):
        doc = doc_by_id(en_docs, "en_0004")
        _, kept = annotated_and_kept(doc)
        tags = {cid: entity_tag_for(c, doc) for cid, c in kept.items()}
        ddoc = delexicalise(doc, kept, tags, mode="lexical")
        assert ddoc.sentences[2] == ["Gina", "made", "The", "sauce", "in", "Naples", "."]

    def test_entity_mode_keeps_tag_atomic(self, en_docs):
        doc = doc_by_id(en_docs, "en_0004")
        _, kept = annotated_and_kept(doc)
        tags = {cid: entity_tag_for(c, doc) for cid, c in kept.items()}
        ddoc = delexicalise(doc, kept, tags, mode="entity")
        assert "The_sauce" in ddoc.sentences[2]
        flat_flags = [f for flags in ddoc.tag_flags for f in flags]
        assert any(flat_flags)

    def test_zp_leaf_replaced_by_tag(self, zh_docs):
        doc = doc_by_id(zh_docs, "zh_0000")
        _, kept = annotated_and_kept(doc)
        tags = {cid: entity_tag_for(c, doc) for cid, c in kept.items()}
        ddoc = delexicalise(doc, kept, tags, mode="lexical")
        # sentence 2 was: *pro* 明年 通车 。
        assert ddoc.sentences[2] == ["一", "座", "新", "大桥", "明年", "通车", "。"]

    def test_unreferenced_empty_category_dropped(self, zh_docs):
        doc = doc_by_id(zh_docs, "zh_0001")
        # drop the embedded-clause chain so its *pro* is unreferenced
        _, kept = annotated_and_kept(doc)
        kept = {cid: c for cid, c in kept.items() if cid != "11"}
        tags = {cid: entity_tag_for(c, doc) for cid, c in kept.items()}
        ddoc = delexicalise(doc, kept, tags, mode="lexical")
        assert ddoc.sentences[1] == ["王芳", "说", "太", "旧", "。"]

    def test_nested_mention_outer_wins(self, en_docs, caplog):
        doc = doc_by_id(en_docs, "en_0003")
        _, kept = annotated_and_kept(doc)
        tags = {cid: entity_tag_for(c, doc) for cid, c in kept.items()}
        with caplog.at_level(logging.WARNING, logger="rfsel.builder"):
            ddoc = delexicalise(doc, kept, tags, mode="lexical")
        assert "overlaps" in caplog.text
        inner = [m for m in ddoc.mentions
                 if m.chain_id == "31" and m.sentence_index == 1]
        assert inner == []
        assert ddoc.sentences[1] == ["the", "old", "bridge", "closed", "yesterday", "."]

    def test_mode_equivalence_after_rejoining_tags(self, en_docs, zh_docs):
        for doc in (*en_docs, *zh_docs):
            _, kept = annotated_and_kept(doc)
            if not kept:
                continue
            tags = {cid: entity_tag_for(c, doc) for cid, c in kept.items()}
            entity = delexicalise(doc, kept, tags, mode="entity")
            lexical = delexicalise(doc, kept, tags, mode="lexical")
            rejoined = [list(sent) for sent in lexical.sentences]
            for dm in sorted(lexical.mentions, key=lambda m: -m.start):
                sent = rejoined[dm.sentence_index]
                sent[dm.start:dm.start + dm.n_tokens] = [
                    "_".join(sent[dm.start:dm.start + dm.n_tokens])]
            assert rejoined == entity.sentences, doc.doc_id


def flat_sentence(words, postags, index):
    tokens = [Token(w, p, i, p == "-NONE-") for i, (w, p) in enumerate(zip(words, postags))]
    leaves = [ParseTree(p, token_index=i) for i, p in enumerate(postags)]
    tree = ParseTree("TOP", [ParseTree("S", [ParseTree("NP", leaves[:1]),
                                             ParseTree("VP", leaves[1:])])])
    return Sentence(index, tokens, tree)


def make_linear_doc(n_sentences, mention_sentence):
    """A doc of numbered 3-token sentences with one mention per design."""
    sentences = []
    for i in range(n_sentences):
        words = [f"thing{i}", f"verb{i}", f"arg{i}"]
        sentences.append(flat_sentence(words, ["NN", "VBZ", "NN"], i))
    mention = Mention("0", mention_sentence, 0, 0)
    return Document("nw/synth/linear", 0, "en", "nw", sentences, {"0": [mention]})


class TestBuildInstances:
    def test_document_initial_mention_has_prefix_only(self, zh_dataset):
        inst = [i for i in zh_dataset.all_instances()
                if i.instance_id == "nw/mini/zh_0009#0|c90|m0"][0]
        assert inst.pre == []

    def test_window_arithmetic_mid_document(self):
        doc = make_linear_doc(12, mention_sentence=5)
        annotations, kept = annotated_and_kept(doc)
        tags = {cid: entity_tag_for(c, doc) for cid, c in kept.items()}
        ddoc = delexicalise(doc, kept, tags, mode="lexical")
        (inst,) = build_instances(ddoc, window=3, tokenize="word")
        assert inst.pre[0] == "thing2"
        assert inst.pre == ["thing2", "verb2", "arg2", "thing3", "verb3", "arg3",
                            "thing4", "verb4", "arg4"]
        assert inst.target == ["thing5"]
        assert inst.post == ["verb5", "arg5", "thing6", "verb6", "arg6",
                             "thing7", "verb7", "arg7", "thing8", "verb8", "arg8"]

    def test_labels_consistent_with_coarsen(self, en_dataset, zh_dataset):
        for inst in (*en_dataset.all_instances(), *zh_dataset.all_instances()):
            for scheme in LabelScheme.for_language(inst.language):
                assert inst.labels[scheme.key] == coarsen(inst.form, scheme)


def make_instance(pre, target, post, language="zh"):
    return RFSInstance("x", "d", language, "t", pre, target, post,
                       ReferentialForm.DESCRIPTION,
                       {}, chain_id="0", mention_index=0)


class TestLengthFilter:
    def test_boundary_512_kept_513_dropped(self):
        at_budget = make_instance(["好"] * 200, ["湖"] * 12, ["山"] * 300)
        over_budget = make_instance(["好"] * 200, ["湖"] * 13, ["山"] * 300)
        assert at_budget.char_length() == 512
        assert over_budget.char_length() == 513
        assert length_filter_zh([at_budget, over_budget]) == [at_budget]

    def test_underscores_do_not_count(self):
        inst = make_instance(["A_B"], ["好"], [])
        assert inst.char_length() == 3  # A, B and the target character

    def test_corpus_budget_documents(self, zh_dataset):
        budget = [i for i in zh_dataset.all_instances() if "zh_0007" in i.doc_id]
        assert len(budget) == 1
        assert budget[0].char_length() == 512
        assert not any("zh_0008" in i.doc_id for i in zh_dataset.all_instances())

    def test_all_zh_instances_within_budget(self, zh_dataset):
        assert all(i.char_length() <= 512 for i in zh_dataset.all_instances())


class TestSplits:
    def test_en_manifest_assignment(self, en_docs, en_split_ids):
        train, dev, test = make_splits(en_docs, "en", en_split_ids)
        assert [len(train), len(dev), len(test)] == [6, 2, 2]

    def test_zh_dev_resampling_golden(self, zh_docs, zh_split_ids):
        train, dev, test = make_splits(zh_docs, "zh", zh_split_ids, seed=7)
        assert [d.doc_id for d in dev] == ["nw/mini/zh_0001"]
        assert len(train) == 7
        assert {d.doc_id for d in test} == {"bn/mini/zh_0008", "nw/mini/zh_0009"}

    def test_zh_dev_resampling_is_seed_deterministic(self, zh_docs, zh_split_ids):
        first = make_splits(zh_docs, "zh", zh_split_ids, seed=13)
        second = make_splits(zh_docs, "zh", zh_split_ids, seed=13)
        assert [d.doc_id for d in first[1]] == [d.doc_id for d in second[1]]

    def test_missing_doc_raises(self, en_docs, en_split_ids):
        ids = {k: [i for i in v if not i.endswith("en_0005")]
               for k, v in en_split_ids.items()}
        with pytest.raises(SplitError) as err:
            make_splits(en_docs, "en", ids)
        assert "en_0005" in str(err.value)


class TestStats:
    def test_two_instances_both_first(self):
        a = make_instance([], ["x"], [], language="en")
        b = make_instance([], ["y"], [], language="en")
        stats = compute_stats({"train": [a], "dev": [], "test": [b]})
        assert stats.pct_first_mentions == 100.0

    def test_minicorpus_stats_frozen(self, en_dataset):
        stats = en_dataset.stats
        assert stats.split_sizes == (34, 12, 10)
        assert stats.pct_first_mentions == pytest.approx(50.0)
        assert stats.pct_proper_names == pytest.approx(100 * 12 / 56)
        assert stats.seen_ratio == pytest.approx(20.0)

    def test_zh_minicorpus_stats_frozen(self, zh_dataset):
        stats = zh_dataset.stats
        assert stats.split_sizes == (33, 5, 6)
        assert stats.seen_ratio == pytest.approx(25.0)

    def test_seen_flags(self, en_dataset):
        by_id = {i.instance_id: i for i in en_dataset.splits["test"]}
        assert by_id["nw/mini/en_0008#0|c80|m0"].seen          # Gina, in train
        assert not by_id["nw/mini/en_0008#0|c82|m0"].seen      # Turin, unseen
        assert all(i.seen for i in en_dataset.splits["train"])


@pytest.mark.parametrize("name,lang,tags,tokenize", [
    ("en_lexical_word", "en", "lexical", "word"),
    ("en_entity_word", "en", "entity", "word"),
    ("zh_lexical_char", "zh", "lexical", "char"),
])
def test_golden_files_byte_identical(tmp_path, request, name, lang, tags, tokenize):
    docs = request.getfixturevalue(f"{lang}_docs")
    ids = request.getfixturevalue(f"{lang}_split_ids")
    dataset = build_dataset(docs, lang, ids, tags=tags, tokenize=tokenize)
    write_dataset(dataset, tmp_path / name)
    for fname in ("train.jsonl", "dev.jsonl", "test.jsonl", "stats.json",
                  "build_config.json"):
        built = (tmp_path / name / fname).read_bytes()
        golden = (GOLDEN / name / fname).read_bytes()
        assert built == golden, f"{name}/{fname} diverged from the golden file"


def test_jsonl_schema_and_roundtrip(tmp_path, en_dataset):
    path = tmp_path / "train.jsonl"
    from rfsel.builder import write_jsonl
    write_jsonl(en_dataset.splits["train"], path)
    row = json.loads(path.read_text(encoding="utf-8").splitlines()[0])
    assert list(row) == ["instance_id", "doc_id", "language", "entity_tag",
                         "pre", "target", "post", "form", "labels", "seen"]
    back = read_jsonl(path)
    assert [i.to_json() for i in back] == [i.to_json() for i in en_dataset.splits["train"]]
    assert back[0].chain_id == en_dataset.splits["train"][0].chain_id


def test_zh_whole_corpus_mode(zh_docs, zh_split_ids):
    unfiltered = build_dataset(zh_docs, "zh", zh_split_ids, max_chars=None)
    filtered = build_dataset(zh_docs, "zh", zh_split_ids)
    assert len(unfiltered.all_instances()) == len(filtered.all_instances()) + 1


def test_zh_word_mode_keeps_words_whole(zh_docs, zh_split_ids):
    dataset = build_dataset(zh_docs, "zh", zh_split_ids, tokenize="word")
    inst = [i for i in dataset.all_instances()
            if i.instance_id == "nw/mini/zh_0009#0|c90|m0"][0]
    assert inst.target == ["北京"]
    assert "秋天" in inst.post  # multi-character word left unsplit


def test_document_without_chains_parses_but_yields_no_instances():
    from rfsel.conll import parse_conll
    text = """#begin document (nw/test/bare); part 000
nw/test/bare 0 0 Rain NN (TOP(S(NP*) - - - - * * -
nw/test/bare 0 1 fell VBD (VP*) - - - - * * -
nw/test/bare 0 2 . . *)) - - - - * * -

#end document
"""
    (doc,) = parse_conll(text, "en")
    assert doc.chains == {}
    annotations = annotate_document(doc)
    assert filter_chains(doc, annotations) == {}
