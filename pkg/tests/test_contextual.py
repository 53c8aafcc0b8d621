import logging
import random

import pytest
import torch

from rfsel.builder import RFSInstance
from rfsel.forms import LabelScheme, ReferentialForm, coarsen
from rfsel.neural import (ContextualInputs, ModelConfig, PositionBudgetError,
                          build_model, load_model, predict, predict_batch,
                          save_model)

EN_WORDS = [f"w{i}" for i in range(12)] + ["bridge", "old", "the"]
ZH_CHARS = list("湖光山色静美好的了短")


@pytest.fixture(scope="module")
def tiny_lm(tmp_path_factory):
    """A small randomly initialised transformer encoder saved to disk."""
    from tokenizers import Tokenizer
    from tokenizers.models import WordPiece
    from tokenizers.pre_tokenizers import WhitespaceSplit
    from transformers import BertConfig, BertModel, PreTrainedTokenizerFast

    path = tmp_path_factory.mktemp("lm") / "tiny"
    vocab = ["[PAD]", "[UNK]"] + EN_WORDS + ZH_CHARS
    tokenizer = Tokenizer(WordPiece({w: i for i, w in enumerate(vocab)},
                                    unk_token="[UNK]"))
    tokenizer.pre_tokenizer = WhitespaceSplit()
    fast = PreTrainedTokenizerFast(tokenizer_object=tokenizer,
                                   unk_token="[UNK]", pad_token="[PAD]")
    torch.manual_seed(0)
    config = BertConfig(vocab_size=len(vocab), hidden_size=16,
                        num_hidden_layers=1, num_attention_heads=2,
                        intermediate_size=23, max_position_embeddings=24)
    BertModel(config).save_pretrained(path)
    fast.save_pretrained(path)
    return str(path)


def lm_config(arch="crnn", scheme="en4", **kw):
    base = dict(arch=arch, init="contextual_lm", scheme=scheme, hidden_size=8,
                dropout=0.0, seed=2)
    base.update(kw)
    return ModelConfig(**base)


def make_instance(pre, target, post, language="en"):
    form = ReferentialForm.PRONOUN
    labels = {s.key: coarsen(form, s) for s in LabelScheme.for_language(language)}
    return RFSInstance("i", "d", language, "tag", pre, target, post, form, labels)


class TestContextualInputs:
    def test_representation_width_follows_lm(self, tiny_lm):
        model = build_model(lm_config(lm_path=tiny_lm), vocab=None)
        assert model.gru.input_size == 16
        inst = make_instance(["w0", "w1"], ["bridge"], ["w2"])
        dist = predict(model, inst)
        assert abs(sum(dist.values()) - 1.0) < 1e-6

    def test_frozen_lm_gets_no_gradients(self, tiny_lm):
        model = build_model(lm_config(lm_path=tiny_lm), vocab=None)
        assert all(not p.requires_grad for p in model.inputs.lm.parameters())
        inst = make_instance(["w0"], ["w1"], ["w2"])
        _, logits = model([(inst.pre, inst.target, inst.post)])
        logits.sum().backward()
        assert model.gru.weight_ih_l0.grad is not None

    def test_finetune_flag_enables_lm_gradients(self, tiny_lm):
        model = build_model(lm_config(lm_path=tiny_lm, lm_finetune=True), vocab=None)
        model.train()
        _, logits = model([(["w0"], ["w1"], ["w2"])])
        logits.sum().backward()
        grads = [p.grad for p in model.inputs.lm.parameters() if p.grad is not None]
        assert grads and any(g.abs().sum() > 0 for g in grads)

    def test_unknown_words_map_to_unk(self, tiny_lm):
        inputs = ContextualInputs(tiny_lm)
        out, lengths = inputs([["totally-new-token", "w0"]])
        assert out.shape == (1, 2, 16)
        assert lengths.tolist() == [2]

    def test_empty_context_encoded_as_pad_token(self, tiny_lm):
        model = build_model(lm_config(arch="conatt", lm_path=tiny_lm), vocab=None)
        dist = predict(model, make_instance([], ["w1"], []))
        assert abs(sum(dist.values()) - 1.0) < 1e-6


class TestPositionBudget:
    def test_en_overlong_context_truncated_with_warning(self, tiny_lm, caplog):
        model = build_model(lm_config(lm_path=tiny_lm), vocab=None)
        inst = make_instance(["w0"] * 30, ["w1"], ["w2"] * 30)
        with caplog.at_level(logging.WARNING, logger="rfsel.neural"):
            dist = predict(model, inst)
        assert "truncated" in caplog.text
        assert abs(sum(dist.values()) - 1.0) < 1e-6

    def test_en_overlong_target_is_hard_error(self, tiny_lm):
        model = build_model(lm_config(lm_path=tiny_lm), vocab=None)
        inst = make_instance([], ["w1"] * 30, [])
        with pytest.raises(PositionBudgetError):
            predict(model, inst)

    def test_zh_within_filter_budget_accepted(self, tiny_lm):
        model = build_model(lm_config(scheme="zh5", lm_path=tiny_lm), vocab=None)
        inst = make_instance(ZH_CHARS[:5], [ZH_CHARS[5]], ZH_CHARS[6:9],
                             language="zh")
        assert inst.char_length() <= 512
        dist = predict(model, inst)
        assert abs(sum(dist.values()) - 1.0) < 1e-6

    def test_zh_over_budget_is_hard_error_not_truncation(self, tiny_lm):
        model = build_model(lm_config(scheme="zh5", lm_path=tiny_lm), vocab=None)
        inst = make_instance(ZH_CHARS * 3, [ZH_CHARS[0]], [], language="zh")
        with pytest.raises(PositionBudgetError):
            predict(model, inst)


class TestContextualTraining:
    def test_short_training_run_and_checkpoint(self, tiny_lm, tmp_path):
        from rfsel.experiment import train_model
        rng = random.Random(0)
        instances = []
        for k in range(16):
            inst = make_instance([rng.choice(EN_WORDS) for _ in range(3)],
                                 [rng.choice(EN_WORDS)],
                                 [rng.choice(EN_WORDS) for _ in range(3)])
            inst.labels["4way"] = LabelScheme.EN4.labels[k % 4]
            instances.append(inst)
        result = train_model(lm_config(lm_path=tiny_lm), instances, instances[:4],
                             epochs=2, batch_size=4)
        before = predict_batch(result.model, instances)
        path = tmp_path / "ctx.pt"
        save_model(result.model, path)
        loaded = load_model(path)
        assert predict_batch(loaded, instances) == before
