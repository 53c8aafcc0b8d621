"""Neural form classifiers: a single-encoder model and an attention model.

``CRNN`` runs one bidirectional GRU over the concatenated
(pre, target, post) sequence and classifies from the summed hidden states
at the target boundaries. ``ConATT`` encodes the three sequences with
separate bidirectional GRUs, pools each with additive self-attention, and
classifies from the concatenated context vectors. Inputs come from a
trainable embedding table (randomly initialised or warm-started from
pretrained vectors) or from the final layer of a pretrained contextual
encoder, frozen by default.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import torch
from torch import nn

from .builder import RFSInstance
from .forms import LabelScheme

log = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"

Triple = tuple[list[str], list[str], list[str]]


class PositionBudgetError(Exception):
    """Input exceeds the contextual encoder's position budget."""


class SchemeMismatchError(Exception):
    pass


@dataclass
class ModelConfig:
    arch: str = "crnn"  # "crnn" | "conatt"
    init: str = "random"  # "random" | "static_embeddings" | "contextual_lm"
    scheme: str = "en4"
    hidden_size: int = 128
    embed_size: int = 100
    dropout: float = 0.1
    lm_finetune: bool = False
    seed: int = 1
    # ConATT prose variant: also concatenate the mean target embedding
    append_target_embedding: bool = False
    embeddings_path: Optional[str] = None
    lm_path: Optional[str] = None

    def __post_init__(self):
        if self.arch not in ("crnn", "conatt"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.init not in ("random", "static_embeddings", "contextual_lm"):
            raise ValueError(f"unknown input initialisation {self.init!r}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def label_scheme(self) -> LabelScheme:
        return LabelScheme.parse(self.scheme)


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [PAD, UNK]
        seen = set(self.itos)
        for tok in tokens:
            if tok not in seen:
                seen.add(tok)
                self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def from_instances(cls, instances: Iterable[RFSInstance]) -> "Vocabulary":
        def stream():
            for inst in instances:
                yield from inst.pre
                yield from inst.target
                yield from inst.post
        return cls(stream())

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])


def load_embeddings(path: Union[str, Path]) -> tuple[dict[str, list[float]], int]:
    """Read a text embedding file: token then whitespace-separated floats."""
    table: dict[str, list[float]] = {}
    dim = None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.rstrip().split()
        if not parts:
            continue
        vector = [float(x) for x in parts[1:]]
        if dim is None:
            dim = len(vector)
        elif len(vector) != dim:
            raise ValueError(f"{path}:{lineno}: expected {dim} floats, got {len(vector)}")
        table[parts[0]] = vector
    if dim is None:
        raise ValueError(f"{path}: empty embedding file")
    return table, dim


class EmbeddingInputs(nn.Module):
    """Trainable lookup table; random rows are uniform in (-0.1, 0.1)."""

    def __init__(self, vocab: Vocabulary, embed_size: int, seed: int,
                 pretrained: Optional[dict[str, list[float]]] = None):
        super().__init__()
        self.vocab = vocab
        # the pad row doubles as the learned placeholder for empty contexts,
        # so it stays trainable; batch-padding positions are masked or packed
        # away and never reach the loss
        self.embedding = nn.Embedding(len(vocab), embed_size)
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            table = torch.empty(len(vocab), embed_size)
            table.uniform_(-0.1, 0.1, generator=generator)
            if pretrained is not None:
                for i, tok in enumerate(vocab.itos):
                    if tok in pretrained:
                        table[i] = torch.tensor(pretrained[tok])
            self.embedding.weight.copy_(table)

    @property
    def width(self) -> int:
        return self.embedding.embedding_dim

    @property
    def budget(self) -> Optional[int]:
        return None

    @property
    def pad_surface(self) -> str:
        return PAD

    def forward(self, seqs: Sequence[Sequence[str]]) -> tuple[torch.Tensor, torch.Tensor]:
        lengths = torch.tensor([max(1, len(s)) for s in seqs], dtype=torch.long)
        width = int(lengths.max())
        ids = torch.zeros(len(seqs), width, dtype=torch.long)
        for b, seq in enumerate(seqs):
            for t, tok in enumerate(seq):
                ids[b, t] = self.vocab.index(tok)
        dtype = self.embedding.weight.dtype
        return self.embedding(ids).to(dtype), lengths


class ContextualInputs(nn.Module):
    """Per-token vectors from the final layer of a pretrained encoder.

    Tokens are aligned to the encoder's subwords by taking each word's
    first subword vector. The encoder is frozen unless ``finetune``.
    """

    def __init__(self, lm_path: str, finetune: bool = False):
        super().__init__()
        from transformers import AutoModel, AutoTokenizer
        self.tokenizer = AutoTokenizer.from_pretrained(lm_path)
        self.lm = AutoModel.from_pretrained(lm_path)
        self.finetune = finetune
        if not finetune:
            for param in self.lm.parameters():
                param.requires_grad_(False)

    @property
    def width(self) -> int:
        return self.lm.config.hidden_size

    @property
    def budget(self) -> Optional[int]:
        return int(self.lm.config.max_position_embeddings)

    @property
    def pad_surface(self) -> str:
        return self.tokenizer.pad_token or "[PAD]"

    def count_pieces(self, tokens: Sequence[str]) -> int:
        if not tokens:
            return 0
        return len(self.tokenizer(list(tokens), is_split_into_words=True)["input_ids"])

    def forward(self, seqs: Sequence[Sequence[str]]) -> tuple[torch.Tensor, torch.Tensor]:
        batch = [list(s) if s else [self.pad_surface] for s in seqs]
        enc = self.tokenizer(batch, is_split_into_words=True,
                             return_tensors="pt", padding=True)
        if enc["input_ids"].shape[1] > self.budget:
            raise PositionBudgetError(
                f"sequence needs {enc['input_ids'].shape[1]} positions, "
                f"encoder allows {self.budget}")
        if self.finetune and self.training:
            hidden = self.lm(**enc).last_hidden_state
        else:
            with torch.no_grad():
                hidden = self.lm(**enc).last_hidden_state
        lengths = torch.tensor([len(s) for s in batch], dtype=torch.long)
        out = hidden.new_zeros(len(batch), int(lengths.max()), hidden.shape[-1])
        for b in range(len(batch)):
            word_ids = enc.word_ids(b)
            first_piece: dict[int, int] = {}
            for pos, wid in enumerate(word_ids):
                if wid is not None and wid not in first_piece:
                    first_piece[wid] = pos
            for w in range(len(batch[b])):
                out[b, w] = hidden[b, first_piece[w]]
        return out, lengths


def make_inputs(config: ModelConfig,
                vocab: Optional[Vocabulary]) -> Union[EmbeddingInputs, ContextualInputs]:
    """Build the input layer named by ``config.init``."""
    if config.init == "contextual_lm":
        if not config.lm_path:
            raise ValueError("contextual_lm initialisation requires lm_path")
        return ContextualInputs(config.lm_path, config.lm_finetune)
    if vocab is None:
        raise ValueError("embedding-based initialisation requires a vocabulary")
    pretrained = None
    embed_size = config.embed_size
    if config.init == "static_embeddings":
        if not config.embeddings_path:
            raise ValueError("static_embeddings initialisation requires embeddings_path")
        pretrained, embed_size = load_embeddings(config.embeddings_path)
    return EmbeddingInputs(vocab, embed_size, config.seed, pretrained)


def truncate_to_budget(pre: list[str], target: list[str], post: list[str],
                       inputs: ContextualInputs) -> tuple[list[str], list[str]]:
    """Trim context words from the outer edges until the encoder accepts them."""
    budget = inputs.budget
    pre, post = list(pre), list(post)
    warned = False
    while inputs.count_pieces(pre + target + post) > budget:
        if not pre and not post:
            raise PositionBudgetError(
                "target alone exceeds the contextual encoder's position budget")
        overflow = inputs.count_pieces(pre + target + post) - budget
        take_pre = min(len(pre), (overflow + 1) // 2)
        take_post = min(len(post), overflow - take_pre)
        if take_pre == 0 and take_post == 0:
            take_pre, take_post = min(len(pre), 1), min(len(post), 1)
        pre = pre[take_pre:]
        post = post[:len(post) - take_post] if take_post else post
        warned = True
    if warned:
        log.warning("pre/post context truncated to fit the encoder's %d positions", budget)
    return pre, post


class SelfAttention(nn.Module):
    """Additive attention pooling: e = v·tanh(W h), weights = softmax(e)."""

    def __init__(self, input_size: int):
        super().__init__()
        self.proj = nn.Linear(input_size, input_size)
        self.vector = nn.Parameter(torch.empty(input_size))
        nn.init.uniform_(self.vector, -0.1, 0.1)

    def forward(self, hidden: torch.Tensor,
                lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        scores = torch.tanh(self.proj(hidden)) @ self.vector.to(hidden.dtype)
        mask = (torch.arange(hidden.shape[1])[None, :] >= lengths[:, None])
        scores = scores.masked_fill(mask, float("-inf"))
        weights = torch.softmax(scores, dim=1)
        pooled = torch.bmm(weights.unsqueeze(1), hidden).squeeze(1)
        return pooled, weights


def _run_gru(gru: nn.GRU, embedded: torch.Tensor,
             lengths: torch.Tensor) -> torch.Tensor:
    packed = nn.utils.rnn.pack_padded_sequence(
        embedded, lengths, batch_first=True, enforce_sorted=False)
    out, _ = gru(packed)
    hidden, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True)
    return hidden


class CRNN(nn.Module):
    """Single bidirectional GRU over [pre, target, post]."""

    def __init__(self, config: ModelConfig, inputs: nn.Module):
        super().__init__()
        self.config = config
        self.labels = list(config.label_scheme.labels)
        self.inputs = inputs
        self.gru = nn.GRU(inputs.width, config.hidden_size,
                          batch_first=True, bidirectional=True)
        self.feed_forward = nn.Linear(2 * config.hidden_size, config.hidden_size)
        self.drop = nn.Dropout(config.dropout)
        self.classifier = nn.Linear(config.hidden_size, len(self.labels))

    @property
    def representation_size(self) -> int:
        return self.feed_forward.out_features

    def forward(self, batch: Sequence[Triple]) -> tuple[torch.Tensor, torch.Tensor]:
        prepared = []
        truncate = (isinstance(self.inputs, ContextualInputs)
                    and self.config.label_scheme.language == "en")
        for pre, target, post in batch:
            if not target:
                raise ValueError("target referent must be non-empty")
            if truncate:
                pre, post = truncate_to_budget(list(pre), list(target), list(post),
                                               self.inputs)
            prepared.append((list(pre), list(target), list(post)))
        seqs = [pre + target + post for pre, target, post in prepared]
        starts = torch.tensor([len(pre) for pre, _, _ in prepared])
        ends = torch.tensor([len(pre) + len(tgt) - 1 for pre, tgt, _ in prepared])
        embedded, lengths = self.inputs(seqs)
        embedded = self.drop(embedded)
        hidden = _run_gru(self.gru, embedded, lengths)
        rows = torch.arange(len(batch))
        boundary = hidden[rows, starts] + hidden[rows, ends]
        representation = torch.relu(self.feed_forward(boundary))
        logits = self.classifier(self.drop(representation))
        return representation, logits


class ConATT(nn.Module):
    """Three bidirectional GRUs with self-attention pooling per sequence."""

    ROLES = ("pre", "target", "post")

    def __init__(self, config: ModelConfig, inputs: nn.Module):
        super().__init__()
        self.config = config
        self.labels = list(config.label_scheme.labels)
        self.inputs = inputs
        self.grus = nn.ModuleDict({
            role: nn.GRU(inputs.width, config.hidden_size,
                         batch_first=True, bidirectional=True)
            for role in self.ROLES})
        self.attentions = nn.ModuleDict({
            role: SelfAttention(2 * config.hidden_size) for role in self.ROLES})
        ff_in = 6 * config.hidden_size
        if config.append_target_embedding:
            ff_in += inputs.width
        self.feed_forward = nn.Linear(ff_in, config.hidden_size)
        self.drop = nn.Dropout(config.dropout)
        self.classifier = nn.Linear(config.hidden_size, len(self.labels))
        self.last_attention: dict[str, torch.Tensor] = {}

    @property
    def representation_size(self) -> int:
        return self.feed_forward.out_features

    def _encode_role(self, role: str,
                     seqs: Sequence[list[str]]) -> tuple[torch.Tensor, torch.Tensor]:
        embedded, lengths = self.inputs(seqs)
        embedded = self.drop(embedded)
        hidden = _run_gru(self.grus[role], embedded, lengths)
        pooled, weights = self.attentions[role](hidden, lengths)
        self.last_attention[role] = weights.detach()
        return pooled, embedded

    def forward(self, batch: Sequence[Triple]) -> tuple[torch.Tensor, torch.Tensor]:
        prepared = []
        pad = [self.inputs.pad_surface]
        truncate = (isinstance(self.inputs, ContextualInputs)
                    and self.config.label_scheme.language == "en")
        for pre, target, post in batch:
            if not target:
                raise ValueError("target referent must be non-empty")
            if truncate:
                budget = self.inputs.budget
                trimmed = False
                while self.inputs.count_pieces(pre) > budget:
                    pre, trimmed = pre[1:], True
                while self.inputs.count_pieces(post) > budget:
                    post, trimmed = post[:-1], True
                if trimmed:
                    log.warning("context stream truncated to the encoder's "
                                "%d positions", budget)
                if self.inputs.count_pieces(target) > budget:
                    raise PositionBudgetError("target exceeds the position budget")
            prepared.append((list(pre) or pad, list(target), list(post) or pad))
        pooled = {}
        target_embedded = None
        for k, role in enumerate(self.ROLES):
            pooled[role], embedded = self._encode_role(role, [p[k] for p in prepared])
            if role == "target":
                target_embedded = embedded
        parts = [pooled["pre"], pooled["target"], pooled["post"]]
        if self.config.append_target_embedding:
            parts.append(target_embedded.mean(dim=1))
        representation = torch.relu(self.feed_forward(torch.cat(parts, dim=1)))
        logits = self.classifier(self.drop(representation))
        return representation, logits


def build_model(config: ModelConfig,
                vocab: Optional[Vocabulary]) -> Union[CRNN, ConATT]:
    """Instantiate an architecture with seeded parameter initialisation."""
    torch.manual_seed(config.seed)
    inputs = make_inputs(config, vocab)
    cls = CRNN if config.arch == "crnn" else ConATT
    model = cls(config, inputs)
    model.vocab = vocab
    return model


def instance_triple(inst: RFSInstance) -> Triple:
    return (list(inst.pre), list(inst.target), list(inst.post))


def predict(model: Union[CRNN, ConATT], instance: RFSInstance) -> dict[str, float]:
    """Probability distribution over the model's scheme labels."""
    scheme = model.config.label_scheme
    if instance.language != scheme.language:
        raise SchemeMismatchError(
            f"{instance.language} instance given to a {scheme.language} model")
    if scheme.key not in instance.labels:
        raise SchemeMismatchError(f"instance lacks a {scheme.key} label")
    model.eval()
    with torch.no_grad():
        _, logits = model([instance_triple(instance)])
        probs = torch.softmax(logits[0], dim=-1)
    return {label: float(p) for label, p in zip(model.labels, probs)}


def predict_batch(model: Union[CRNN, ConATT],
                  instances: Sequence[RFSInstance],
                  batch_size: int = 32) -> list[str]:
    """Argmax labels for a list of instances."""
    model.eval()
    out: list[str] = []
    with torch.no_grad():
        for lo in range(0, len(instances), batch_size):
            chunk = instances[lo:lo + batch_size]
            _, logits = model([instance_triple(i) for i in chunk])
            for row in logits.argmax(dim=-1).tolist():
                out.append(model.labels[row])
    return out


def extract_representations(model: Union[CRNN, ConATT],
                            instances: Sequence[RFSInstance],
                            batch_size: int = 32) -> torch.Tensor:
    """The exact vectors consumed by the output layer, one row per instance."""
    model.eval()
    chunks = []
    with torch.no_grad():
        for lo in range(0, len(instances), batch_size):
            chunk = instances[lo:lo + batch_size]
            representation, _ = model([instance_triple(i) for i in chunk])
            chunks.append(representation)
    return torch.cat(chunks, dim=0)


def save_model(model: Union[CRNN, ConATT], path: Union[str, Path],
               dev_metrics: Optional[dict] = None) -> None:
    """Self-describing checkpoint: config, vocabulary, parameters, metrics."""
    payload = {
        "format": "rfsel-checkpoint-v1",
        "config": asdict(model.config),
        "vocab": model.vocab.itos if model.vocab is not None else None,
        "labels": model.labels,
        "state_dict": model.state_dict(),
        "dev_metrics": dev_metrics or {},
    }
    torch.save(payload, path)


def load_model(path: Union[str, Path]) -> Union[CRNN, ConATT]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "rfsel-checkpoint-v1":
        raise ValueError(f"{path} is not a recognised checkpoint")
    config = ModelConfig(**payload["config"])
    vocab = None
    if payload["vocab"] is not None:
        vocab = Vocabulary()
        vocab.itos = list(payload["vocab"])
        vocab.stoi = {t: i for i, t in enumerate(vocab.itos)}
    model = build_model(config, vocab)
    model.load_state_dict(payload["state_dict"])
    model.dev_metrics = payload["dev_metrics"]
    model.eval()
    return model
