"""Referential form annotation and the label schemes built on top of it.

Every mention gets one of five fine-grained forms via a deterministic rule
cascade over the parse tree and POS tags. The coarser classification
schemes (2- to 5-way, per language) are total mappings from those forms.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Union

from .conll import Document, Mention, ParseTree, Sentence


class AnnotationError(Exception):
    """Mention cannot be assigned a referential form."""


class SchemeMismatchError(Exception):
    """Form and scheme belong to incompatible languages."""


class ReferentialForm(enum.Enum):
    DEMONSTRATIVE = "Demonstrative"
    DESCRIPTION = "Description"
    PROPER_NAME = "Proper Name"
    PRONOUN = "Pronoun"
    ZERO_PRONOUN = "ZP"

    @property
    def label(self) -> str:
        return self.value

    @property
    def is_pronominal(self) -> bool:
        return self in (ReferentialForm.PRONOUN, ReferentialForm.ZERO_PRONOUN)


OVERT_NON_PRONOMINAL = (
    ReferentialForm.DEMONSTRATIVE,
    ReferentialForm.DESCRIPTION,
    ReferentialForm.PROPER_NAME,
)

NON_PRONOMINAL_LABEL = "Non-pronominal"
PRONOMINAL_LABEL = "Pronominal"
OVERT_LABEL = "Overt Referring Expression"


class LabelScheme(enum.Enum):
    """Classification granularities, each with its canonical label order."""

    EN4 = ("en", 4, (ReferentialForm.DEMONSTRATIVE.label, ReferentialForm.DESCRIPTION.label,
                     ReferentialForm.PROPER_NAME.label, ReferentialForm.PRONOUN.label))
    EN3 = ("en", 3, (ReferentialForm.DESCRIPTION.label, ReferentialForm.PROPER_NAME.label,
                     ReferentialForm.PRONOUN.label))
    EN2 = ("en", 2, (NON_PRONOMINAL_LABEL, PRONOMINAL_LABEL))
    ZH5 = ("zh", 5, (ReferentialForm.DEMONSTRATIVE.label, ReferentialForm.DESCRIPTION.label,
                     ReferentialForm.PROPER_NAME.label, ReferentialForm.PRONOUN.label,
                     ReferentialForm.ZERO_PRONOUN.label))
    ZH4 = ("zh", 4, (ReferentialForm.DESCRIPTION.label, ReferentialForm.PROPER_NAME.label,
                     ReferentialForm.PRONOUN.label, ReferentialForm.ZERO_PRONOUN.label))
    ZH3 = ("zh", 3, (NON_PRONOMINAL_LABEL, ReferentialForm.PRONOUN.label,
                     ReferentialForm.ZERO_PRONOUN.label))
    ZH2 = ("zh", 2, (OVERT_LABEL, ReferentialForm.ZERO_PRONOUN.label))

    def __init__(self, language: str, n_way: int, labels: tuple[str, ...]):
        self.language = language
        self.n_way = n_way
        self.labels = labels

    @property
    def key(self) -> str:
        """JSON key for this scheme, e.g. "4way"."""
        return f"{self.n_way}way"

    @classmethod
    def for_language(cls, language: str) -> list["LabelScheme"]:
        return [s for s in cls if s.language == language]

    @classmethod
    def parse(cls, name: str) -> "LabelScheme":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown label scheme {name!r}") from None


def coarsen(form: ReferentialForm, scheme: LabelScheme) -> str:
    """Map a fine-grained form onto a scheme's label set."""
    if form is ReferentialForm.ZERO_PRONOUN and scheme.language != "zh":
        raise SchemeMismatchError(f"{form.label} is not expressible under {scheme.name}")
    if scheme in (LabelScheme.EN4, LabelScheme.ZH5):
        return form.label
    if scheme in (LabelScheme.EN3, LabelScheme.ZH4):
        if form is ReferentialForm.DEMONSTRATIVE:
            return ReferentialForm.DESCRIPTION.label
        return form.label
    if scheme in (LabelScheme.EN2, LabelScheme.ZH3):
        if form in OVERT_NON_PRONOMINAL:
            return NON_PRONOMINAL_LABEL
        if scheme is LabelScheme.EN2:
            return PRONOMINAL_LABEL
        return form.label  # ZH3 keeps Pronoun and ZP apart
    if scheme is LabelScheme.ZH2:
        return OVERT_LABEL if form is not ReferentialForm.ZERO_PRONOUN else form.label
    raise AssertionError(f"unhandled scheme {scheme}")


def labels_for(form: ReferentialForm, language: str) -> dict[str, str]:
    """All scheme labels valid for the language, keyed "5way".."2way"."""
    return {s.key: coarsen(form, s) for s in LabelScheme.for_language(language)}


def load_word_list(path: Union[str, Path]) -> frozenset[str]:
    """One entry per line; '#' starts a comment line; blank lines ignored."""
    words = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.add(line)
    return frozenset(words)


def _bundled(name: str) -> frozenset[str]:
    ref = resources.files("rfsel").joinpath("rules", name)
    with resources.as_file(ref) as path:
        return load_word_list(path)


@dataclass(frozen=True)
class AnnotationRules:
    """POS tag sets and demonstrative word lists driving the form cascade."""

    pronoun_tags: frozenset[str]
    proper_tags: frozenset[str]
    nominal_tags: frozenset[str]
    determiner_tags: frozenset[str]
    demonstratives: frozenset[str]
    # zh demonstratives fuse with classifiers into one token (e.g. determiner
    # + classifier compounds), so the list is matched by prefix there.
    match_prefix: bool

    @classmethod
    def bundled(cls, language: str) -> "AnnotationRules":
        if language == "en":
            return cls(
                pronoun_tags=_bundled("pronoun_tags_en.txt"),
                proper_tags=_bundled("proper_tags_en.txt"),
                nominal_tags=_bundled("nominal_tags_en.txt"),
                determiner_tags=frozenset({"DT"}),
                demonstratives=_bundled("demonstratives_en.txt"),
                match_prefix=False,
            )
        if language == "zh":
            return cls(
                pronoun_tags=_bundled("pronoun_tags_zh.txt"),
                proper_tags=_bundled("proper_tags_zh.txt"),
                nominal_tags=_bundled("nominal_tags_zh.txt"),
                determiner_tags=frozenset({"DT"}),
                demonstratives=_bundled("demonstratives_zh.txt"),
                match_prefix=True,
            )
        raise ValueError(f"unsupported language {language!r}")

    def is_demonstrative_token(self, surface: str, pos: str) -> bool:
        if pos not in self.determiner_tags:
            return False
        if self.match_prefix:
            return any(surface.startswith(w) for w in self.demonstratives)
        return surface.lower() in self.demonstratives


_RULES_CACHE: dict[str, AnnotationRules] = {}


def default_rules(language: str) -> AnnotationRules:
    if language not in _RULES_CACHE:
        _RULES_CACHE[language] = AnnotationRules.bundled(language)
    return _RULES_CACHE[language]


NP_LABELS = ("NP", "NML")


def _base_label(label: str) -> str:
    return label.split("-")[0].split("=")[0]


def covering_np(tree: ParseTree, start: int, end: int) -> Optional[ParseTree]:
    """Lowest NP-like node whose span covers [start, end], or None."""
    best: Optional[ParseTree] = None

    def visit(node: ParseTree) -> None:
        nonlocal best
        if node.is_leaf:
            return
        lo, hi = node.span()
        if lo > start or hi < end:
            return
        if _base_label(node.label) in NP_LABELS:
            best = node  # deeper covering nodes overwrite shallower ones
        for child in node.children:
            visit(child)

    visit(tree)
    return best


def _np_child_head(node: ParseTree, rules: AnnotationRules) -> Optional[int]:
    """Rightmost nominal child of an NP node, descending into nested NPs."""
    for child in reversed(node.children):
        if child.is_leaf:
            if child.label in rules.nominal_tags:
                return child.token_index
        elif _base_label(child.label) in NP_LABELS:
            found = _np_child_head(child, rules)
            if found is not None:
                return found
    return None


def _head_token_index(mention: Mention, sentence: Sentence, language: str,
                      rules: AnnotationRules) -> int:
    """English: rightmost nominal child of the span's own NP node.

    Chinese (and any span without an exactly-covering NP): rightmost
    nominal token, falling back to the last token of the span.
    """
    if language == "en":
        node = covering_np(sentence.tree, mention.start, mention.end)
        if node is not None and node.span() == (mention.start, mention.end):
            found = _np_child_head(node, rules)
            if found is not None:
                return found
    for i in reversed(range(mention.start, mention.end + 1)):
        if sentence.tokens[i].pos in rules.nominal_tags:
            return i
    return mention.end


def classify_form(mention: Mention, sentence: Sentence, language: str,
                  rules: Optional[AnnotationRules] = None) -> ReferentialForm:
    """Assign the fine-grained referential form of one mention.

    Cascade, first match wins: zero-pronoun span; pronoun-tagged head or
    single token; NP containing a demonstrative determiner; proper-noun
    head; description otherwise.
    """
    rules = rules or default_rules(language)
    tokens = sentence.tokens[mention.start:mention.end + 1]
    if not tokens or mention.end >= len(sentence.tokens):
        raise AnnotationError(
            f"mention span [{mention.start}, {mention.end}] outside sentence "
            f"{mention.sentence_index}")

    if mention.is_zero:
        if language != "zh":
            raise AnnotationError("zero-pronoun mention in a non-zh document")
        return ReferentialForm.ZERO_PRONOUN

    if covering_np(sentence.tree, mention.start, mention.end) is None:
        raise AnnotationError(
            f"mention span [{mention.start}, {mention.end}] in sentence "
            f"{mention.sentence_index} is not dominated by an NP")

    head = sentence.tokens[_head_token_index(mention, sentence, language, rules)]
    if head.pos in rules.pronoun_tags or (
            len(tokens) == 1 and tokens[0].pos in rules.pronoun_tags):
        return ReferentialForm.PRONOUN
    if any(rules.is_demonstrative_token(t.surface, t.pos) for t in tokens):
        return ReferentialForm.DEMONSTRATIVE
    if head.pos in rules.proper_tags:
        return ReferentialForm.PROPER_NAME
    return ReferentialForm.DESCRIPTION


@dataclass
class AnnotatedChain:
    chain_id: str
    mentions: list[Mention]
    # parallel to mentions; None marks a mention the cascade could not label
    forms: list[Optional[ReferentialForm]]

    def annotated(self) -> list[tuple[Mention, ReferentialForm]]:
        return [(m, f) for m, f in zip(self.mentions, self.forms) if f is not None]

    @property
    def has_overt_non_pronominal(self) -> bool:
        return any(f in OVERT_NON_PRONOMINAL for f in self.forms if f is not None)


def annotate_document(doc: Document,
                      rules: Optional[AnnotationRules] = None) -> dict[str, AnnotatedChain]:
    """Classify every mention of every chain; failures become None entries."""
    rules = rules or default_rules(doc.language)
    out: dict[str, AnnotatedChain] = {}
    for chain_id, mentions in doc.chains.items():
        forms: list[Optional[ReferentialForm]] = []
        for mention in mentions:
            try:
                forms.append(classify_form(
                    mention, doc.sentences[mention.sentence_index], doc.language, rules))
            except AnnotationError:
                forms.append(None)
        out[chain_id] = AnnotatedChain(chain_id, list(mentions), forms)
    return out
