"""Reader and writer for CoNLL-2012 v4 coreference files.

Documents come back with full constituency trees, token-level POS tags,
speaker metadata, and coreference chains. Chinese empty-category leaves
(POS ``-NONE-``) are kept as zero tokens so that zero-pronoun mentions
survive ingestion.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

# Column layout of the v4 skeleton files. Only these columns are consumed;
# predicate/sense/NE columns are passed through as placeholders on write.
COL_DOC_ID = 0
COL_PART = 1
COL_WORD_NUM = 2
COL_WORD = 3
COL_POS = 4
COL_PARSE = 5
COL_SPEAKER = 9
MIN_COLUMNS = 12

ZERO_POS = "-NONE-"

GENRES = ("bc", "bn", "mz", "nw", "tc", "wb")


class ConllError(Exception):
    """Base class for ingestion failures."""


class ConllParseError(ConllError):
    """Malformed line or unbalanced parse brackets, with file/line context."""

    def __init__(self, message: str, filename: str = "<stream>", line: int = 0):
        super().__init__(f"{filename}:{line}: {message}")
        self.filename = filename
        self.line = line


class CorefBracketError(ConllError):
    """Unbalanced coreference bracket for a chain."""

    def __init__(self, message: str, chain_id: str, filename: str = "<stream>", line: int = 0):
        super().__init__(f"{filename}:{line}: {message}")
        self.chain_id = chain_id


class UnknownChainError(ConllError):
    """Lookup of a chain id that does not exist in the document."""


@dataclass(frozen=True)
class Token:
    surface: str
    pos: str
    index: int
    is_zero: bool = False


class ParseTree:
    """Constituency tree node. Leaves carry the index of their token."""

    __slots__ = ("label", "children", "token_index")

    def __init__(self, label: str, children: Optional[list["ParseTree"]] = None,
                 token_index: int = -1):
        self.label = label
        self.children = children if children is not None else []
        self.token_index = token_index

    @property
    def is_leaf(self) -> bool:
        return self.token_index >= 0

    def leaves(self) -> Iterator["ParseTree"]:
        if self.is_leaf:
            yield self
        else:
            for child in self.children:
                yield from child.leaves()

    def span(self) -> tuple[int, int]:
        """Inclusive token range covered by this node."""
        leaves = list(self.leaves())
        return leaves[0].token_index, leaves[-1].token_index

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParseTree):
            return NotImplemented
        return (self.label == other.label
                and self.token_index == other.token_index
                and self.children == other.children)

    def __repr__(self) -> str:
        if self.is_leaf:
            return f"({self.label} #{self.token_index})"
        return "(" + self.label + " " + " ".join(repr(c) for c in self.children) + ")"


@dataclass
class Sentence:
    index: int
    tokens: list[Token]
    tree: ParseTree
    speaker: str = "-"


@dataclass(frozen=True)
class Mention:
    chain_id: str
    sentence_index: int
    start: int
    end: int  # inclusive
    is_zero: bool = False

    @property
    def order_key(self) -> tuple[int, int, int]:
        return (self.sentence_index, self.start, self.end)


@dataclass
class Document:
    doc_id: str
    part: int
    language: str  # "en" or "zh"
    genre: str
    sentences: list[Sentence]
    chains: dict[str, list[Mention]] = field(default_factory=dict)

    @property
    def doc_key(self) -> str:
        return f"{self.doc_id}#{self.part}"

    def sentence_tokens(self, index: int) -> list[Token]:
        return self.sentences[index].tokens


def chain_mentions(doc: Document, chain_id: str) -> list[Mention]:
    """Mentions of a chain in document order (sentence index, then start)."""
    if chain_id not in doc.chains:
        raise UnknownChainError(f"chain {chain_id!r} not in document {doc.doc_key}")
    return sorted(doc.chains[chain_id], key=lambda m: m.order_key)


def _genre_of(doc_id: str) -> str:
    return doc_id.split("/", 1)[0]


def _build_tree(rows: list[list[str]], filename: str, first_line: int) -> ParseTree:
    """Assemble the sentence tree from per-token parse bits."""
    stack: list[ParseTree] = []
    root: Optional[ParseTree] = None
    for offset, row in enumerate(rows):
        bit = row[COL_PARSE]
        lineno = first_line + offset
        i = 0
        while i < len(bit):
            ch = bit[i]
            if ch == "(":
                j = i + 1
                while j < len(bit) and bit[j] not in "(*)":
                    j += 1
                label = bit[i + 1:j]
                if not label:
                    raise ConllParseError("empty constituent label in parse bit", filename, lineno)
                node = ParseTree(label)
                if stack:
                    stack[-1].children.append(node)
                elif root is None:
                    root = node
                else:
                    raise ConllParseError("multiple roots in parse", filename, lineno)
                stack.append(node)
                i = j
            elif ch == "*":
                if not stack:
                    raise ConllParseError("leaf outside any constituent", filename, lineno)
                leaf = ParseTree(row[COL_POS], token_index=offset)
                stack[-1].children.append(leaf)
                i += 1
            elif ch == ")":
                if not stack:
                    raise ConllParseError("unbalanced ')' in parse bit", filename, lineno)
                stack.pop()
                i += 1
            else:
                raise ConllParseError(f"unexpected character {ch!r} in parse bit", filename, lineno)
    if stack:
        raise ConllParseError(f"unclosed constituent {stack[-1].label!r} at end of sentence",
                              filename, first_line + len(rows) - 1)
    if root is None:
        raise ConllParseError("sentence has no parse", filename, first_line)
    leaf_indices = [leaf.token_index for leaf in root.leaves()]
    if leaf_indices != list(range(len(rows))):
        raise ConllParseError("parse leaves do not cover the token sequence", filename, first_line)
    return root


class _CorefState:
    """Tracks open coreference brackets across the sentences of a document."""

    def __init__(self, filename: str):
        self.filename = filename
        # chain id -> stack of (sentence_index, start_token) opens
        self.open: dict[str, list[tuple[int, int]]] = {}
        self.mentions: dict[str, list[Mention]] = {}

    def _add(self, chain_id: str, sent_index: int, start: int, end: int,
             tokens: list[Token]) -> None:
        covered = tokens[start:end + 1]
        is_zero = len(covered) == 1 and covered[0].is_zero
        mention = Mention(chain_id, sent_index, start, end, is_zero)
        self.mentions.setdefault(chain_id, []).append(mention)

    def feed(self, column: str, sent_index: int, token_index: int,
             tokens: list[Token], lineno: int) -> None:
        if column == "-":
            return
        for item in column.split("|"):
            opened = item.startswith("(")
            closed = item.endswith(")")
            chain_id = item.strip("()")
            if not chain_id:
                raise CorefBracketError("empty chain id in coreference column",
                                        chain_id, self.filename, lineno)
            if opened and closed:
                self._add(chain_id, sent_index, token_index, token_index, tokens)
            elif opened:
                self.open.setdefault(chain_id, []).append((sent_index, token_index))
            elif closed:
                stack = self.open.get(chain_id)
                if not stack:
                    raise CorefBracketError(
                        f"close bracket for chain {chain_id} without a matching open",
                        chain_id, self.filename, lineno)
                open_sent, open_tok = stack.pop()
                if open_sent != sent_index:
                    raise CorefBracketError(
                        f"chain {chain_id} spans a sentence boundary",
                        chain_id, self.filename, lineno)
                self._add(chain_id, sent_index, open_tok, token_index, tokens)
            else:
                raise CorefBracketError(f"malformed coreference item {item!r}",
                                        chain_id, self.filename, lineno)

    def finish(self, lineno: int) -> dict[str, list[Mention]]:
        for chain_id, stack in self.open.items():
            if stack:
                raise CorefBracketError(
                    f"chain {chain_id} opened at sentence {stack[-1][0]} and never closed",
                    chain_id, self.filename, lineno)
        return {cid: sorted(ms, key=lambda m: m.order_key)
                for cid, ms in self.mentions.items()}


def parse_conll(source: Union[str, bytes, io.IOBase, Path], language: str,
                filename: str = "<stream>") -> list[Document]:
    """Parse one CoNLL-2012 v4 file into documents, input order preserved.

    ``source`` may be a path, an open file, raw bytes, or the file text.
    """
    if language not in ("en", "zh"):
        raise ValueError(f"unsupported language {language!r}")
    if isinstance(source, Path):
        filename = str(source)
        text = source.read_text(encoding="utf-8")
    elif isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        data = source.read()
        text = data.decode("utf-8") if isinstance(data, bytes) else data

    documents: list[Document] = []
    doc_id: Optional[str] = None
    part = 0
    sentences: list[Sentence] = []
    coref: Optional[_CorefState] = None
    pending_rows: list[list[str]] = []
    pending_first_line = 0

    def flush_sentence(lineno: int) -> None:
        nonlocal pending_rows
        if not pending_rows:
            return
        tokens = []
        for offset, row in enumerate(pending_rows):
            pos = row[COL_POS]
            surface = row[COL_WORD]
            is_zero = pos == ZERO_POS
            if is_zero and not surface.startswith("*"):
                raise ConllParseError(
                    f"empty-category token {surface!r} lacks the * marker",
                    filename, pending_first_line + offset)
            tokens.append(Token(surface, pos, offset, is_zero))
        tree = _build_tree(pending_rows, filename, pending_first_line)
        sent = Sentence(len(sentences), tokens,
                        tree, pending_rows[0][COL_SPEAKER])
        assert coref is not None
        for offset, row in enumerate(pending_rows):
            coref.feed(row[-1], sent.index, offset, tokens, pending_first_line + offset)
        sentences.append(sent)
        pending_rows = []

    def flush_document(lineno: int) -> None:
        nonlocal sentences, coref, doc_id
        if doc_id is None:
            return
        flush_sentence(lineno)
        assert coref is not None
        chains = coref.finish(lineno)
        documents.append(Document(doc_id, part, language, _genre_of(doc_id),
                                  sentences, chains))
        doc_id, sentences, coref = None, [], None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("#begin document"):
            if doc_id is not None:
                raise ConllParseError("nested '#begin document'", filename, lineno)
            try:
                inner = line[line.index("(") + 1:line.index(")")]
                part = int(line.rsplit("part", 1)[1].strip())
            except (ValueError, IndexError):
                raise ConllParseError(f"malformed document header {line!r}", filename, lineno)
            doc_id = inner
            coref = _CorefState(filename)
            continue
        if line.startswith("#end document"):
            if doc_id is None:
                raise ConllParseError("'#end document' without begin", filename, lineno)
            flush_document(lineno)
            continue
        if not line:
            if doc_id is not None:
                flush_sentence(lineno)
            continue
        if line.startswith("#"):
            continue
        if doc_id is None:
            raise ConllParseError("token line outside any document", filename, lineno)
        row = line.split()
        if len(row) < MIN_COLUMNS:
            raise ConllParseError(f"expected >= {MIN_COLUMNS} columns, got {len(row)}",
                                  filename, lineno)
        if not pending_rows:
            pending_first_line = lineno
        pending_rows.append(row)

    if doc_id is not None:
        raise ConllParseError(f"document {doc_id!r} not closed by '#end document'",
                              filename, len(text.splitlines()))
    return documents


def read_conll_file(path: Union[str, Path], language: str) -> list[Document]:
    return parse_conll(Path(path), language)


def read_conll_dir(path: Union[str, Path], language: str,
                   pattern: str = "*conll") -> list[Document]:
    """Parse every matching file under ``path``, sorted by file name."""
    docs: list[Document] = []
    for file in sorted(Path(path).rglob(pattern)):
        docs.extend(read_conll_file(file, language))
    return docs


def _parse_bits(sentence: Sentence) -> list[str]:
    """Reconstruct the per-token parse-bit column from the tree."""
    n = len(sentence.tokens)
    prefixes = [""] * n
    suffixes = [""] * n

    def walk(node: ParseTree) -> tuple[int, int]:
        if node.is_leaf:
            return node.token_index, node.token_index
        first, last = None, None
        for child in node.children:
            lo, hi = walk(child)
            first = lo if first is None else first
            last = hi
        assert first is not None and last is not None
        prefixes[first] = "(" + node.label + prefixes[first]
        suffixes[last] = suffixes[last] + ")"
        return first, last

    walk(sentence.tree)
    return [prefixes[i] + "*" + suffixes[i] for i in range(n)]


def _coref_columns(doc: Document, sentence: Sentence) -> list[str]:
    items: list[list[str]] = [[] for _ in sentence.tokens]
    for chain_id in doc.chains:
        for m in doc.chains[chain_id]:
            if m.sentence_index != sentence.index:
                continue
            if m.start == m.end:
                items[m.start].append(f"({chain_id})")
            else:
                items[m.start].append(f"({chain_id}")
                items[m.end].append(f"{chain_id})")
    return ["|".join(cell) if cell else "-" for cell in items]


def to_conll(doc: Document) -> str:
    """Serialize a document back to v4 columns (metadata columns as placeholders)."""
    lines = [f"#begin document ({doc.doc_id}); part {doc.part:03d}"]
    for sentence in doc.sentences:
        bits = _parse_bits(sentence)
        coref_cols = _coref_columns(doc, sentence)
        for token in sentence.tokens:
            row = [doc.doc_id, str(doc.part), str(token.index), token.surface,
                   token.pos, bits[token.index], "-", "-", "-",
                   sentence.speaker, "*", "*", coref_cols[token.index]]
            lines.append("   ".join(row))
        lines.append("")
    lines.append("#end document")
    return "\n".join(lines) + "\n"


def write_conll(docs: Iterable[Document], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for doc in docs:
            handle.write(to_conll(doc))
