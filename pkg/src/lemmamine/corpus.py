"""Lexical indexing of Rocq project trees.

Sources are split into period-terminated sentences without building an AST.
All offsets are byte offsets into the UTF-8 encoding of the file.
"""
from __future__ import annotations

import fnmatch
import json
import logging
import os
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

THEOREM_KINDS = ("Theorem", "Lemma", "Corollary", "Fact", "Remark", "Proposition", "Example")
DEFINITION_KINDS = (
    "Inductive", "Fixpoint", "CoFixpoint", "Definition", "Record", "Class",
    "Instance", "Notation", "Variable", "Hypothesis", "Axiom",
)
# Surface keywords folded onto the indexed definition kinds.
_DEF_ALIASES = {
    "Inductive": "Inductive", "CoInductive": "Inductive", "Variant": "Inductive",
    "Fixpoint": "Fixpoint", "CoFixpoint": "CoFixpoint",
    "Definition": "Definition", "Let": "Definition",
    "Record": "Record", "Structure": "Record",
    "Class": "Class", "Instance": "Instance",
    "Notation": "Notation",
    "Variable": "Variable", "Variables": "Variable",
    "Hypothesis": "Hypothesis", "Hypotheses": "Hypothesis",
    "Axiom": "Axiom", "Axioms": "Axiom", "Parameter": "Axiom",
    "Parameters": "Axiom", "Conjecture": "Axiom",
}
PROOF_TERMINATORS = ("Qed.", "Defined.", "Admitted.")
_ABORT = ("Abort.", "Abort All.")

_ATTR_PREFIX = re.compile(
    rb"^(?:#\[[^\]]*\]\s*)*(?:(?:Local|Global|Polymorphic|Monomorphic|Program|Private|Cumulative|NonCumulative)\s+)*"
)
_KEYWORD = re.compile(rb"([A-Z][A-Za-z]*)\b")
IDENT = re.compile(r"[^\W\d][\w']*")
RESERVED = frozenset(
    "as at cofix else end exists exists2 fix for forall fun if in let match mod "
    "return then using where with Prop Set Type SProp _".split()
)


class LexicalError(Exception):
    """Base class for tokenizer errors; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


class UnterminatedComment(LexicalError):
    pass


class UnterminatedString(LexicalError):
    pass


class NoFilesMatched(Exception):
    pass


@dataclass(frozen=True)
class TheoremRecord:
    id: str
    name: str
    kind: str
    statement_text: str
    proof_sentences: tuple[str, ...]
    file_path: str
    decl_offset: int
    proof_end_offset: int
    preceding_span: tuple[int, int]
    proved: bool = True

    @property
    def project(self) -> str:
        return self.id.split("/", 1)[0]

    def to_json(self) -> dict:
        d = asdict(self)
        d["record"] = "theorem"
        d["proof_sentences"] = list(self.proof_sentences)
        d["preceding_span"] = list(self.preceding_span)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TheoremRecord":
        d = {k: v for k, v in d.items() if k != "record"}
        d["proof_sentences"] = tuple(d["proof_sentences"])
        d["preceding_span"] = tuple(d["preceding_span"])
        return cls(**d)


@dataclass(frozen=True)
class DefinitionRecord:
    name: str
    kind: str
    body_text: str
    file_path: str
    offset: int
    referenced_names: tuple[str, ...] = ()

    def to_json(self) -> dict:
        d = asdict(self)
        d["record"] = "definition"
        d["referenced_names"] = list(self.referenced_names)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DefinitionRecord":
        d = {k: v for k, v in d.items() if k != "record"}
        d["referenced_names"] = tuple(d["referenced_names"])
        return cls(**d)


@dataclass
class CorpusIndex:
    project: str
    root: Path
    files: list[str]
    theorems: list[TheoremRecord]
    definitions: list[DefinitionRecord]
    name_map: dict[str, DefinitionRecord] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)
    _sources: dict[str, bytes] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.name_map:
            for d in self.definitions:
                if d.name in self.name_map:
                    self.warnings.append(f"{d.file_path}:{d.offset}: {d.name} shadows an earlier definition")
                self.name_map[d.name] = d

    @property
    def proved_theorems(self) -> list[TheoremRecord]:
        return [t for t in self.theorems if t.proved]

    def theorem(self, theorem_id: str) -> TheoremRecord:
        for t in self.theorems:
            if t.id == theorem_id:
                return t
        raise KeyError(theorem_id)

    def source_bytes(self, file_path: str) -> bytes:
        if file_path not in self._sources:
            self._sources[file_path] = (self.root / file_path).read_bytes()
        return self._sources[file_path]

    def preceding_text(self, thm: TheoremRecord) -> str:
        start, end = thm.preceding_span
        return self.source_bytes(thm.file_path)[start:end].decode("utf-8")

    def file_rank(self, file_path: str) -> int:
        return self.files.index(file_path)

    def position(self, d: DefinitionRecord) -> tuple[int, int]:
        return (self.file_rank(d.file_path), d.offset)

    def names_in_scope(self, thm: TheoremRecord) -> set[str]:
        """Names declared before ``thm``: same file earlier, or any earlier file."""
        rank = self.file_rank(thm.file_path)
        out = set()
        for rec in [*self.definitions, *self.theorems]:
            off = rec.offset if isinstance(rec, DefinitionRecord) else rec.decl_offset
            r = self.file_rank(rec.file_path)
            if r < rank or (r == rank and off < thm.decl_offset):
                out.add(rec.name)
        return out

    def write_jsonl(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for t in self.theorems:
                f.write(json.dumps(t.to_json(), ensure_ascii=False) + "\n")
            for d in self.definitions:
                f.write(json.dumps(d.to_json(), ensure_ascii=False) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | os.PathLike, project: str, root: str | os.PathLike,
                   files: Sequence[str]) -> "CorpusIndex":
        theorems, definitions = [], []
        with open(path, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                d = json.loads(line)
                if d.get("record") == "theorem":
                    theorems.append(TheoremRecord.from_json(d))
                else:
                    definitions.append(DefinitionRecord.from_json(d))
        return cls(project, Path(root), list(files), theorems, definitions)


# -- tokenizer -------------------------------------------------------------

def _skip_string(src: bytes, i: int) -> int:
    """``i`` points at an opening quote; return the index after the closing one."""
    start = i
    i += 1
    n = len(src)
    while i < n:
        if src[i] == 0x22:  # "
            if i + 1 < n and src[i + 1] == 0x22:  # "" escape
                i += 2
                continue
            return i + 1
        i += 1
    raise UnterminatedString("unterminated string literal", start)


def _skip_comment(src: bytes, i: int) -> int:
    """``i`` points at ``(*``; return the index after the matching ``*)``."""
    start = i
    depth = 0
    n = len(src)
    while i < n:
        if src.startswith(b"(*", i):
            depth += 1
            i += 2
        elif src.startswith(b"*)", i):
            depth -= 1
            i += 2
            if depth == 0:
                return i
        elif src[i] == 0x22:
            i = _skip_string(src, i)
        else:
            i += 1
    raise UnterminatedComment("unterminated comment", start)


def _split_bytes(src: bytes) -> list[tuple[int, int]]:
    ranges = []
    n = len(src)
    i = 0
    while i < n:
        # Skip whitespace and comments between sentences.
        c = src[i]
        if c in b" \t\r\n\f\v":
            i += 1
            continue
        if src.startswith(b"(*", i):
            i = _skip_comment(src, i)
            continue
        start = i
        while i < n:
            c = src[i]
            if src.startswith(b"(*", i):
                i = _skip_comment(src, i)
            elif c == 0x22:
                i = _skip_string(src, i)
            elif c == 0x2E and (i + 1 == n or src[i + 1] in b" \t\r\n\f\v"):
                i += 1
                break
            else:
                i += 1
        ranges.append((start, i))
    return ranges


def split_sentences(source_text: str) -> list[tuple[str, tuple[int, int]]]:
    """Split Rocq source into sentences with byte ranges.

    Leading bullets and braces are part of the sentence they precede; ranges
    exclude the whitespace and comments between sentences.  A trailing
    fragment with no terminating period is returned as a final sentence.
    """
    src = source_text.encode("utf-8")
    return [(src[a:b].decode("utf-8"), (a, b)) for a, b in _split_bytes(src)]


def sentence_core(sentence: str) -> str:
    """The sentence with leading bullets, braces and comments removed."""
    s = strip_comments(sentence).lstrip()
    while s and s[0] in "-+*{}":
        s = s[1:].lstrip()
    return s


def strip_comments(text: str) -> str:
    src = text.encode("utf-8")
    out = bytearray()
    i, n = 0, len(src)
    while i < n:
        if src.startswith(b"(*", i):
            try:
                i = _skip_comment(src, i)
            except UnterminatedComment:
                break
            out += b" "
        elif src[i] == 0x22:
            try:
                j = _skip_string(src, i)
            except UnterminatedString:
                j = n
            out += src[i:j]
            i = j
        else:
            out.append(src[i])
            i += 1
    return out.decode("utf-8", errors="replace")


def identifiers(text: str) -> list[str]:
    """Identifier tokens of ``text`` in order; comments and strings removed,
    qualified names split on '.'."""
    plain = re.sub(r'"(?:[^"]|"")*"', " ", strip_comments(text))
    return IDENT.findall(plain)


def is_terminator(sentence: str) -> bool:
    return sentence_core(sentence) in PROOF_TERMINATORS


def _is_proof_opener(sentence: str) -> bool:
    core = sentence_core(sentence)
    return core == "Proof." or core.startswith(("Proof ", "Proof\n", "Proof\t"))


def _keyword_of(sentence_bytes: bytes) -> tuple[str | None, int]:
    """(keyword, byte offset of keyword within the sentence)."""
    m = _ATTR_PREFIX.match(sentence_bytes)
    pos = m.end() if m else 0
    k = _KEYWORD.match(sentence_bytes, pos)
    if not k:
        return None, 0
    return k.group(1).decode(), pos


_DEF_NAME = re.compile(r"\s*([^\W\d][\w'.]*)")


def _declared_names(kind: str, keyword: str, body: str) -> list[str]:
    rest = strip_comments(body)[len(keyword):]
    if kind == "Notation":
        m = re.match(r'\s*"((?:[^"]|"")*)"', rest)
        if m:
            return [m.group(1)]
        m = _DEF_NAME.match(rest)
        return [m.group(1)] if m else []
    if kind in ("Variable", "Hypothesis", "Axiom"):
        if rest.lstrip().startswith(("(", "{", "`")):
            names = []
            for grp in re.findall(r"[({]\s*([^():{}]*?)\s*:", rest):
                names += IDENT.findall(grp)
            return names
        return IDENT.findall(rest.split(":", 1)[0])
    if kind == "Instance":
        m = _DEF_NAME.match(rest)
        if not m or rest.lstrip().startswith(":"):
            return []
        return [m.group(1)]
    m = _DEF_NAME.match(rest)
    names = [m.group(1)] if m else []
    if kind in ("Inductive", "Fixpoint", "CoFixpoint"):
        # Mutual blocks: "... with name ..."
        names += re.findall(r"\bwith\s+([^\W\d][\w']*)", rest)
    return names


def _has_body(sentence: str) -> bool:
    return ":=" in strip_comments(sentence)


@dataclass
class _FileScan:
    theorems: list[TheoremRecord]
    definitions: list[DefinitionRecord]
    warnings: list[str]


def scan_file(project: str, rel_path: str, data: bytes) -> _FileScan:
    """Index one file.  Raises LexicalError on malformed input."""
    ranges = _split_bytes(data)
    sentences = [data[a:b] for a, b in ranges]
    theorems: list[TheoremRecord] = []
    definitions: list[DefinitionRecord] = []
    warnings: list[str] = []
    i = 0
    while i < len(ranges):
        raw = sentences[i]
        keyword, kw_off = _keyword_of(raw)
        text = raw.decode("utf-8")
        nxt = sentences[i + 1].decode("utf-8") if i + 1 < len(ranges) else ""
        if keyword in THEOREM_KINDS:
            opens_proof = _is_proof_opener(nxt) or not _has_body(text)
            if not opens_proof:
                i += 1
                continue
            j = i + 1
            while j < len(ranges):
                core = sentence_core(sentences[j].decode("utf-8"))
                if core in PROOF_TERMINATORS or core in _ABORT:
                    break
                j += 1
            if j == len(ranges):
                warnings.append(f"{rel_path}: proof of sentence at byte {ranges[i][0]} never closed")
                break
            end_core = sentence_core(sentences[j].decode("utf-8"))
            decl = ranges[i][0] + kw_off
            stmt = data[decl:ranges[i][1]].decode("utf-8")
            names = _declared_names("Theorem", keyword, stmt)
            if end_core in _ABORT or not names:
                i = j + 1
                continue
            name = names[0]
            proof = tuple(sentences[k].decode("utf-8") for k in range(i + 1, j + 1))
            theorems.append(TheoremRecord(
                id=f"{project}/{rel_path}/{name}",
                name=name,
                kind=keyword,
                statement_text=stmt,
                proof_sentences=proof,
                file_path=rel_path,
                decl_offset=decl,
                proof_end_offset=ranges[j][1],
                preceding_span=(0, decl),
                proved=end_core != "Admitted.",
            ))
            i = j + 1
            continue
        if keyword in _DEF_ALIASES or keyword == "Context":
            kind = _DEF_ALIASES.get(keyword)
            if kind is None:
                # Context binders are section plumbing, not indexed definitions.
                i += 1
                continue
            off = ranges[i][0] + kw_off
            body = data[off:ranges[i][1]].decode("utf-8")
            names = _declared_names(kind, keyword, body)
            own = set(names)
            refs = tuple(dict.fromkeys(
                n for n in identifiers(body[len(keyword):]) if n not in own and n not in RESERVED))
            for name in names:
                definitions.append(DefinitionRecord(name, kind, body, rel_path, off, refs))
            # Interactive definitions ("Definition f : T. Proof. ... Defined.").
            interactive = _is_proof_opener(nxt) or (
                kind in ("Definition", "Instance", "Fixpoint", "CoFixpoint") and not _has_body(text)
                and keyword not in ("Variable", "Variables")
            )
            if interactive:
                j = i + 1
                while j < len(ranges) and sentence_core(sentences[j].decode("utf-8")) not in (*PROOF_TERMINATORS, *_ABORT):
                    j += 1
                i = j + 1
                continue
        i += 1
    return _FileScan(theorems, definitions, warnings)


def _coqproject_order(root: Path) -> list[str]:
    cp = root / "_CoqProject"
    if not cp.exists():
        return []
    out = []
    for line in cp.read_text(encoding="utf-8").splitlines():
        for tok in line.split():
            if tok.endswith(".v"):
                out.append(os.path.normpath(tok).replace(os.sep, "/"))
    return out


def scan_project(root: str | os.PathLike, include_globs: Sequence[str] = ("**/*.v",),
                 project: str | None = None, include_admitted: bool = True,
                 max_theorems: int | None = None, sample_seed: int = 0,
                 jobs: int = 1) -> CorpusIndex:
    """Scan a project tree into a CorpusIndex.

    ``max_theorems`` keeps a seeded uniform sample of the proved theorems
    (used for large projects); unproved records are kept unless
    ``include_admitted`` is false.
    """
    root = Path(root)
    if not root.is_dir():
        raise NoFilesMatched(f"{root} is not a directory")
    project = project or root.name
    found = set()
    for p in root.rglob("*.v"):
        rel = p.relative_to(root).as_posix()
        if any(fnmatch.fnmatch(rel, g) or (g.startswith("**/") and fnmatch.fnmatch(rel, g[3:]))
               for g in include_globs):
            found.add(rel)
    if not found:
        raise NoFilesMatched(f"no .v files under {root} match {list(include_globs)}")
    ordered = [f for f in _coqproject_order(root) if f in found]
    files = ordered + sorted(found - set(ordered))

    def work(rel):
        try:
            return rel, scan_file(project, rel, (root / rel).read_bytes()), None
        except LexicalError as e:
            return rel, None, str(e)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(work, files))

    theorems, definitions, warnings, errors = [], [], [], {}
    kept_files = []
    for rel, res, err in results:
        if err is not None:
            log.warning("skipping %s: %s", rel, err)
            errors[rel] = err
            continue
        kept_files.append(rel)
        theorems += res.theorems
        definitions += res.definitions
        warnings += res.warnings
    seen = set()
    for t in theorems:
        if t.id in seen:
            warnings.append(f"duplicate theorem id {t.id}; later occurrence dropped")
        seen.add(t.id)
    theorems = list({t.id: t for t in reversed(theorems)}.values())[::-1]
    if not include_admitted:
        theorems = [t for t in theorems if t.proved]
    if max_theorems is not None:
        proved = [t for t in theorems if t.proved]
        if len(proved) > max_theorems:
            keep = {t.id for t in random.Random(sample_seed).sample(proved, max_theorems)}
            theorems = [t for t in theorems if not t.proved or t.id in keep]
    index = CorpusIndex(project, root, kept_files, theorems, definitions)
    index.warnings[:0] = warnings
    index.errors = errors
    return index


def count_tactics(record: TheoremRecord) -> int:
    """Number of proof sentences between the opener and the closing sentence."""
    body = list(record.proof_sentences)
    if body and is_terminator(body[-1]):
        body = body[:-1]
    if body and _is_proof_opener(body[0]):
        body = body[1:]
    return len(body)


def iter_corpus_text(index: CorpusIndex) -> Iterable[tuple[str, str]]:
    for f in index.files:
        yield f, index.source_bytes(f).decode("utf-8")
