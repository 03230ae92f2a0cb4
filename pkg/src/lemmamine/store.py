"""Verified lemmas with provenance, textual dedup and fold-aware queries."""
from __future__ import annotations

import hashlib
import json
import os
import re
import threading
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Iterator

from .corpus import CorpusIndex, strip_comments
from .extraction import normalize_statement


class PersistFailure(Exception):
    pass


class UnknownSourceTheorem(KeyError):
    pass


def statement_hash(statement: str) -> str:
    return hashlib.sha256(normalize_statement(statement).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ProvenanceLink:
    source_theorem_id: str
    source_project: str
    backend_model: str
    name: str


@dataclass(frozen=True)
class VerifiedLemma:
    id: str
    name: str
    statement: str
    proof: str
    shared_preamble: str
    source_theorem_id: str
    source_project: str
    backend_model: str
    rounds_used: int
    normalized_hash: str
    # Further derivations of the same normalized statement.
    provenance: tuple[ProvenanceLink, ...] = ()

    @classmethod
    def create(cls, name, statement, proof, shared_preamble, source_theorem_id,
               source_project, backend_model, rounds_used) -> "VerifiedLemma":
        h = statement_hash(statement)
        return cls(h[:16], name, statement, proof, shared_preamble, source_theorem_id,
                   source_project, backend_model, rounds_used, h)

    @property
    def sources(self) -> list[ProvenanceLink]:
        own = ProvenanceLink(self.source_theorem_id, self.source_project, self.backend_model, self.name)
        return [own, *self.provenance]

    @property
    def backend_models(self) -> list[str]:
        return list(dict.fromkeys(p.backend_model for p in self.sources))

    def to_json(self) -> dict:
        d = asdict(self)
        d["provenance"] = [asdict(p) for p in self.provenance]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "VerifiedLemma":
        d = dict(d)
        d["provenance"] = tuple(ProvenanceLink(**p) for p in d.get("provenance", ()))
        return cls(**d)


class LemmaStore:
    """In-memory store, optionally backed by an append-only JSON Lines file.

    Every change appends the full current record for its id; on load the
    last line per id wins, so a crash mid-run loses at most one line.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = path
        self._by_hash: dict[str, VerifiedLemma] = {}
        self._lock = threading.Lock()
        if path is not None and os.path.exists(path):
            with open(path, encoding="utf-8") as f:
                for line in f:
                    if line.strip():
                        lem = VerifiedLemma.from_json(json.loads(line))
                        self._by_hash[lem.normalized_hash] = lem

    def __len__(self) -> int:
        return len(self._by_hash)

    def __iter__(self) -> Iterator[VerifiedLemma]:
        return iter(list(self._by_hash.values()))

    def __contains__(self, lemma: VerifiedLemma) -> bool:
        return lemma.normalized_hash in self._by_hash

    def _append(self, lemma: VerifiedLemma) -> None:
        if self.path is None:
            return
        try:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(lemma.to_json(), ensure_ascii=False) + "\n")
                f.flush()
        except OSError as e:
            raise PersistFailure(str(e)) from e

    def add(self, lemma: VerifiedLemma) -> str:
        with self._lock:
            old = self._by_hash.get(lemma.normalized_hash)
            if old is None:
                self._by_hash[lemma.normalized_hash] = lemma
                self._append(lemma)
                return "added"
            known = set(old.sources)
            new_links = tuple(p for p in lemma.sources if p not in known)
            if new_links:
                merged = replace(old, provenance=old.provenance + new_links)
                self._by_hash[lemma.normalized_hash] = merged
                self._append(merged)
            return "duplicate"

    def save(self, path: str | os.PathLike) -> None:
        """Write a compacted copy, one record per line."""
        try:
            with open(path, "w", encoding="utf-8") as f:
                for lem in self._by_hash.values():
                    f.write(json.dumps(lem.to_json(), ensure_ascii=False) + "\n")
        except OSError as e:
            raise PersistFailure(str(e)) from e

    @classmethod
    def load(cls, path: str | os.PathLike) -> "LemmaStore":
        st = cls()
        with open(path, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    lem = VerifiedLemma.from_json(json.loads(line))
                    st._by_hash[lem.normalized_hash] = lem
        return st

    def extend(self, lemmas: Iterable[VerifiedLemma]) -> None:
        for lem in lemmas:
            self.add(lem)


def query_training(store: Iterable[VerifiedLemma], plan, test_fold: int) -> list[VerifiedLemma]:
    """Lemmas derived from at least one theorem outside ``test_fold``.

    A deduplicated lemma whose primary source is in the test fold is
    returned re-attributed to one of its training-fold derivations.
    """
    if not 0 <= test_fold < plan.k:
        raise ValueError(f"test_fold {test_fold} outside [0, {plan.k})")
    out = []
    for lem in store:
        training = []
        for p in lem.sources:
            if p.source_theorem_id not in plan.assignment:
                raise UnknownSourceTheorem(p.source_theorem_id)
            if plan.assignment[p.source_theorem_id] != test_fold:
                training.append(p)
        if not training:
            continue
        if training[0].source_theorem_id != lem.source_theorem_id:
            p = training[0]
            lem = replace(lem, source_theorem_id=p.source_theorem_id, source_project=p.source_project,
                          backend_model=p.backend_model)
        out.append(lem)
    return out


def union_stores(a: LemmaStore, b: LemmaStore) -> LemmaStore:
    out = LemmaStore()
    out.extend(a)
    out.extend(b)
    return out


# -- redundancy -----------------------------------------------------------------

_TOKEN = re.compile(r"[\w'.]+(?<!\.)|[()]|[^\w\s()]+")


def _tokens(text: str) -> list[str]:
    return ["0" if t == "O" else t for t in _TOKEN.findall(text)]


def _strip_parens(toks: list[str]) -> list[str]:
    while len(toks) >= 2 and toks[0] == "(" and toks[-1] == ")" and _closing(toks, 0) == len(toks) - 1:
        toks = toks[1:-1]
    return toks


def _closing(toks: list[str], i: int) -> int:
    depth = 0
    for j in range(i, len(toks)):
        if toks[j] == "(":
            depth += 1
        elif toks[j] == ")":
            depth -= 1
            if depth == 0:
                return j
    return -1


def _atoms(toks: list[str]) -> list[list[str]] | None:
    """Split an application into its top-level arguments."""
    out, i = [], 0
    while i < len(toks):
        if toks[i] == "(":
            j = _closing(toks, i)
            if j < 0:
                return None
            out.append(_strip_parens(toks[i:j + 1]))
            i = j + 1
        elif toks[i] == ")":
            return None
        else:
            out.append([toks[i]])
            i += 1
    return out


def _subst(toks: list[str], sub: dict[str, list[str]]) -> list[str]:
    out = []
    for t in toks:
        if t in sub:
            rep = sub[t]
            out += rep if len(rep) == 1 else ["(", *rep, ")"]
        else:
            out.append(t)
    return out


def _equation(statement: str) -> tuple[list[str], list[str]] | None:
    body = normalize_statement(statement)
    if body.startswith(":"):
        body = body[1:]
    toks = _tokens(body)
    # Drop leading "forall binders ," prefixes.
    while toks and toks[0] == "forall":
        if "," not in toks:
            return None
        toks = toks[toks.index(",") + 1:]
    depth = 0
    for i, t in enumerate(toks):
        depth += t == "("
        depth -= t == ")"
        if t == "=" and depth == 0:
            return _strip_parens(toks[:i]), _strip_parens(toks[i + 1:])
    return None


def _params(header: list[str]) -> list[str]:
    """Binder names of a definition header (tokens between name and ':' / ':=')."""
    names, depth, i = [], 0, 0
    while i < len(header):
        t = header[i]
        if t in (":", ":=") and depth == 0:
            break
        if t in ("(", "{", "`{", "[") or t.endswith("{"):
            j = i + 1
            group = []
            while j < len(header) and header[j] not in (":", ")", "}"):
                group.append(header[j])
                j += 1
            if not header[i].endswith("{"):
                names += [g for g in group if re.match(r"[^\W\d]", g)]
            k = j
            d = 1
            while k < len(header) and d:
                k += 1
                if k < len(header) and header[k] in ("(", "{"):
                    d += 1
                elif k < len(header) and header[k] in (")", "}"):
                    d -= 1
            i = k + 1
            continue
        if re.match(r"[^\W\d]", t):
            names.append(t)
        i += 1
    return names


def _clauses(body_text: str) -> tuple[str, list[str], list[tuple[list[str], list[str] | None]]] | None:
    """(name, params, [(lhs-arg-pattern or None, rhs)]) for a simple definition."""
    text = strip_comments(body_text).strip().rstrip(".")
    m = re.match(r"(?:Program\s+)?(Fixpoint|Definition)\s+([^\W\d][\w']*)(.*?):=(.*)$", text, re.S)
    if not m:
        return None
    name, header, rhs = m.group(2), _tokens(m.group(3).replace("{", " { ").replace("}", " } ")), m.group(4)
    params = _params(header)
    rtoks = _tokens(rhs)
    if rtoks[:1] != ["match"]:
        return name, params, [(None, _strip_parens(rtoks))]
    try:
        w = rtoks.index("with")
        scrut = rtoks[1:w]
        end = len(rtoks) - 1 - rtoks[::-1].index("end")
    except ValueError:
        return None
    if len(scrut) != 1 or scrut[0] not in params:
        return None
    arms_toks = rtoks[w + 1:end]
    arms, cur, depth = [], [], 0
    for t in arms_toks:
        depth += t in ("(", "match")
        depth -= t in (")", "end")
        if t == "|" and depth == 0:
            if cur:
                arms.append(cur)
            cur = []
        else:
            cur.append(t)
    if cur:
        arms.append(cur)
    out = []
    for arm in arms:
        if "=>" not in arm:
            return None
        k = arm.index("=>")
        out.append((("@" + scrut[0], arm[:k]), _strip_parens(arm[k + 1:])))
    return name, params, out


def _matches_pattern(arg: list[str], pattern: list[str], sub: dict) -> bool:
    if len(arg) != len(pattern):
        return False
    for a, p in zip(arg, pattern):
        if re.match(r"[^\W\d]", p) and p[0].islower() and p not in ("S",):
            if p in sub and sub[p] != [a]:
                return False
            sub[p] = [a]
        elif a != p:
            return False
    return True


def flag_redundant(lemma, index: CorpusIndex) -> bool:
    """True iff the lemma restates one clause of a Fixpoint/Definition body."""
    eq = _equation(lemma.statement)
    if eq is None:
        return False
    lhs, rhs = eq
    atoms = _atoms(lhs)
    if not atoms or len(atoms[0]) != 1:
        return False
    head, args = atoms[0][0], atoms[1:]
    rec = index.name_map.get(head)
    if rec is None or rec.kind not in ("Fixpoint", "Definition"):
        return False
    parsed = _clauses(rec.body_text)
    if parsed is None:
        return False
    _, params, clauses = parsed
    if len(args) != len(params):
        return False
    target = _strip_parens(rhs)
    for pattern, body in clauses:
        sub: dict[str, list[str]] = {}
        ok = True
        for p, a in zip(params, args):
            if pattern is not None and pattern[0] == "@" + p:
                if not _matches_pattern(a, pattern[1], sub):
                    ok = False
                    break
            else:
                if len(a) != 1:
                    ok = False
                    break
                sub[p] = a
        if ok and _strip_parens(_subst(body, sub)) == target:
            return True
    return False
