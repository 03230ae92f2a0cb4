"""Background context for a theorem: referenced definitions plus the script so far."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .corpus import CorpusIndex, DefinitionRecord, TheoremRecord, identifiers

log = logging.getLogger(__name__)

TYPE_KINDS = frozenset({"Inductive", "Record", "Class", "Variable", "Hypothesis", "Axiom"})
FUNCTION_KINDS = frozenset({"Fixpoint", "CoFixpoint", "Definition", "Instance", "Notation"})

DEFAULT_DEPTH = 3


class BudgetTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class ContextBundle:
    type_definitions: tuple[str, ...] = ()
    function_definitions: tuple[str, ...] = ()
    script_so_far: str = ""
    token_estimate: int = 0
    truncated: bool = False
    # Names of the definitions included, parallel to the two text lists.
    type_names: tuple[str, ...] = field(default=(), compare=False)
    function_names: tuple[str, ...] = field(default=(), compare=False)


def estimate_tokens(text: str) -> int:
    """Provider-independent estimate: one token per four UTF-8 bytes, rounded up."""
    return -(-len(text.encode("utf-8")) // 4)


def resolve_dependencies(names, index: CorpusIndex, depth_limit: int = DEFAULT_DEPTH) -> list[DefinitionRecord]:
    """Transitive closure of name lookups, ordered dependencies first.

    Seeds sit at depth 0; names referenced by a depth-``d`` definition are
    followed while ``d < depth_limit``.  Records declared in one sentence
    (mutual inductives, ``Variables a b``) are pulled in together.
    """
    if depth_limit < 0:
        raise ValueError("depth_limit must be >= 0")
    groups: dict[tuple[str, int], list[DefinitionRecord]] = {}
    for d in index.definitions:
        groups.setdefault((d.file_path, d.offset), []).append(d)

    chosen: dict[tuple[str, int], DefinitionRecord] = {}
    frontier = list(dict.fromkeys(names))
    depth = 0
    while frontier:
        nxt = []
        for name in frontier:
            rec = index.name_map.get(name)
            if rec is None:
                if depth == 0:
                    log.warning("unknown name %r skipped", name)
                continue
            for member in groups[(rec.file_path, rec.offset)]:
                key = (member.file_path, member.offset, member.name)
                if key in chosen:
                    continue
                chosen[key] = member
                if depth < depth_limit:
                    nxt += member.referenced_names
        frontier = [n for n in dict.fromkeys(nxt)]
        depth += 1
        if depth > depth_limit:
            break
    # Rocq only lets a definition use what precedes it, so source position is
    # a topological order over genuine dependencies.
    return sorted(chosen.values(), key=lambda d: (*index.position(d), d.name))


def _render(types, funcs, script, statement) -> str:
    return "\n".join([*types, *funcs, script, statement])


def _prune(statement: str, recs: list[DefinitionRecord]) -> list[DefinitionRecord]:
    """Keep only records whose name is reachable from the statement via kept records."""
    reach = set(identifiers(statement))
    kept: list[DefinitionRecord] = []
    changed = True
    pending = list(recs)
    while changed:
        changed = False
        for r in list(pending):
            if r.name in reach:
                kept.append(r)
                pending.remove(r)
                reach.update(r.referenced_names)
                changed = True
    return [r for r in recs if r in kept]


def collect_context(thm: TheoremRecord, index: CorpusIndex, budget: int,
                    depth_limit: int = DEFAULT_DEPTH) -> ContextBundle:
    if budget <= 0:
        raise ValueError("budget must be positive")
    statement = thm.statement_text
    if estimate_tokens(statement) > budget:
        raise BudgetTooSmall(f"{thm.id}: statement alone needs {estimate_tokens(statement)} tokens > {budget}")
    seeds = [n for n in dict.fromkeys(identifiers(statement)) if n in index.name_map]
    recs = resolve_dependencies(seeds, index, depth_limit)
    types = [r for r in recs if r.kind in TYPE_KINDS]
    funcs = [r for r in recs if r.kind in FUNCTION_KINDS]
    prefix = index.preceding_text(thm)

    def texts(rs):
        return list(dict.fromkeys(r.body_text for r in rs))

    def cost(ts, fs, script):
        return estimate_tokens(_render(texts(ts), texts(fs), script, statement))

    truncated = False
    script = prefix
    if cost(types, funcs, script) > budget:
        truncated = True
        # Longest suffix of the prefix that fits.
        lo, hi = 0, len(prefix)
        while lo < hi:
            mid = (lo + hi) // 2
            if cost(types, funcs, prefix[len(prefix) - mid:] if mid else "") <= budget:
                lo = mid + 1
            else:
                hi = mid
        keep = lo - 1
        script = prefix[len(prefix) - keep:] if keep > 0 else ""
        if keep <= 0 and cost(types, funcs, "") > budget:
            script = ""
            while funcs and cost(types, funcs, "") > budget:
                funcs.pop()
            while types and cost(types, funcs, "") > budget:
                types.pop()
            kept = set(map(id, _prune(statement, types + funcs)))
            types = [r for r in types if id(r) in kept]
            funcs = [r for r in funcs if id(r) in kept]
    if not truncated:
        assert cost(types, funcs, script) <= budget
    return ContextBundle(
        type_definitions=tuple(texts(types)),
        function_definitions=tuple(texts(funcs)),
        script_so_far=script,
        token_estimate=cost(types, funcs, script),
        truncated=truncated,
        type_names=tuple(r.name for r in types),
        function_names=tuple(r.name for r in funcs),
    )
