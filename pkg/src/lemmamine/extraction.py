"""Two-stage strategy extraction: NL proof, then formalized lemmas."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, replace

from .corpus import (LexicalError, THEOREM_KINDS, CorpusIndex, TheoremRecord, sentence_core,
                     split_sentences, strip_comments)
from .gateway import ChatMessage, ChatTranscript, Gateway, GenerationParams
from .retrieval import ContextBundle, collect_context

log = logging.getLogger(__name__)

ROLE_LINE = "You are an expert at Rocq theorem proving."
TASK_LINE = ("Please analyze the given theorem step by step. "
             "Below, we further provide some helper informations.")
CLOSING_LINE = "Finally, The given theorem is:"
TRUNCATED_MARKER = "(truncated)"

FORMALIZE_PROMPT = """Based on the analysis above, do the following tasks one by one:

[Task 1]
Summarize the proof steps mentioned in the analysis as general lemmas.

[Task 2]
Formalize each lemma in Rocq, and provide the proof for each lemma.

[Task 3]
Return a Rocq script that includes all the formalized lemmas and proofs."""

LEMMA_KEYWORDS = ("Lemma", "Theorem", "Corollary", "Fact")
_LEMMA_HEAD = re.compile(r"^(?:#\[[^\]]*\]\s*)*(?:(?:Local|Global)\s+)?(%s)\s+([^\W\d][\w']*)" % "|".join(LEMMA_KEYWORDS))
_FENCE = re.compile(r"^[ \t]*(```|~~~)[^\n]*\n(.*?)^[ \t]*\1[ \t]*$", re.M | re.S)
_ENUM_ITEM = re.compile(r"^[ \t]*(?:\*\*)?\d+\s*[.)]", re.M)
_REFUSAL = re.compile(
    r"cannot (?:be )?prove|can't prove|cannot be proved|unable to prove|is not provable|"
    r"not possible to prove|impossible to prove|cannot derive|we cannot", re.I)


@dataclass(frozen=True)
class NlProof:
    text: str
    steps: tuple[str, ...]
    source_theorem_id: str
    refusal: bool = False


@dataclass(frozen=True)
class CandidateLemma:
    name: str
    statement: str
    proof: str
    shared_preamble: str
    source_theorem_id: str
    ordinal: int

    @property
    def script(self) -> str:
        return f"{self.statement}\n{self.proof}"


class ParseResult(list):
    """A list of candidates that also carries the parser's warnings."""

    def __init__(self, items=(), warnings=None):
        list.__init__(self, items)
        self.warnings = list(warnings or [])


# -- stage 1 -----------------------------------------------------------------

def build_nl_proof_prompt(bundle: ContextBundle, statement: str) -> ChatTranscript:
    if not statement.strip():
        raise ValueError("statement must be non-empty")
    script = bundle.script_so_far
    if bundle.truncated:
        script = f"{TRUNCATED_MARKER}\n{script}"
    system = "\n\n".join([
        f"{ROLE_LINE} {TASK_LINE}",
        "[Type Definitions]\n" + "\n\n".join(bundle.type_definitions),
        "[Function Definitions]\n" + "\n\n".join(bundle.function_definitions),
        "[Script So Far]\n" + script,
        CLOSING_LINE,
    ])
    return ChatTranscript(
        (ChatMessage("system", system), ChatMessage("user", f"[Theorem Statement]\n{statement}")),
        {1: "nl_proof"},
    )


def _enumerated_steps(text: str) -> list[str]:
    starts = [m.start() for m in _ENUM_ITEM.finditer(text)]
    steps = []
    for a, b in zip(starts, starts[1:] + [len(text)]):
        chunk = text[a:b].strip()
        if chunk:
            steps.append(chunk)
    return steps


def _paragraphs(text: str) -> list[str]:
    return [p.strip() for p in re.split(r"\n[ \t]*\n", text) if p.strip()]


def is_refusal(text: str) -> bool:
    return bool(_REFUSAL.search(text))


def make_nl_proof(text: str, source_theorem_id: str) -> NlProof:
    steps = _enumerated_steps(text)
    refusal = is_refusal(text)
    if not steps and not refusal:
        steps = _paragraphs(text)
    return NlProof(text, tuple(steps), source_theorem_id, refusal)


def count_nl_steps(proof: NlProof | str) -> int:
    """Enumerated items if any; else paragraphs; refusals without items count 0."""
    if isinstance(proof, str):
        proof = make_nl_proof(proof, "")
    return len(proof.steps)


# -- stage 2 -----------------------------------------------------------------

def build_formalize_prompt(history: ChatTranscript) -> ChatTranscript:
    if history.last.role != "assistant":
        raise ValueError("history must end with the stage-1 assistant reply")
    return history.extend(ChatMessage("user", FORMALIZE_PROMPT), stage="formalize")


def last_code_block(response: str) -> str | None:
    blocks = [m.group(2) for m in _FENCE.finditer(response)]
    return blocks[-1] if blocks else None


def parse_lemma_script(response: str, source_theorem_id: str) -> ParseResult:
    """Candidates from the last fenced block of ``response`` (or all of it)."""
    warnings: list[str] = []
    block = last_code_block(response)
    if block is None:
        block = response
    try:
        sentences = split_sentences(block)
    except LexicalError as e:
        log.warning("%s: unparsable script: %s", source_theorem_id, e)
        return ParseResult([], [f"unparsable script: {e}"])

    preamble: list[str] = []
    raw: list[tuple[int, str, str, list[str]]] = []
    current = None
    for idx, (text, rng) in enumerate(sentences):
        core = sentence_core(text)
        head = _LEMMA_HEAD.match(strip_comments(text).lstrip())
        if current is not None:
            if head:
                warnings.append(f"lemma {current[2]!r} has no closing Qed/Defined/Admitted; dropped")
                current = None
            else:
                current[3].append(rng)
                if core in ("Qed.", "Defined.", "Admitted."):
                    raw.append(tuple(current))
                    current = None
                continue
        if head:
            if strip_comments(text).rstrip()[-1:] != ".":
                warnings.append(f"unterminated statement at sentence {idx}; dropped")
                continue
            current = [idx, text, head.group(2), []]
            continue
        if re.match(r"End\s", core) or core.startswith(("Proof", "Qed.", "Defined.")):
            continue
        preamble.append(text)
    if current is not None:
        warnings.append(f"lemma {current[2]!r} has no closing Qed/Defined/Admitted; dropped")
    if not raw:
        warnings.append("no lemma found in response")

    shared = "\n".join(preamble)
    data = block.encode("utf-8")
    out = []
    for idx, stmt, name, proof in raw:
        text = data[proof[0][0]:proof[-1][1]].decode("utf-8")
        out.append(CandidateLemma(name, stmt, text, shared, source_theorem_id, idx))
    for w in warnings:
        log.warning("%s: %s", source_theorem_id, w)
    return ParseResult(out, warnings)


def normalize_statement(statement: str) -> str:
    """Keyword and name dropped, comments removed, tokens joined by single spaces."""
    s = strip_comments(statement).strip()
    s = re.sub(r"^(?:#\[[^\]]*\]\s*)*(?:(?:Local|Global)\s+)?(?:%s)\s+[^\W\d][\w']*" % "|".join(THEOREM_KINDS), "", s)
    toks = re.findall(r"[\w'.]+(?<!\.)|[^\w\s]+", s.rstrip().rstrip("."))
    return " ".join(toks)


# -- pipeline ---------------------------------------------------------------

@dataclass
class ExtractionConfig:
    extraction_params: GenerationParams
    agent_params: GenerationParams
    gateway: Gateway
    checker: object = None           # agent.Checker
    round_limit: int = 8
    context_budget: int = 32000
    depth_limit: int = 3
    checker_timeout: float = 60.0
    imports: str = ""
    backend_model: str | None = None
    sandbox_root: str | None = None


@dataclass
class Telemetry:
    id: str
    nl_steps: int = 0
    candidates: int = 0
    verified: int = 0
    rounds_total: int = 0
    refusal: bool = False
    dropped_restatements: int = 0
    error: str | None = None

    def to_json(self) -> dict:
        return {"id": self.id, "nl_steps": self.nl_steps, "candidates": self.candidates,
                "verified": self.verified, "rounds_total": self.rounds_total,
                "refusal": self.refusal, "dropped_restatements": self.dropped_restatements,
                "error": self.error}


class ExtractionResult(list):
    """Verified lemmas for one theorem, with telemetry and the stage-2 transcript."""

    def __init__(self, items=(), telemetry=None, stage2=None):
        list.__init__(self, items)
        self.telemetry = telemetry
        self.stage2 = stage2


def extract_for_theorem(thm: TheoremRecord, index: CorpusIndex, cfg: ExtractionConfig) -> ExtractionResult:
    """Retrieve context, run both chat stages, parse, and verify each candidate."""
    from .agent import AgentDeps, ScriptFixer, run_agent

    tele = Telemetry(thm.id)
    bundle = collect_context(thm, index, cfg.context_budget, cfg.depth_limit)
    stage1 = build_nl_proof_prompt(bundle, thm.statement_text)
    reply = cfg.gateway.chat(stage1, cfg.extraction_params)
    nl = make_nl_proof(reply.content, thm.id)
    tele.nl_steps = count_nl_steps(nl)
    history = stage1.extend(reply, stage="nl_proof")
    if nl.refusal and not _enumerated_steps(nl.text):
        tele.refusal = True
        return ExtractionResult([], tele, None)
    stage2 = build_formalize_prompt(history)
    formal = cfg.gateway.chat(stage2, cfg.extraction_params)
    stage2 = stage2.extend(formal, stage="formalize")
    candidates = parse_lemma_script(formal.content, thm.id)
    target = normalize_statement(thm.statement_text)
    kept = [c for c in candidates if normalize_statement(c.statement) != target]
    tele.dropped_restatements = len(candidates) - len(kept)
    tele.candidates = len(kept)

    deps = AgentDeps(
        checker=cfg.checker,
        fixer=ScriptFixer(cfg.gateway, cfg.agent_params),
        context=index.preceding_text(thm),
        imports=cfg.imports,
        timeout=cfg.checker_timeout,
        source_project=index.project,
        backend_model=cfg.backend_model or cfg.extraction_params.model_id,
        sandbox_root=cfg.sandbox_root,
    )
    verified = []
    for cand in kept:
        res = run_agent(cand, cfg.round_limit, deps)
        tele.rounds_total += res.checks
        if res.lemma is not None:
            verified.append(replace(res.lemma, source_theorem_id=thm.id))
    tele.verified = len(verified)
    return ExtractionResult(verified, tele, stage2)
