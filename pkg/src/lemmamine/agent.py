"""Check / classify / fix loop around the Rocq checker."""
from __future__ import annotations

import enum
import logging
import os
import re
import shutil
import subprocess
import tempfile
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

from .corpus import LexicalError, sentence_core, split_sentences, strip_comments
from .extraction import CandidateLemma, parse_lemma_script
from .gateway import ChatMessage, ChatTranscript, Gateway, GenerationParams
from .store import VerifiedLemma

log = logging.getLogger(__name__)

TIMEOUT_MARKER = "[checker timeout]"


class CheckerNotFound(RuntimeError):
    pass


class SandboxIoError(RuntimeError):
    pass


@dataclass(frozen=True)
class CheckOutcome:
    status: str  # "success" | "failure"
    error_text: str | None = None
    location: tuple[int, int] | None = None
    timed_out: bool = False

    def __post_init__(self):
        if self.status not in ("success", "failure"):
            raise ValueError(self.status)
        if (self.error_text is not None) != (self.status == "failure"):
            raise ValueError("error_text must be present iff status is failure")

    @property
    def ok(self) -> bool:
        return self.status == "success"


class ErrorClass(enum.Enum):
    UndefinedReference = "UndefinedReference"
    SyntaxError = "SyntaxError"
    TacticFailure = "TacticFailure"
    UnfinishedProof = "UnfinishedProof"
    TypeMismatch = "TypeMismatch"
    CheckerTimeout = "CheckerTimeout"
    Other = "Other"


# First match wins.
_PATTERNS: list[tuple[ErrorClass, re.Pattern]] = [
    (ErrorClass.UndefinedReference, re.compile(
        r"was not found in the current environment|The reference \S+ was not found|"
        r"Unable to locate library|Cannot find (?:a physical path|library)|No such (?:hypothesis|goal|label)|"
        r"is not a (?:defined|known) (?:object|constant)|Unbound (?:value|reference)", re.I)),
    (ErrorClass.SyntaxError, re.compile(
        r"Syntax error|Lexer error|Syntax Error|Unknown interpretation for notation|"
        r"Unterminated (?:comment|string)|Invalid character", re.I)),
    (ErrorClass.TacticFailure, re.compile(
        r"Unable to unify|Impossible to unify|No applicable tactic|Tactic failure|"
        r"No matching clauses for match|Found no subterm matching|not an inductive product|"
        r"Cannot find witness|Omega can't solve|Cannot find any|The relation .* is not a declared|"
        r"(?:lia|nia|lra|psatz|congruence|auto|eauto|tauto|intuition|hammer|sauto) failed|"
        r"Unable to find an instance|Nothing to rewrite|Not an? (?:equality|inductive)|"
        r"In environment.*\n.*(?:Unable|Cannot)|Cannot (?:infer|apply)", re.I)),
    (ErrorClass.UnfinishedProof, re.compile(
        r"Attempt to save an incomplete proof|proof is not complete|There are pending proofs|"
        r"incomplete proof|remaining goals|Some unresolved existential|goals? (?:are|is) (?:still )?open|"
        r"ends with Admitted|Admitted proofs are not accepted|uses admit", re.I)),
    (ErrorClass.TypeMismatch, re.compile(
        r"has type .* while it is expected to have type|Illegal application|"
        r"The term .* has type|cannot be applied to the term|should be of type|"
        r"The type of .* should be|Type error|is expected to have type|Universe inconsistency", re.I | re.S)),
    (ErrorClass.CheckerTimeout, re.compile(re.escape(TIMEOUT_MARKER) + r"|Timeout!", re.I)),
]


def classify_error(error_text: str) -> ErrorClass:
    if not error_text:
        return ErrorClass.Other
    for cls, pat in _PATTERNS:
        if pat.search(error_text):
            return cls
    return ErrorClass.Other


_LOCATION = re.compile(r'File "[^"]*", line (\d+), characters (\d+)-\d+')
_MISSING = re.compile(r"The (?:reference|variable) (\S+) was not found|"
                      r"Unable to locate library (\S+)|No such \w+:? (\S+)")


def missing_name(error_text: str) -> str | None:
    m = _MISSING.search(error_text or "")
    if not m:
        return None
    return next(g for g in m.groups() if g).rstrip(".")


@dataclass
class Checker:
    """Runs ``coqc`` on a synthesized file.

    ``flags`` carries the project's logical-path options, e.g.
    ``["-Q", "/path/to/theories", "Toy"]``.
    """
    coqc: str = "coqc"
    flags: Sequence[str] = ()

    def executable(self) -> str:
        exe = shutil.which(self.coqc)
        if exe is None:
            raise CheckerNotFound(f"Rocq checker {self.coqc!r} not found on PATH")
        return exe

    def run(self, file_text: str, sandbox: str | os.PathLike, timeout: float,
            filename: str = "Check.v") -> tuple[CheckOutcome, float]:
        """Compile ``file_text`` inside ``sandbox``; returns (outcome, wall seconds)."""
        exe = self.executable()
        path = Path(sandbox) / filename
        try:
            path.write_text(file_text, encoding="utf-8")
        except OSError as e:
            raise SandboxIoError(str(e)) from e
        t0 = time.monotonic()
        try:
            proc = subprocess.run([exe, *self.flags, filename], cwd=sandbox, capture_output=True,
                                  text=True, timeout=timeout)
        except subprocess.TimeoutExpired:
            return CheckOutcome("failure", f"{TIMEOUT_MARKER} after {timeout:g}s", timed_out=True), \
                time.monotonic() - t0
        except OSError as e:
            raise SandboxIoError(str(e)) from e
        wall = time.monotonic() - t0
        if proc.returncode == 0:
            return CheckOutcome("success"), wall
        text = (proc.stdout + proc.stderr).strip() or f"coqc exited with status {proc.returncode}"
        m = _LOCATION.search(text)
        loc = (int(m.group(1)), int(m.group(2))) if m else None
        return CheckOutcome("failure", text, loc), wall


def open_scopes(text: str) -> list[str]:
    """Names of Sections/Modules left open at the end of ``text`` (innermost last)."""
    stack: list[str] = []
    try:
        sentences = split_sentences(text)
    except LexicalError:
        return stack
    for s, _ in sentences:
        core = sentence_core(s)
        m = re.match(r"(Section|Module(?:\s+Type)?)\s+([^\W\d][\w']*)\s*(.*)$", core, re.S)
        if m:
            # "Module M := X." and "Module M (F) : T := X." are closed declarations.
            if ":=" not in m.group(3):
                stack.append(m.group(2))
            continue
        m = re.match(r"End\s+([^\W\d][\w']*)\s*\.$", core)
        if m and m.group(1) in stack:
            while stack and stack.pop() != m.group(1):
                pass
    return stack


def close_scopes(text: str) -> str:
    return "".join(f"End {name}.\n" for name in reversed(open_scopes(text)))


def split_requires(preamble: str) -> tuple[list[str], list[str]]:
    """Partition preamble sentences into library loads and everything else."""
    loads, rest = [], []
    if not preamble.strip():
        return loads, rest
    try:
        sentences = split_sentences(preamble)
    except LexicalError:
        return loads, [preamble]
    for s, _ in sentences:
        core = strip_comments(s).strip()
        if re.match(r"(?:From\s+\S+\s+)?Require\b", core):
            loads.append(s.strip())
        else:
            rest.append(s.strip())
    return loads, rest


def proof_is_admitted(proof: str) -> bool:
    try:
        sentences = [sentence_core(s) for s, _ in split_sentences(proof)]
    except LexicalError:
        return False
    return bool(sentences) and (sentences[-1] == "Admitted." or any(
        re.match(r"(?:admit|give_up)\b", s) for s in sentences))


def lemma_file(context: str, lemma: CandidateLemma, imports: str = "") -> str:
    """Standalone file: loads, context, local preamble, lemma, then scope closers."""
    loads, rest = split_requires(lemma.shared_preamble)
    parts = []
    if imports.strip():
        parts.append(imports.strip())
    if loads:
        parts.append("\n".join(loads))
    if context.strip():
        parts.append(context.rstrip())
    if rest:
        parts.append("\n".join(rest))
    parts.append(lemma.statement.strip())
    parts.append(lemma.proof.strip())
    body = "\n".join(parts) + "\n"
    return body + close_scopes(body)


def check_lemma(preamble: str, lemma: CandidateLemma, sandbox: str | os.PathLike,
                timeout: float, checker: Checker, imports: str = "") -> CheckOutcome:
    """Check one candidate in ``sandbox`` (an empty writable directory).

    ``preamble`` is the source theorem's context: the script preceding it,
    which carries the section variables and the definitions it depends on.
    """
    if proof_is_admitted(lemma.proof):
        return CheckOutcome("failure", "proof ends with Admitted or uses admit; not accepted")
    text = lemma_file(preamble, lemma, imports)
    outcome, _ = checker.run(text, sandbox, timeout)
    return outcome


# -- repair -------------------------------------------------------------------

_GUIDANCE = {
    ErrorClass.UndefinedReference:
        "The checker cannot find the name `{name}`. Either define it, replace it with an existing "
        "name from the context, or add the missing Require Import line.",
    ErrorClass.SyntaxError:
        "The script does not parse. Fix the Rocq syntax (periods, bullets, notation, balanced "
        "parentheses) without changing the meaning of the lemma.",
    ErrorClass.TacticFailure:
        "A tactic failed at the reported location. Use a different tactic or add intermediate "
        "steps; the lemma statement may also be adjusted if it is false as written.",
    ErrorClass.UnfinishedProof:
        "The proof leaves goals open. Complete every remaining goal; do not use admit or Admitted.",
    ErrorClass.TypeMismatch:
        "A term has the wrong type. Check the types of the arguments and of the lemma statement "
        "against the definitions in the context.",
    ErrorClass.CheckerTimeout:
        "Checking timed out. Replace expensive automation with a more direct proof.",
}
_DEFAULT_GUIDANCE = "Repair the lemma and its proof so that the checker accepts them."

FIX_SYSTEM = ("You are an expert at Rocq theorem proving. You repair Rocq lemmas and proofs "
              "using the error reported by the checker.")


def build_fix_prompt(lemma: CandidateLemma, outcome: CheckOutcome, cls: ErrorClass) -> ChatTranscript:
    guidance = _GUIDANCE.get(cls, _DEFAULT_GUIDANCE).format(name=missing_name(outcome.error_text or "") or "?")
    preamble = f"[Preamble]\n{lemma.shared_preamble}\n\n" if lemma.shared_preamble.strip() else ""
    user = (
        f"{preamble}[Lemma]\n{lemma.statement}\n\n[Proof]\n{lemma.proof}\n\n"
        f"[Error Type]\n{cls.value}\n\n[Error Message]\n{outcome.error_text}\n\n"
        f"[Guidance]\n{guidance}\n\n"
        "Return the corrected lemma and proof in a single Rocq code block."
    )
    return ChatTranscript((ChatMessage("system", FIX_SYSTEM), ChatMessage("user", user)), {1: "fix"})


def fix(lemma: CandidateLemma, outcome: CheckOutcome, cls: ErrorClass, gateway: Gateway,
        params: GenerationParams, mode: str | None = None) -> CandidateLemma:
    if outcome.ok:
        raise ValueError("fix needs a failed outcome")
    reply = gateway.chat(build_fix_prompt(lemma, outcome, cls), params, mode)
    parsed = parse_lemma_script(reply.content, lemma.source_theorem_id)
    if not parsed:
        return lemma
    new = parsed[0]
    preamble = new.shared_preamble if new.shared_preamble.strip() else lemma.shared_preamble
    return CandidateLemma(new.name, new.statement, new.proof, preamble, lemma.source_theorem_id, lemma.ordinal)


class LemmaChecker(Protocol):
    def __call__(self, lemma: CandidateLemma) -> CheckOutcome: ...


class LemmaFixer(Protocol):
    def __call__(self, lemma: CandidateLemma, outcome: CheckOutcome, cls: ErrorClass) -> CandidateLemma: ...


@dataclass
class ScriptFixer:
    gateway: Gateway
    params: GenerationParams
    mode: str | None = None

    def __call__(self, lemma, outcome, cls):
        return fix(lemma, outcome, cls, self.gateway, self.params, self.mode)


@dataclass
class AgentDeps:
    """What the loop needs.  ``checker`` is either a ``Checker`` (run in a
    fresh sandbox per call) or any callable ``lemma -> CheckOutcome``."""
    checker: Checker | LemmaChecker | None
    fixer: LemmaFixer
    context: str = ""
    imports: str = ""
    timeout: float = 60.0
    source_project: str = ""
    backend_model: str = ""
    sandbox_root: str | None = None

    def check(self, lemma: CandidateLemma) -> CheckOutcome:
        if isinstance(self.checker, Checker):
            root = self.sandbox_root or tempfile.gettempdir()
            os.makedirs(root, exist_ok=True)
            sandbox = Path(root) / f"check-{uuid.uuid4().hex}"
            try:
                sandbox.mkdir()
            except OSError as e:
                raise SandboxIoError(str(e)) from e
            try:
                return check_lemma(self.context, lemma, sandbox, self.timeout, self.checker, self.imports)
            finally:
                shutil.rmtree(sandbox, ignore_errors=True)
        if self.checker is None:
            raise CheckerNotFound("no checker configured")
        return self.checker(lemma)


@dataclass
class AgentResult:
    lemma: VerifiedLemma | None
    checks: int = 0
    fixes: int = 0
    history: list[tuple[CheckOutcome, ErrorClass | None]] = field(default_factory=list)


def run_agent(lemma: CandidateLemma, round_limit: int, deps: AgentDeps) -> AgentResult:
    if round_limit < 1:
        raise ValueError("round_limit must be >= 1")
    res = AgentResult(None)
    for rnd in range(1, round_limit + 1):
        outcome = deps.check(lemma)
        res.checks += 1
        if outcome.ok:
            res.history.append((outcome, None))
            res.lemma = VerifiedLemma.create(
                lemma.name, lemma.statement, lemma.proof, lemma.shared_preamble,
                lemma.source_theorem_id, deps.source_project, deps.backend_model, rnd)
            return res
        cls = ErrorClass.CheckerTimeout if outcome.timed_out else classify_error(outcome.error_text)
        res.history.append((outcome, cls))
        # A fix after the last check could never be verified.
        if rnd < round_limit:
            lemma = deps.fixer(lemma, outcome, cls)
            res.fixes += 1
    return res


def prove_agent(lemma: CandidateLemma, round_limit: int, deps: AgentDeps) -> VerifiedLemma | None:
    return run_agent(lemma, round_limit, deps).lemma


def candidate_of(lemma: VerifiedLemma) -> CandidateLemma:
    return CandidateLemma(lemma.name, lemma.statement, lemma.proof, lemma.shared_preamble,
                          lemma.source_theorem_id, 0)

