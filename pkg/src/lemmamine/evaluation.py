"""Cross-validated comparison of the prover with and without mined lemmas."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import random
import re
import shutil
import tempfile
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .agent import Checker, SandboxIoError, close_scopes, split_requires
from .corpus import CorpusIndex, TheoremRecord, count_tactics, identifiers
from .store import VerifiedLemma, flag_redundant, query_training

log = logging.getLogger(__name__)

HAMMER_IMPORT = "From Hammer Require Import Hammer."
PROVER_STUB = "Proof. hammer. Qed."
RENAME_SUFFIX = "_s2r"


class TooFewTheorems(ValueError):
    pass


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    assignment: Mapping[str, int]

    def fold(self, f: int) -> list[str]:
        return [t for t, a in self.assignment.items() if a == f]

    def sizes(self) -> list[int]:
        out = [0] * self.k
        for a in self.assignment.values():
            out[a] += 1
        return out

    def to_json(self) -> str:
        return json.dumps({"k": self.k, "seed": self.seed, "assignment": dict(self.assignment)},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        d = json.loads(text)
        return cls(d["k"], d["seed"], d["assignment"])


def make_folds(ids: Sequence[str], k: int = 3, seed: int = 0) -> FoldPlan:
    """Seeded shuffle of the sorted ids, then round-robin assignment."""
    if k < 2:
        raise ValueError("k must be >= 2")
    uniq = sorted(set(ids))
    if len(uniq) < k:
        raise TooFewTheorems(f"{len(uniq)} theorems cannot fill {k} folds")
    random.Random(seed).shuffle(uniq)
    return FoldPlan(k, seed, {t: i % k for i, t in enumerate(uniq)})


# -- injection ------------------------------------------------------------------

@dataclass(frozen=True)
class InjectedFile:
    text: str
    # Text pieces inserted relative to the baseline file, in order.
    inserted: tuple[str, ...] = ()
    renamed: Mapping[str, str] = field(default_factory=dict)


def _rename(statement: str, old: str, new: str) -> str:
    return re.sub(r"\b%s\b" % re.escape(old), new, statement, count=1)


def inject_lemmas(thm: TheoremRecord, lemmas: Sequence[VerifiedLemma], index: CorpusIndex,
                  header: str = HAMMER_IMPORT, stub: str = PROVER_STUB) -> InjectedFile:
    """The prover input for ``thm``; zero lemmas gives the baseline file."""
    prefix = index.preceding_text(thm)
    loads: list[str] = []
    others: list[str] = []
    for lem in lemmas:
        l, o = split_requires(lem.shared_preamble)
        loads += [x for x in l if x not in loads]
        others += [x for x in o if x not in others]

    in_scope = index.names_in_scope(thm) | {thm.name}
    counter = 0
    renamed: dict[str, str] = {}
    bodies = []
    for lem in lemmas:
        name, statement = lem.name, lem.statement.strip()
        if name in in_scope:
            counter += 1
            new = f"{name}{RENAME_SUFFIX}{counter}"
            while new in in_scope:
                counter += 1
                new = f"{name}{RENAME_SUFFIX}{counter}"
            statement = _rename(statement, name, new)
            renamed.setdefault(name, new)
            name = new
        in_scope.add(name)
        bodies.append(f"{statement}\n{lem.proof.strip()}")

    head = header.strip() + "\n" if header.strip() else ""
    load_text = "".join(x + "\n" for x in loads)
    injected = "".join(x + "\n" for x in others) + "".join(b + "\n" for b in bodies)
    if injected and prefix and not prefix.endswith("\n"):
        injected = "\n" + injected
    main = prefix + injected
    main += f"{thm.statement_text}\n{stub}\n"
    text = head + load_text + main
    text += close_scopes(text)
    inserted = tuple(p for p in (load_text, injected) if p)
    return InjectedFile(text, inserted, renamed)


def lemma_in_scope(lemma: VerifiedLemma, thm: TheoremRecord, index: CorpusIndex) -> bool:
    """Whether every project name the lemma mentions is declared before ``thm``."""
    scope = index.names_in_scope(thm)
    project_names = set(index.name_map) | {t.name for t in index.theorems}
    used = set(identifiers(lemma.statement)) | set(identifiers(lemma.proof))
    used.discard(lemma.name)
    return all(n in scope for n in used if n in project_names)


# -- prover runs ------------------------------------------------------------------

@dataclass(frozen=True)
class EvalOutcome:
    theorem_id: str
    condition: str      # "baseline" | "enhanced"
    result: str         # "proved" | "failed" | "timeout"
    wall_ms: int
    tactic_count: int
    project: str = ""
    fold: int = -1
    injected: int = 0
    error: str | None = None

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "EvalOutcome":
        return cls(**d)


def run_hammer(file_text: str, sandbox: str | os.PathLike, timeout: float,
               checker: Checker) -> tuple[str, int]:
    """(result, wall_ms) for one prover file."""
    outcome, wall = checker.run(file_text, sandbox, timeout, filename="Target.v")
    if outcome.timed_out:
        result = "timeout"
    else:
        result = "proved" if outcome.ok else "failed"
    return result, int(round(wall * 1000))


# -- reports ----------------------------------------------------------------------

def improvement(baseline: int, enhanced: int) -> Decimal | None:
    """Relative gain in percent, rounded half-up to two decimals; None when baseline is 0."""
    if baseline == 0:
        return None
    pct = (Decimal(enhanced) - Decimal(baseline)) * 100 / Decimal(baseline)
    return pct.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


def format_pct(p: Decimal | None) -> str:
    return "n/a" if p is None else f"{p:+}%"


@dataclass(frozen=True)
class ReportRow:
    project: str
    baseline_proved: int = 0
    enhanced_proved: int = 0
    baseline_tactics: int = 0
    enhanced_tactics: int = 0

    @property
    def proved_improvement(self) -> Decimal | None:
        return improvement(self.baseline_proved, self.enhanced_proved)

    @property
    def tactics_improvement(self) -> Decimal | None:
        return improvement(self.baseline_tactics, self.enhanced_tactics)

    def cells(self) -> list[str]:
        return [self.project, str(self.baseline_proved), str(self.enhanced_proved),
                format_pct(self.proved_improvement), str(self.baseline_tactics),
                str(self.enhanced_tactics), format_pct(self.tactics_improvement)]


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[ReportRow, ...]
    total: ReportRow


def build_report(outcomes: Iterable[EvalOutcome], projects: Sequence[str] | None = None) -> EvalReport:
    acc: dict[str, list[int]] = {}
    for p in projects or ():
        acc.setdefault(p, [0, 0, 0, 0])
    for o in outcomes:
        row = acc.setdefault(o.project or o.theorem_id.split("/", 1)[0], [0, 0, 0, 0])
        if o.result != "proved":
            continue
        if o.condition == "baseline":
            row[0] += 1
            row[2] += o.tactic_count
        else:
            row[1] += 1
            row[3] += o.tactic_count
    rows = tuple(ReportRow(p, v[0], v[1], v[2], v[3]) for p, v in acc.items())
    tot = [sum(r[i] for r in acc.values()) for i in range(4)]
    return EvalReport(rows, ReportRow("Total", *tot))


HEADER = ["Project", "Proved (baseline)", "Proved (enhanced)", "Proved gain",
          "Tactics (baseline)", "Tactics (enhanced)", "Tactics gain"]


def render_report(report: EvalReport, format: str = "markdown") -> str:
    rows = [r.cells() for r in (*report.rows, report.total)]
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(HEADER)
        w.writerows(rows)
        return buf.getvalue()
    if format != "markdown":
        raise ValueError(f"unknown format {format!r}")
    lines = ["| " + " | ".join(HEADER) + " |",
             "|" + "|".join(["---"] + ["---:"] * (len(HEADER) - 1)) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


# -- driver -----------------------------------------------------------------------

@dataclass
class EvalConfig:
    checker: Checker | Callable[[str, str, float], tuple[str, int]]
    timeout: float = 60.0
    jobs: int = 1
    filter_redundant: bool = False
    scope_filter: bool = True
    sandbox_root: str | None = None
    outcomes_path: str | os.PathLike | None = None
    on_outcome: Callable[[EvalOutcome], None] | None = None


def _run(cfg: EvalConfig, text: str) -> tuple[str, int]:
    if not isinstance(cfg.checker, Checker):
        return cfg.checker(text, "", cfg.timeout)
    root = cfg.sandbox_root or tempfile.gettempdir()
    sandbox = Path(root) / f"hammer-{uuid.uuid4().hex}"
    try:
        os.makedirs(root, exist_ok=True)
    except OSError as e:
        raise SandboxIoError(str(e)) from e
    try:
        sandbox.mkdir()
    except OSError as e:
        raise SandboxIoError(str(e)) from e
    try:
        return run_hammer(text, sandbox, cfg.timeout, cfg.checker)
    finally:
        shutil.rmtree(sandbox, ignore_errors=True)


def load_outcomes(path) -> list[EvalOutcome]:
    if path is None or not os.path.exists(path):
        return []
    with open(path, encoding="utf-8") as f:
        return [EvalOutcome.from_json(json.loads(l)) for l in f if l.strip()]


def evaluate(indexes: CorpusIndex | Sequence[CorpusIndex], store: Iterable[VerifiedLemma],
             plan: FoldPlan, cfg: EvalConfig) -> tuple[EvalReport, list[EvalOutcome]]:
    """Run every planned theorem under both conditions and aggregate.

    Outcomes already present in ``cfg.outcomes_path`` are reused, so an
    interrupted run resumes where it stopped.
    """
    if isinstance(indexes, CorpusIndex):
        indexes = [indexes]
    lemmas = list(store)
    by_id: dict[str, tuple[TheoremRecord, CorpusIndex]] = {}
    for ix in indexes:
        for t in ix.proved_theorems:
            by_id[t.id] = (t, ix)
    missing = [t for t in by_id if t not in plan.assignment]
    if missing:
        raise ValueError(f"fold plan does not cover {len(missing)} theorems, e.g. {missing[0]}")

    done = {(o.theorem_id, o.condition): o for o in load_outcomes(cfg.outcomes_path)}
    write_lock = threading.Lock()
    training = {f: query_training(lemmas, plan, f) for f in range(plan.k)}

    def record(o: EvalOutcome):
        with write_lock:
            if cfg.outcomes_path is not None:
                with open(cfg.outcomes_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(o.to_json(), ensure_ascii=False) + "\n")
            if cfg.on_outcome:
                cfg.on_outcome(o)

    def job(tid: str) -> list[EvalOutcome]:
        thm, ix = by_id[tid]
        fold = plan.assignment[tid]
        chosen = [l for l in training[fold] if l.source_project == ix.project]
        if cfg.filter_redundant:
            chosen = [l for l in chosen if not flag_redundant(l, ix)]
        if cfg.scope_filter:
            chosen = [l for l in chosen if lemma_in_scope(l, thm, ix)]
        tactics = count_tactics(thm)
        out = []
        for condition, lems in (("baseline", []), ("enhanced", chosen)):
            if (tid, condition) in done:
                out.append(done[(tid, condition)])
                continue
            text = inject_lemmas(thm, lems, ix).text
            try:
                result, wall = _run(cfg, text)
                err = None
            except SandboxIoError as e:
                result, wall, err = "failed", 0, f"sandbox: {e}"
            o = EvalOutcome(tid, condition, result, wall, tactics, ix.project, fold, len(lems), err)
            record(o)
            out.append(o)
        return out

    ids = sorted(by_id, key=lambda t: (plan.assignment[t], t))
    outcomes: list[EvalOutcome] = []
    with ThreadPoolExecutor(max_workers=max(1, cfg.jobs)) as pool:
        try:
            for res in pool.map(job, ids):
                outcomes += res
        except KeyboardInterrupt:
            pool.shutdown(wait=True, cancel_futures=True)
            raise
    report = build_report(outcomes, [ix.project for ix in indexes])
    return report, outcomes
