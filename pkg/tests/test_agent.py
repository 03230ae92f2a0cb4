import json
import os
import time

import pytest

from conftest import FAKE_COQC, FIXTURES
from lemmamine.agent import (TIMEOUT_MARKER, AgentDeps, CheckOutcome, Checker, CheckerNotFound, ErrorClass,
                             build_fix_prompt, check_lemma, classify_error, close_scopes, fix, lemma_file,
                             missing_name, open_scopes, proof_is_admitted, run_agent, split_requires)
from lemmamine.extraction import CandidateLemma
from lemmamine.gateway import Gateway, GenerationParams

LEMMA = CandidateLemma("power_1", "Lemma power_1: forall x: A, power x 1 = x.", "Proof. trivial. Qed.",
                       "", "monoid/Monoid.v/sqr", 0)


class Script:
    """Checker that fails until a given round."""

    def __init__(self, succeed_at=None, error="Error: Unable to unify \"x\" with \"dot x one\"."):
        self.succeed_at = succeed_at
        self.error = error
        self.calls = 0

    def __call__(self, lemma):
        self.calls += 1
        if self.succeed_at is not None and self.calls >= self.succeed_at:
            return CheckOutcome("success")
        return CheckOutcome("failure", self.error)


class CountingFixer:
    def __init__(self):
        self.calls = []

    def __call__(self, lemma, outcome, cls):
        self.calls.append(cls)
        return lemma


@pytest.mark.parametrize("case", json.loads((FIXTURES / "errors" / "coq_errors.json").read_text()),
                         ids=lambda c: c["class"])
def test_classify_fixture(case):
    assert classify_error(case["text"]) is ErrorClass(case["class"])


def test_missing_name():
    assert missing_name("Error: The reference one_rgt was not found in the current environment.") == "one_rgt"
    assert missing_name("Error: Unable to locate library Coq.Foo.") == "Coq.Foo"
    assert missing_name("Error: Syntax error") is None


def test_outcome_invariant():
    with pytest.raises(ValueError):
        CheckOutcome("failure")
    with pytest.raises(ValueError):
        CheckOutcome("success", "Error: x")
    assert CheckOutcome("success").ok


def test_loop_success_at_round_three():
    fixer = CountingFixer()
    res = run_agent(LEMMA, 8, AgentDeps(Script(succeed_at=3), fixer))
    assert res.lemma is not None and res.lemma.rounds_used == 3
    assert res.checks == 3 and len(fixer.calls) == 2
    assert fixer.calls == [ErrorClass.TacticFailure] * 2


def test_loop_exhausts_round_limit():
    checker, fixer = Script(), CountingFixer()
    res = run_agent(LEMMA, 8, AgentDeps(checker, fixer))
    assert res.lemma is None
    assert checker.calls == 8 and len(fixer.calls) == 7


def test_round_limit_one_never_fixes():
    fixer = CountingFixer()
    res = run_agent(LEMMA, 1, AgentDeps(Script(), fixer))
    assert res.lemma is None and fixer.calls == []
    with pytest.raises(ValueError):
        run_agent(LEMMA, 0, AgentDeps(Script(), fixer))


def test_timeout_classified():
    fixer = CountingFixer()
    checker = lambda lem: CheckOutcome("failure", f"{TIMEOUT_MARKER} after 1s", timed_out=True)
    run_agent(LEMMA, 2, AgentDeps(checker, fixer))
    assert fixer.calls == [ErrorClass.CheckerTimeout]


def test_admitted_rejected_without_checker(tmp_path):
    lem = CandidateLemma("a", "Lemma a : True.", "Proof. admit. Admitted.", "", "t", 0)
    assert proof_is_admitted(lem.proof)
    assert not proof_is_admitted("Proof. exact I. Qed.")
    out = check_lemma("", lem, tmp_path, 5, Checker("definitely-not-a-binary"))
    assert not out.ok and "Admitted" in out.error_text


def test_scopes():
    text = "Section S.\nModule M.\nModule N := Nat.\nEnd M.\nSection T.\n"
    assert open_scopes(text) == ["S", "T"]
    assert close_scopes(text) == "End T.\nEnd S.\n"


def test_split_requires():
    loads, rest = split_requires("Require Import Arith.\nFrom Coq Require Import List.\nOpen Scope nat_scope.")
    assert loads == ["Require Import Arith.", "From Coq Require Import List."]
    assert rest == ["Open Scope nat_scope."]


def test_lemma_file_layout(monoid):
    thm = monoid.theorem("monoid/Monoid.v/sqr")
    lem = CandidateLemma(LEMMA.name, LEMMA.statement, LEMMA.proof, "Require Import Lia.\nOpen Scope nat_scope.",
                         LEMMA.source_theorem_id, 0)
    text = lemma_file(monoid.preceding_text(thm), lem, "From Hammer Require Import Hammer.")
    assert text.index("Hammer") < text.index("Require Import Lia.") < text.index("Section Monoids.") \
        < text.index("Open Scope nat_scope.") < text.index("Lemma power_1")
    assert text.endswith("Qed.\nEnd Monoids.\n")


def test_checker_not_found(tmp_path):
    with pytest.raises(CheckerNotFound):
        Checker("definitely-not-a-binary").run("Lemma a : True.", tmp_path, 1)


def test_checker_subprocess(tmp_path):
    ok, wall = Checker(str(FAKE_COQC)).run("Lemma a : True.\nProof. exact I. Qed.\n", tmp_path, 10)
    assert ok.ok and wall >= 0
    bad, _ = Checker(str(FAKE_COQC)).run("Lemma a : True.\nProof.\n  bogus_tactic.\nQed.\n", tmp_path, 10)
    assert not bad.ok and bad.location == (3, 2)
    assert classify_error(bad.error_text) is ErrorClass.UndefinedReference


def test_checker_timeout(tmp_path):
    slow = tmp_path / "slowcoqc"
    slow.write_text("#!/bin/sh\nsleep 5\n")
    slow.chmod(0o755)
    box = tmp_path / "box"
    box.mkdir()
    t0 = time.monotonic()
    out, _ = Checker(str(slow)).run("x", box, 0.3)
    assert out.timed_out and out.error_text.startswith(TIMEOUT_MARKER)
    assert time.monotonic() - t0 < 4


def test_fix_prompt_carries_guidance():
    out = CheckOutcome("failure", "Error: The reference one_rgt was not found in the current environment.")
    t = build_fix_prompt(LEMMA, out, ErrorClass.UndefinedReference)
    body = t.last.content
    assert "[Error Type]\nUndefinedReference" in body and "`one_rgt`" in body
    assert t.stage_tags == {1: "fix"}


def test_fix_uses_first_candidate_and_keeps_preamble():
    class Model:
        def complete(self, transcript, params):
            return "```\nLemma power_1 : forall x : A, power x 1 = x.\nProof. intros. apply one_right. Qed.\n```"

    lem = CandidateLemma(LEMMA.name, LEMMA.statement, LEMMA.proof, "Require Import Arith.", "t", 2)
    out = fix(lem, CheckOutcome("failure", "Error: x"), ErrorClass.Other, Gateway(Model(), mode="live"),
              GenerationParams("o4-mini"))
    assert out.proof == "Proof. intros. apply one_right. Qed."
    assert out.shared_preamble == "Require Import Arith." and out.ordinal == 2


def test_fix_unparsable_reply_keeps_lemma():
    class Model:
        def complete(self, transcript, params):
            return "I am not sure."

    out = fix(LEMMA, CheckOutcome("failure", "Error: x"), ErrorClass.Other, Gateway(Model(), mode="live"),
              GenerationParams("o4-mini"))
    assert out == LEMMA


def test_fresh_sandbox_per_check(tmp_path):
    seen = []

    class Spy(Checker):
        def run(self, file_text, sandbox, timeout, filename="Check.v"):
            seen.append(str(sandbox))
            assert os.listdir(sandbox) == []
            return CheckOutcome("failure", "Error: Syntax error"), 0.0

    run_agent(LEMMA, 3, AgentDeps(Spy(), CountingFixer(), sandbox_root=str(tmp_path)))
    assert len(set(seen)) == 3
    assert os.listdir(tmp_path) == []
