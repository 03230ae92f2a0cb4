import pytest

from conftest import CASSETTE, FAKE_COQC, RESPONSES
from lemmamine.agent import CheckOutcome, Checker
from lemmamine.cli import RunConfig
from lemmamine.extraction import (CLOSING_LINE, FORMALIZE_PROMPT, ROLE_LINE, TRUNCATED_MARKER,
                                  ExtractionConfig, build_formalize_prompt, build_nl_proof_prompt,
                                  count_nl_steps, extract_for_theorem, last_code_block, make_nl_proof,
                                  normalize_statement, parse_lemma_script)
from lemmamine.gateway import Cassette, ChatMessage, Gateway, GenerationParams
from lemmamine.retrieval import ContextBundle, collect_context


def read(name):
    return (RESPONSES / name).read_text(encoding="utf-8")


def test_stage1_prompt_layout(monoid):
    thm = monoid.theorem("monoid/Monoid.v/sqr")
    t = build_nl_proof_prompt(collect_context(thm, monoid, 32000), thm.statement_text)
    system, user = t.messages[0].content, t.messages[1].content
    assert system.startswith(ROLE_LINE)
    assert system.index("[Type Definitions]") < system.index("Class Monoid") < \
        system.index("[Function Definitions]") < system.index("Fixpoint power") < \
        system.index("[Script So Far]")
    assert system.endswith(CLOSING_LINE)
    assert user == "[Theorem Statement]\n" + thm.statement_text
    assert t.stage_tags == {1: "nl_proof"}


def test_stage1_marks_truncation():
    b = ContextBundle((), (), "tail of file", 3, truncated=True)
    t = build_nl_proof_prompt(b, "Lemma x : True.")
    assert f"[Script So Far]\n{TRUNCATED_MARKER}\ntail of file" in t.messages[0].content


def test_stage1_rejects_empty_statement():
    with pytest.raises(ValueError):
        build_nl_proof_prompt(ContextBundle(), "  ")


def test_stage2_appends_fixed_prompt(monoid):
    thm = monoid.theorem("monoid/Monoid.v/sqr")
    t = build_nl_proof_prompt(collect_context(thm, monoid, 32000), thm.statement_text)
    with pytest.raises(ValueError):
        build_formalize_prompt(t)
    t2 = build_formalize_prompt(t.extend(ChatMessage("assistant", "1) unfold.")))
    assert t2.last.content == FORMALIZE_PROMPT
    assert t2.stage_tags[3] == "formalize"
    assert "[Task 3]\nReturn a Rocq script that includes all the formalized lemmas and proofs." in FORMALIZE_PROMPT


def test_nl_steps():
    assert count_nl_steps("1) a\n2) b\n3) c") == 3
    assert count_nl_steps("**1.** a\n**2.** b") == 2
    assert count_nl_steps("First para.\n\nSecond para.") == 2
    assert count_nl_steps("We cannot prove this theorem.") == 0
    nl = make_nl_proof("This is impossible to prove as stated.\n1) but here is a step", "t")
    assert nl.refusal and len(nl.steps) == 1


def test_last_code_block():
    assert last_code_block("no code") is None
    assert last_code_block(read("two_blocks.txt")).startswith("Lemma final_one")


def test_fig5_parse():
    r = parse_lemma_script(read("fig5_script.txt"), "src")
    assert [c.name for c in r] == ["power_0", "power_1", "power_S"]
    assert r[1].statement == "Lemma power_1: forall x: A, power x 1 = x."
    assert r[1].proof == "Proof.  trivial.  Qed."
    assert r[2].statement.endswith("power x (S n) = dot x (power x n).")
    assert all(c.source_theorem_id == "src" for c in r)
    assert r.warnings == []


def test_no_code_block_warns(caplog):
    r = parse_lemma_script(read("no_code_block.txt"), "src")
    assert list(r) == [] and r.warnings
    assert "no lemma found" in caplog.text


def test_require_goes_to_preamble():
    (c,) = parse_lemma_script(read("require_preamble.txt"), "src")
    assert c.shared_preamble == "Require Import Arith."
    assert c.proof.startswith("Proof.") and c.proof.endswith("Qed.")


def test_unclosed_lemma_dropped():
    r = parse_lemma_script(read("unclosed.txt"), "src")
    assert [c.name for c in r] == ["good"]
    assert any("dangling" in w for w in r.warnings)


def test_normalize_statement():
    a = normalize_statement("Lemma power_1: forall x: A, power x 1 = x.")
    b = normalize_statement("Theorem other_name :\n  forall x : A, (* c *) power x 1 = x .")
    assert a == b == ": forall x : A , power x 1 = x"


def _cfg(gateway, checker, round_limit=8):
    rc = RunConfig()
    return ExtractionConfig(GenerationParams(rc.extraction_model, rc.temperature, rc.max_output_tokens),
                            GenerationParams(rc.agent_model, rc.temperature, rc.max_output_tokens),
                            gateway, checker, round_limit)


def test_pipeline_from_cassette(monoid):
    gw = Gateway(None, Cassette(CASSETTE), "replay")
    res = extract_for_theorem(monoid.theorem("monoid/Monoid.v/sqr"), monoid,
                              _cfg(gw, lambda lem: CheckOutcome("success")))
    assert [l.name for l in res] == ["power_0", "power_1", "power_S"]
    assert res.telemetry.nl_steps == 4 and res.telemetry.verified == 3
    assert all(l.source_theorem_id == "monoid/Monoid.v/sqr" for l in res)
    assert res.stage2.stage_tags[4] == "formalize"


def test_pipeline_refusal_skips_stage2(monoid):
    gw = Gateway(None, Cassette(CASSETTE), "replay")
    res = extract_for_theorem(monoid.theorem("monoid/Monoid.v/power_of_unit"), monoid,
                              _cfg(gw, lambda lem: CheckOutcome("success")))
    assert list(res) == [] and res.telemetry.refusal
    assert gw.calls == 1


def test_pipeline_fix_round_with_subprocess_checker(monoid, tmp_path):
    gw = Gateway(None, Cassette(CASSETTE), "replay")
    cfg = _cfg(gw, Checker(str(FAKE_COQC)))
    cfg.sandbox_root = str(tmp_path)
    res = extract_for_theorem(monoid.theorem("monoid/Monoid.v/power_commute_with_x"), monoid, cfg)
    (lem,) = res
    assert lem.name == "identity_commutes" and lem.rounds_used == 2
    assert "bogus_tactic" not in lem.proof
    assert list(tmp_path.iterdir()) == []   # sandboxes are cleaned up


def test_restatement_dropped(monoid):
    thm = monoid.theorem("monoid/Monoid.v/sqr")

    class Model:
        def complete(self, transcript, params):
            if len(transcript.messages) == 2:
                return "1) unfold power."
            return "```\nLemma again : forall x : A, power x 2 = dot x x.\nProof. simpl. Qed.\n```"

    res = extract_for_theorem(thm, monoid, _cfg(Gateway(Model(), mode="live"),
                                                lambda lem: CheckOutcome("success")))
    assert list(res) == [] and res.telemetry.dropped_restatements == 1
