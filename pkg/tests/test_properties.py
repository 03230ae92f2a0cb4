from fractions import Fraction

from hypothesis import given, settings, strategies as st

from lemmamine.corpus import scan_file, split_sentences
from lemmamine.evaluation import improvement, inject_lemmas, make_folds
from lemmamine.extraction import normalize_statement
from lemmamine.gateway import cassette_key, transcript_from_messages
from lemmamine.retrieval import collect_context
from lemmamine.store import LemmaStore, VerifiedLemma, query_training

word = st.sampled_from(["x", "Nat.add", "(* c. *)", '"s. t"', "-", "{", "}", "..", "a.b", "f", "=", "αβ"])
sep = st.sampled_from([" ", "\n", "\t", "  "])


@st.composite
def rocq_text(draw):
    parts = []
    for _ in range(draw(st.integers(0, 12))):
        words = draw(st.lists(word, min_size=1, max_size=5))
        parts.append(" ".join(words) + "." + draw(sep))
    if draw(st.booleans()):
        parts.append("trailing")
    return "".join(parts)


@given(rocq_text())
def test_split_reassembles(src):
    data = src.encode()
    prev = 0
    for s, (a, b) in split_sentences(src):
        assert data[a:b].decode() == s and s.strip() == s
        assert data[prev:a].strip() == b"" or data[prev:a].lstrip().startswith(b"(*")
        prev = b
    assert data[prev:].strip() == b"" or data[prev:].lstrip().startswith(b"(*")


@given(st.lists(st.sampled_from(["intros.", "simpl.", "- auto.", "+ reflexivity.", "{ lia. }"]), min_size=1, max_size=6),
       st.sampled_from(["", "(* head *)\n", "Definition z := 0.\n"]))
def test_theorem_slice_roundtrip(tactics, head):
    src = f"{head}Lemma l : forall n : nat, n = n.\nProof.\n  " + "\n  ".join(tactics) + "\nQed.\n"
    data = src.encode()
    (thm,) = scan_file("p", "F.v", data).theorems
    region = data[thm.preceding_span[1]:thm.proof_end_offset].decode()
    assert region.startswith(thm.statement_text) and region.endswith("Qed.")
    assert data[:thm.preceding_span[1]].decode() == head


@given(st.integers(20, 600), st.integers(0, 400))
@settings(max_examples=60, deadline=None)
def test_context_monotone_in_budget(monoid, b, extra):
    for thm in monoid.proved_theorems:
        try:
            small = collect_context(thm, monoid, b)
        except ValueError:
            continue
        big = collect_context(thm, monoid, b + extra)
        assert big.script_so_far.endswith(small.script_so_far)
        assert set(small.type_names) <= set(big.type_names)
        assert set(small.function_names) <= set(big.function_names)
        if not small.truncated:
            assert small.token_estimate <= b


@given(st.sets(st.text("abcdef", min_size=1, max_size=6), min_size=2, max_size=40),
       st.integers(2, 6), st.integers(0, 2**32))
def test_folds_balanced_and_deterministic(ids, k, seed):
    if len(ids) < k:
        return
    plan = make_folds(sorted(ids), k, seed)
    assert max(plan.sizes()) - min(plan.sizes()) <= 1
    assert set(plan.assignment) == ids
    assert make_folds(list(ids), k, seed) == plan


@given(st.data())
def test_query_training_no_leakage(data):
    n = data.draw(st.integers(3, 15))
    k = data.draw(st.integers(2, 3))
    ids = [f"p/F.v/t{i}" for i in range(n)]
    plan = make_folds(ids, k, data.draw(st.integers(0, 99)))
    store = LemmaStore()
    for j in range(data.draw(st.integers(0, 20))):
        src = data.draw(st.sampled_from(ids))
        stmt = f"Lemma l{j} : {data.draw(st.integers(0, 5))} = 0."
        store.add(VerifiedLemma.create(f"l{j}", stmt, "Proof. Qed.", "", src, "p", "m", 1))
    f = data.draw(st.integers(0, k - 1))
    for lem in query_training(store, plan, f):
        assert plan.assignment[lem.source_theorem_id] != f


@given(st.text(st.sampled_from("abc xyz:=,()\n\t"), min_size=1, max_size=40))
def test_normalize_idempotent(body):
    s = f"Lemma n : {body}."
    once = normalize_statement(s)
    assert normalize_statement(f"Theorem other_name {once}.") == once


@given(st.text(min_size=1, max_size=30).filter(lambda s: s.strip()), st.sampled_from([" ", "  \n", "\t"]))
def test_key_stable_under_trailing_whitespace(msg, pad):
    a = transcript_from_messages([("system", "s"), ("user", msg)])
    b = transcript_from_messages([("system", "s"), ("user", msg + pad)])
    assert cassette_key(a, "m") == cassette_key(b, "m")


@given(st.integers(1, 10**6), st.integers(0, 10**6))
def test_improvement_matches_fraction_oracle(base, enh):
    exact = Fraction(enh - base, base) * 100
    cents = abs(exact) * 100
    rounded = int(cents) + (1 if cents - int(cents) >= Fraction(1, 2) else 0)
    expected = Fraction(rounded if exact >= 0 else -rounded, 100)
    assert Fraction(str(improvement(base, enh))) == expected


@given(st.lists(st.integers(0, 4), max_size=5))
@settings(deadline=None)
def test_injection_only_inserts(monoid, picks):
    pool = [
        VerifiedLemma.create("power_1", "Lemma power_1: forall x: A, power x 1 = x.", "Proof. auto. Qed.",
                             "", "s", "monoid", "m", 1),
        VerifiedLemma.create("sqr", "Lemma sqr : forall x : A, dot x one = x.", "Proof. auto. Qed.",
                             "Require Import Lia.", "s", "monoid", "m", 1),
        VerifiedLemma.create("h", "Lemma h : 0 = 0.", "Proof. auto. Qed.", "Open Scope nat_scope.", "s", "monoid", "m", 1),
        VerifiedLemma.create("g", "Lemma g : 1 = 1.", "Proof. auto. Qed.", "", "s", "monoid", "m", 1),
        VerifiedLemma.create("dot_assoc", "Lemma dot_assoc : 2 = 2.", "Proof. auto. Qed.", "", "s", "monoid", "m", 1),
    ]
    thm = monoid.theorem("monoid/Monoid.v/power_commute_with_x")
    base = inject_lemmas(thm, [], monoid).text
    f = inject_lemmas(thm, [pool[i] for i in picks], monoid)
    text = f.text
    for piece in f.inserted:
        assert piece in text
        text = text.replace(piece, "", 1)
    assert text == base
