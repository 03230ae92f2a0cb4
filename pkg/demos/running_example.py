"""Walk the Monoid example through every stage, offline.

Run from the repository root:  python3 demos/running_example.py

Chat responses come from the committed cassette.  Lemma checks use the
stand-in checker from the test fixtures unless a real coqc is on PATH.
"""
import shutil
from pathlib import Path

from lemmamine.agent import Checker
from lemmamine.cli import RunConfig
from lemmamine.corpus import count_tactics, scan_project
from lemmamine.evaluation import inject_lemmas, make_folds
from lemmamine.extraction import ExtractionConfig, extract_for_theorem
from lemmamine.gateway import Cassette, Gateway, GenerationParams
from lemmamine.retrieval import collect_context
from lemmamine.store import LemmaStore, flag_redundant, query_training

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "tests" / "fixtures"

# The corpus: three proved theorems and two definitions.
index = scan_project(FIXTURES / "projects" / "monoid")
for thm in index.proved_theorems:
    print(f"{thm.name:24s} {count_tactics(thm)} tactics")

# What the model is shown for `sqr`: the class and the fixpoint it mentions,
# plus everything in the file above it.
sqr = index.theorem("monoid/Monoid.v/sqr")
bundle = collect_context(sqr, index, budget=32000)
print("\ntypes:", bundle.type_names, " functions:", bundle.function_names,
      " ~tokens:", bundle.token_estimate)

# Both chat stages and the repair loop, replayed.
coqc = "coqc" if shutil.which("coqc") else str(FIXTURES / "bin" / "coqc")
defaults = RunConfig()
cfg = ExtractionConfig(
    extraction_params=GenerationParams(defaults.extraction_model, 0.0, defaults.max_output_tokens),
    agent_params=GenerationParams(defaults.agent_model, 0.0, defaults.max_output_tokens),
    gateway=Gateway(None, Cassette(FIXTURES / "monoid_cassette.jsonl"), "replay"),
    checker=Checker(coqc),
)
store = LemmaStore()
for thm in index.proved_theorems:
    result = extract_for_theorem(thm, index, cfg)
    store.extend(result)
    print(f"\n{thm.name}: {result.telemetry.to_json()}")
    for lem in result:
        redundant = " (restates a definition clause)" if flag_redundant(lem, index) else ""
        print(f"  {lem.statement}{redundant}")

# Three theorems, three folds: power_commute_with_x is tested against
# lemmas mined from the other two.
plan = make_folds([t.id for t in index.proved_theorems], k=3, seed=0)
target = index.theorem("monoid/Monoid.v/power_commute_with_x")
training = query_training(store, plan, plan.assignment[target.id])
print("\nlemmas available to power_commute_with_x:", [l.name for l in training])

enhanced = inject_lemmas(target, training, index)
print("\n" + enhanced.text.split("Context {M : Monoid}.\n", 1)[1])
