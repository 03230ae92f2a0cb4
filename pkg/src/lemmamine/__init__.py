"""Mine reusable Rocq lemmas from LLM proof trajectories and measure their effect on CoqHammer."""
from .corpus import CorpusIndex, DefinitionRecord, TheoremRecord, scan_project, split_sentences
from .evaluation import EvalConfig, FoldPlan, build_report, evaluate, make_folds, render_report
from .extraction import CandidateLemma, ExtractionConfig, extract_for_theorem, parse_lemma_script
from .gateway import Cassette, ChatMessage, ChatTranscript, Gateway, GenerationParams
from .retrieval import ContextBundle, collect_context
from .store import LemmaStore, VerifiedLemma, query_training

__version__ = "0.1.0"

__all__ = [
    "CorpusIndex", "DefinitionRecord", "TheoremRecord", "scan_project", "split_sentences",
    "EvalConfig", "FoldPlan", "build_report", "evaluate", "make_folds", "render_report",
    "CandidateLemma", "ExtractionConfig", "extract_for_theorem", "parse_lemma_script",
    "Cassette", "ChatMessage", "ChatTranscript", "Gateway", "GenerationParams",
    "ContextBundle", "collect_context", "LemmaStore", "VerifiedLemma", "query_training",
]
