"""Pipeline filters: Pretrainer, Curator, Aligner, SelfPlay, GapEvaluator, Ablation, Reporter."""

from stages.ablation import Ablation
from stages.aligner import Aligner
from stages.base import BaseStage
from stages.curator import Curator
from stages.evaluator import GapEvaluator
from stages.librarian import RunStore
from stages.pretrainer import Pretrainer
from stages.reporter import Reporter
from stages.self_play import SelfPlay

__all__ = [
    "BaseStage",
    "Pretrainer",
    "Curator",
    "Aligner",
    "SelfPlay",
    "GapEvaluator",
    "Ablation",
    "Reporter",
    "RunStore",
]
