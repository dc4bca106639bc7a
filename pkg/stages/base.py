"""
Abstract base for pipeline stages (Pipe and Filter pattern).

Each stage is a filter with a single responsibility: configuration and the
model weights it reads are injected through the constructor, the data it
transforms flows through ``process`` as pydantic contracts or plain
sequences of them. Stages keep no state between calls.
"""

from abc import ABC, abstractmethod
from typing import Generic, TypeVar

InT = TypeVar("InT", contravariant=True)
OutT = TypeVar("OutT", covariant=True)


class BaseStage(ABC, Generic[InT, OutT]):
    """
    Abstract base class for all pipeline stages (filters).

    Input/Output contract: a stage receives the output of the previous
    filter and returns the input of the next one (pretrainer -> curator ->
    aligner -> evaluator -> reporter). CPU-bound work runs in worker threads
    via ``asyncio.to_thread`` so the event loop stays free.
    """

    @abstractmethod
    async def process(self, data: InT) -> OutT:
        """
        Process input data and return the result for the next filter.

        Args:
            data: Input conforming to the contract of the previous filter
                (e.g. homologous pairs for the Curator, preference tuples for
                the Aligner).

        Returns:
            Output conforming to this filter's contract (e.g. a
            ``CurationResult``, an ``AlignmentResult`` or a ``GapReport``).
        """
        ...
