from abc import ABC, abstractmethod


class EvalBackend(ABC):
    """
    Abstract base class for per-video evaluation executors.
    """

    @abstractmethod
    def init(self):
        """Initialize the backend resources."""
        pass

    @abstractmethod
    def score_videos(self, model, records, job):
        """
        Score every record on the evaluation grid.

        Args:
            model (ActionLLM): Trained model, read-only during evaluation.
            records (list): VideoRecords to score.
            job (GridJob): Ratios, sample rate and start frame.

        Returns:
            list: One VideoScore per record, in input order.
        """
        pass

    @abstractmethod
    def cleanup(self):
        """Clean up resources."""
        pass
