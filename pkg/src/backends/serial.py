from tqdm import tqdm

from src.evalkit import score_video
from .base import EvalBackend


class SerialBackend(EvalBackend):
    """
    In-process backend; scores videos one after another.
    """

    def __init__(self, progress=False, **_):
        self.progress = progress

    def init(self):
        pass

    def score_videos(self, model, records, job):
        it = tqdm(records, desc="eval", unit="video", disable=not self.progress, leave=False)
        return [score_video(model, record, job) for record in it]

    def cleanup(self):
        pass
