from .examples import (
    DeadLatent,
    DetectionTestSet,
    LatentExampleSet,
    SequenceActivations,
    build_detection_set,
    collect_examples,
    format_highlighted,
)
from .judges import AlwaysJudge, JudgeError, KeywordJudge, OracleJudge, RandomJudge, RemoteJudge
from .pipeline import run_autointerp
