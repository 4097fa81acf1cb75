from .evaluation import CalibrationResult, CaseMetrics, EvalReport
from .model import DecoderKind, DecoderSpec, EncoderConfig, MAEDecoderConfig, UpsampleMode
from .run import RunConfig
from .volume import PatchConfig, TokenSequence, Volume
__all__ =[
    "CalibrationResult",
    "CaseMetrics",
    "EvalReport",
    "DecoderKind",
    "DecoderSpec",
    "EncoderConfig",
    "MAEDecoderConfig",
    "UpsampleMode",
    "RunConfig",
    "PatchConfig",
    "TokenSequence",
    "Volume",
]
