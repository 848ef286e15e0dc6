"""Frequency-domain outlier-aware KV-cache compression on KV dumps."""

from .baselines import POLICIES, select_baseline
from .budget import BudgetAllocation, LayerEnergyRatio, allocate, layer_energy_ratio
from .cache import (
    CompressedCache,
    CompressionConfig,
    KvDump,
    RetentionPlan,
    append,
    compress,
    evaluate_plan,
)
from .fkv import read_dump, write_dump
from .outlier import (
    BaseKv,
    BudgetError,
    DeviationScores,
    LayerKv,
    SelectionResult,
    compute_base_kv,
    deviation_scores,
    select_outliers,
)
from .spectral import dct, idct, lowpass, power_spectrum
from .synth import SynthSpec, SynthTruth, generate

__version__ = "0.1.0"
