"""
Synthetic KV dumps with a known low-frequency body and planted outlier rows.

Every channel is a random mix of the first ``base_modes`` cosine modes,
scaled so no entry exceeds ``base_amplitude``, plus white Gaussian noise.
At each planted position a spike of +/- ``outlier_amplitude`` is added on a
random subset of channels of every head, in both K and V. The planted
positions are drawn uniformly without replacement and returned as truth.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .cache import TEXT, VISION, KvDump
from .outlier import LayerKv


@dataclass
class SynthSpec:
    num_layers: int = 2
    kv_heads: int = 2
    head_dim: int = 32
    seq_len: int = 512
    base_modes: int = 8
    base_amplitude: float = 1.0
    outliers_per_layer: int = 8
    outlier_amplitude: float = 10.0
    noise_sigma: float = 0.0
    seed: int = 0
    outlier_channel_fraction: float = 0.25
    text_prefix: int = 0
    text_suffix: int = 0
    dtype: str = "f32"

    def __post_init__(self):
        for name in ("num_layers", "kv_heads", "head_dim", "seq_len", "base_modes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.base_modes > self.seq_len:
            raise ValueError(f"base_modes ({self.base_modes}) exceeds seq_len ({self.seq_len})")
        if not 0 <= self.outliers_per_layer <= self.seq_len:
            raise ValueError(f"outliers_per_layer must lie in [0, {self.seq_len}], got {self.outliers_per_layer}")
        if min(self.base_amplitude, self.outlier_amplitude, self.noise_sigma) < 0:
            raise ValueError("amplitudes and noise_sigma must be >= 0")
        if not 0 < self.outlier_channel_fraction <= 1:
            raise ValueError("outlier_channel_fraction must lie in (0, 1]")
        if self.text_prefix < 0 or self.text_suffix < 0 or self.text_prefix + self.text_suffix > self.seq_len:
            raise ValueError("text_prefix + text_suffix must fit in seq_len")
        if self.dtype not in ("f32", "f16"):
            raise ValueError(f"dtype must be 'f32' or 'f16', got {self.dtype!r}")

    @property
    def separated(self) -> bool:
        """True when spikes are at least 10x the body amplitude plus noise."""
        return self.outlier_amplitude >= 10 * (self.base_amplitude + self.noise_sigma)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthTruth:
    planted: list[np.ndarray]

    def to_dict(self) -> dict:
        return {"planted": [[int(i) for i in p] for p in self.planted]}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthTruth":
        return cls([np.asarray(p, dtype=np.int64) for p in d["planted"]])


def _body(rng, spec: SynthSpec) -> np.ndarray:
    n, modes = spec.seq_len, spec.base_modes
    i = np.arange(n)
    basis = np.cos(np.pi * np.arange(modes)[:, None] * (2 * i[None, :] + 1) / (2 * n))  # [modes, N]
    w = rng.uniform(-1.0, 1.0, size=(spec.kv_heads, spec.head_dim, modes)) * (spec.base_amplitude / modes)
    return np.einsum("hdm,mn->hnd", w, basis)


def _layer(rng, spec: SynthSpec, planted: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, n, d = spec.kv_heads, spec.seq_len, spec.head_dim
    n_hot = max(1, int(round(spec.outlier_channel_fraction * d)))
    out = []
    for _ in range(2):  # keys, then values
        x = _body(rng, spec)
        if spec.noise_sigma > 0:
            x += rng.normal(0.0, spec.noise_sigma, size=x.shape)
        for p in planted:
            for head in range(h):
                ch = rng.choice(d, size=n_hot, replace=False)
                x[head, p, ch] += spec.outlier_amplitude * rng.choice([-1.0, 1.0], size=n_hot)
        out.append(x.astype(np.float32))
    if spec.dtype == "f16":
        out = [t.astype(np.float16).astype(np.float32) for t in out]
    return out[0], out[1]


def generate(spec: SynthSpec) -> tuple[KvDump, SynthTruth]:
    """Deterministic in ``spec.seed``; each layer draws from its own (seed, layer) stream."""
    layers, planted = [], []
    for l in range(spec.num_layers):
        rng = np.random.default_rng([spec.seed, l])
        pos = np.sort(rng.choice(spec.seq_len, size=spec.outliers_per_layer, replace=False)).astype(np.int64)
        k, v = _layer(rng, spec, pos)
        layers.append(LayerKv(k, v, l))
        planted.append(pos)
    tags = np.full(spec.seq_len, VISION, dtype=np.uint8)
    tags[: spec.text_prefix] = TEXT
    if spec.text_suffix:
        tags[spec.seq_len - spec.text_suffix:] = TEXT
    return KvDump(layers, tags, spec.dtype), SynthTruth(planted)


def recall(retained, planted) -> float:
    """Fraction of planted positions found in ``retained`` (1.0 when nothing was planted)."""
    planted = np.asarray(planted)
    if planted.size == 0:
        return 1.0
    return float(np.isin(planted, retained).sum()) / planted.size
