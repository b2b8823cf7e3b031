"""Total-variation + group-Lasso penalty on the lag blocks and its prox."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigError, DimensionError, DomainError
from .likelihood import ModelParams, as_coef


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty levels and the ``(offset, length)`` of every penalized block.

    The baseline coefficients are never part of a block.
    """

    gamma_tv: float = 0.0
    gamma_gl: float = 0.0
    block_layout: tuple = ()

    def __post_init__(self):
        if not (self.gamma_tv >= 0 and self.gamma_gl >= 0):
            raise ConfigError(f"penalty levels must be >= 0, got tv={self.gamma_tv}, gl={self.gamma_gl}")
        layout = tuple((int(o), int(n)) for o, n in self.block_layout)
        object.__setattr__(self, "block_layout", layout)
        spans = sorted(layout)
        for (o1, n1), (o2, _) in zip(spans, spans[1:]):
            if o1 + n1 > o2:
                raise ConfigError("penalty blocks overlap")

    @classmethod
    def for_layout(cls, n_baseline_groups: int, n_drugs: int, n_lags: int,
                   gamma_tv: float = 0.0, gamma_gl: float = 0.0) -> "PenaltyConfig":
        layout = tuple((n_baseline_groups + j * n_lags, n_lags) for j in range(n_drugs))
        return cls(float(gamma_tv), float(gamma_gl), layout)

    @classmethod
    def for_params(cls, params, gamma_tv: float = 0.0, gamma_gl: float = 0.0) -> "PenaltyConfig":
        """Layout taken from a ``ModelParams`` or a ``LaggedDesign``."""
        return cls.for_layout(params.n_baseline_groups, params.n_drugs, params.n_lags, gamma_tv, gamma_gl)

    def with_gammas(self, gamma_tv: float, gamma_gl: float) -> "PenaltyConfig":
        return PenaltyConfig(float(gamma_tv), float(gamma_gl), self.block_layout)

    def arrays(self):
        starts = np.array([o for o, _ in self.block_layout], dtype=np.int64)
        lengths = np.array([n for _, n in self.block_layout], dtype=np.int64)
        return starts, lengths


def _check_layout(coef: np.ndarray, config: PenaltyConfig):
    for o, n in config.block_layout:
        if o < 0 or o + n > coef.size:
            raise DimensionError(f"penalty block ({o}, {n}) outside a vector of {coef.size} coefficients")


def penalty_value(params, config: PenaltyConfig) -> float:
    coef = as_coef(params)
    _check_layout(coef, config)
    tv = gl = 0.0
    for o, n in config.block_layout:
        block = coef[o:o + n]
        tv += np.abs(np.diff(block)).sum()
        gl += np.sqrt(block @ block)
    return float(config.gamma_tv * tv + config.gamma_gl * gl)


def prox_tv(block, threshold: float) -> np.ndarray:
    """Exact prox of ``threshold * sum |u[k+1] - u[k]|``."""
    if threshold < 0:
        raise DomainError(f"threshold must be >= 0, got {threshold}")
    block = np.ascontiguousarray(block, dtype=float)
    out = np.empty_like(block)
    _kernels.tv_denoise(block, float(threshold), out)
    return out


def prox_group_l2(block, threshold: float) -> np.ndarray:
    """Group soft-thresholding ``max(0, 1 - threshold/||v||) v``."""
    if threshold < 0:
        raise DomainError(f"threshold must be >= 0, got {threshold}")
    out = np.array(block, dtype=float)
    _kernels.group_soft_threshold(out, float(threshold))
    return out


def prox_penalty(params, config: PenaltyConfig, step: float):
    """Prox of ``step * pen``: TV prox then group soft-thresholding, per block.

    Returns the same type as ``params`` (``ModelParams`` or array).
    """
    if not step > 0:
        raise DomainError(f"step must be > 0, got {step}")
    coef = np.array(as_coef(params), dtype=float)
    _check_layout(coef, config)
    starts, lengths = config.arrays()
    buf = np.empty(int(lengths.max()) if lengths.size else 0)
    _kernels.prox_blocks(coef, starts, lengths, step * config.gamma_tv, step * config.gamma_gl, buf)
    if isinstance(params, ModelParams):
        return params.like(coef)
    return coef
