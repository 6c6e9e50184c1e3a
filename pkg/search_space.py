"""
Search space for DPSGD hyperparameter tuning.
Defines (sigma, eta) points, the quantized lattice they live on, and the
sampling/mutation primitives every search strategy shares.
"""

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

LINEAR = "linear"
LOG = "log"

# Slack for float error when counting lattice points and breaking ties.
_LATTICE_TOL = 1e-9


@dataclass(frozen=True)
class HyperParams:
    """One point (sigma, eta) of the search space."""
    sigma: float
    eta: float

    def __post_init__(self):
        for name in ("sigma", "eta"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise ValueError(f"{name} must be finite and > 0, got {value}")

    def as_tuple(self) -> Tuple[float, float]:
        return (self.sigma, self.eta)


@dataclass(frozen=True)
class Dimension:
    """
    One searched hyperparameter.

    For a logarithmic dimension `step` is measured in decades, so the lattice
    is 10**(log10(lo) + k*step).
    """
    name: str
    lo: float
    hi: float
    step: float
    scale: str = LINEAR

    def __post_init__(self):
        if self.scale not in (LINEAR, LOG):
            raise ValueError(f"{self.name}: unknown scale {self.scale!r}")
        if not self.lo <= self.hi:
            raise ValueError(f"{self.name}: lo ({self.lo}) must not exceed hi ({self.hi})")
        if self.step <= 0:
            raise ValueError(f"{self.name}: step must be > 0")
        if self.scale == LOG and self.lo <= 0:
            raise ValueError(f"{self.name}: logarithmic scale needs lo > 0")

    @property
    def u_lo(self) -> float:
        return math.log10(self.lo) if self.scale == LOG else self.lo

    @property
    def u_hi(self) -> float:
        return math.log10(self.hi) if self.scale == LOG else self.hi

    @property
    def size(self) -> int:
        return int(math.floor((self.u_hi - self.u_lo) / self.step + _LATTICE_TOL)) + 1

    def to_unit(self, value: float) -> float:
        """Map a value into the dimension's working domain (log10 for log scale)."""
        if self.scale == LOG:
            return math.log10(value) if value > 0 else -math.inf
        return value

    def point(self, k: int) -> float:
        u = self.u_lo + k * self.step
        return 10.0 ** u if self.scale == LOG else u

    def points(self) -> List[float]:
        return [self.point(k) for k in range(self.size)]

    def index_of(self, value: float) -> int:
        """Nearest lattice index, ties toward lo, clamped to the lattice."""
        if math.isnan(value):
            raise ValueError(f"{self.name}: cannot quantize NaN")
        u = self.to_unit(value)
        if u == -math.inf:
            return 0
        if u == math.inf:
            return self.size - 1
        k = math.ceil((u - self.u_lo) / self.step - 0.5 - _LATTICE_TOL)
        return min(max(k, 0), self.size - 1)

    def normalize(self, value: float) -> float:
        """Position of value within [lo, hi] as a fraction, in the declared scale."""
        span = self.u_hi - self.u_lo
        if span == 0:
            return 0.0
        return (self.to_unit(value) - self.u_lo) / span


@dataclass(frozen=True)
class SearchSpace:
    """Ordered dimensions; exactly sigma then eta."""
    dims: Tuple[Dimension, ...]

    def __post_init__(self):
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate dimension names: {names}")
        if names != ["sigma", "eta"]:
            raise ValueError(f"search space must declare sigma then eta, got {names}")
        for dim in self.dims:
            if dim.lo <= 0:
                raise ValueError(f"{dim.name}: lattice must be strictly positive (lo={dim.lo})")

    @classmethod
    def default(cls) -> "SearchSpace":
        return cls((
            Dimension("sigma", 0.5, 5.0, 0.1, LINEAR),
            Dimension("eta", 1e-3, 1.0, 0.1, LOG),
        ))

    @property
    def sigma(self) -> Dimension:
        return self.dims[0]

    @property
    def eta(self) -> Dimension:
        return self.dims[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.sigma.size, self.eta.size)

    @property
    def cardinality(self) -> int:
        return self.sigma.size * self.eta.size

    def point_at(self, i: int, j: int) -> HyperParams:
        return HyperParams(self.sigma.point(i), self.eta.point(j))

    def indices_of(self, hp: HyperParams) -> Tuple[int, int]:
        return (self.sigma.index_of(hp.sigma), self.eta.index_of(hp.eta))

    def normalize(self, hp: HyperParams) -> np.ndarray:
        """Surrogate input: each coordinate mapped to [0, 1] in its declared scale."""
        return np.array([self.sigma.normalize(hp.sigma), self.eta.normalize(hp.eta)])

    def contains(self, hp: HyperParams) -> bool:
        """True when hp sits exactly on the lattice."""
        return quantize(self, hp) == hp


def sample_uniform(space: SearchSpace, rng: np.random.Generator) -> HyperParams:
    """Draw each dimension independently and uniformly over its lattice points."""
    i = int(rng.integers(0, space.sigma.size))
    j = int(rng.integers(0, space.eta.size))
    return space.point_at(i, j)


def quantize(space: SearchSpace, raw: HyperParams) -> HyperParams:
    """Snap to the nearest lattice point (ties toward lo), clamped to [lo, hi]."""
    return space.point_at(space.sigma.index_of(raw.sigma), space.eta.index_of(raw.eta))


def _quantize_values(space: SearchSpace, sigma: float, eta: float) -> HyperParams:
    # Raw values may be non-positive before clamping, so skip HyperParams validation.
    return space.point_at(space.sigma.index_of(sigma), space.eta.index_of(eta))


def mutate(space: SearchSpace, point: HyperParams, strength: float,
           rng: np.random.Generator) -> HyperParams:
    """
    Gaussian-perturb each dimension then quantize.

    Args:
        space: the lattice to stay on
        point: lattice point to perturb
        strength: standard deviation as a fraction of each dimension's range
            (measured in decades for logarithmic dimensions); 0 returns point
        rng: the caller's seeded stream

    Returns:
        A lattice point near `point`.
    """
    if not 0 <= strength <= 1:
        raise ValueError(f"mutation strength must be in [0, 1], got {strength}")
    if strength == 0:
        return quantize(space, point)

    perturbed = []
    for dim, value in zip(space.dims, point.as_tuple()):
        u = dim.to_unit(value) + rng.normal(0.0, strength * (dim.u_hi - dim.u_lo))
        perturbed.append(10.0 ** u if dim.scale == LOG else u)
    return _quantize_values(space, *perturbed)


def spread_indices(size: int, count: int) -> List[int]:
    """`count` equally spaced indices over 0..size-1, rounded half up."""
    if count == 1:
        return [0]
    return [(2 * i * (size - 1) + (count - 1)) // (2 * (count - 1)) for i in range(count)]


def enumerate_grid(space: SearchSpace, per_dim: Sequence[int]) -> List[HyperParams]:
    """Cartesian product of equally spaced lattice subsets, sigma outer, eta inner."""
    if len(per_dim) != len(space.dims):
        raise ValueError(f"expected {len(space.dims)} per-dimension counts, got {len(per_dim)}")
    for dim, count in zip(space.dims, per_dim):
        if count < 1 or count > dim.size:
            raise ValueError(
                f"grid count {count} for {dim.name} outside 1..{dim.size} (lattice size)"
            )
    sigma_idx = spread_indices(space.sigma.size, per_dim[0])
    eta_idx = spread_indices(space.eta.size, per_dim[1])
    return [space.point_at(i, j) for i in sigma_idx for j in eta_idx]
