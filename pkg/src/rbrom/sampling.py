"""Parameter sampling plans and input normalization.

Axes are described in a sampling coordinate: an optional monotone
transform maps the sampling value lam to the physical parameter mu.
Grids and Latin hypercube designs are drawn uniformly in lam; the
network normalization maps lam affinely onto [-1, 1], so normalized
inputs are uniform over the same space the training set was drawn from.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = [
    "AxisSpec",
    "GridAxis",
    "ParamNormalization",
    "grid_sample",
    "lhs_sample",
    "normalization_from_box",
    "normalization_from_grid",
]

# name -> (forward: lam -> mu, inverse: mu -> lam)
_TRANSFORMS = {
    "identity": (lambda lam: lam, lambda mu: mu),
    "pow10": (lambda lam: 10.0 ** lam,
              lambda mu: np.log10(mu)),
    "negpow10": (lambda lam: -(10.0 ** lam),
                 lambda mu: np.log10(-np.asarray(mu, dtype=np.float64))),
}


def _lookup(transform):
    try:
        return _TRANSFORMS[transform]
    except KeyError:
        raise ConfigError(f"unknown axis transform {transform!r}") from None


@dataclass(frozen=True)
class AxisSpec:
    """One parameter axis: transform name and bounds in sampling space."""

    transform: str
    lo: float
    hi: float

    def __post_init__(self):
        _lookup(self.transform)
        if not self.hi > self.lo:
            raise ConfigError(
                f"axis bounds must satisfy lo < hi, got [{self.lo}, {self.hi}]")

    def forward(self, lam):
        return _TRANSFORMS[self.transform][0](np.asarray(lam, dtype=np.float64))

    def inverse(self, mu):
        return _TRANSFORMS[self.transform][1](np.asarray(mu, dtype=np.float64))


@dataclass(frozen=True)
class GridAxis:
    """An AxisSpec plus a point count, for tensor grids."""

    transform: str
    lo: float
    hi: float
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("grid axis needs at least one point")
        AxisSpec(self.transform, self.lo, self.hi)

    @property
    def spec(self):
        return AxisSpec(self.transform, self.lo, self.hi)


@dataclass(frozen=True)
class ParamNormalization:
    """Affine map of each parameter axis onto [-1, 1].

    Physical values are first pulled back through the axis transform, so
    e.g. a "pow10" axis is normalized in log10 space.
    """

    axes: tuple

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(self.axes))
        for ax in self.axes:
            if not isinstance(ax, AxisSpec):
                raise ConfigError("ParamNormalization needs AxisSpec axes")

    @property
    def dim(self):
        return len(self.axes)

    def normalize(self, mu):
        """Map physical parameters (n, p) or (p,) into [-1, 1]^p."""
        arr = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        if arr.shape[1] != self.dim:
            raise ConfigError(
                f"normalize: got {arr.shape[1]} components, expected {self.dim}")
        out = np.empty_like(arr)
        for j, ax in enumerate(self.axes):
            lam = ax.inverse(arr[:, j])
            out[:, j] = 2.0 * (lam - ax.lo) / (ax.hi - ax.lo) - 1.0
        return out if np.asarray(mu).ndim == 2 else out[0]

    def to_dict(self):
        return {"axes": [{"transform": ax.transform, "lo": ax.lo, "hi": ax.hi}
                         for ax in self.axes]}

    @classmethod
    def from_dict(cls, data):
        try:
            axes = [AxisSpec(d["transform"], float(d["lo"]), float(d["hi"]))
                    for d in data["axes"]]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad normalization record: {exc}") from exc
        return cls(tuple(axes))


def normalization_from_grid(axes) -> ParamNormalization:
    return ParamNormalization(tuple(ax.spec for ax in axes))


def normalization_from_box(domain, transforms=None) -> ParamNormalization:
    transforms = transforms or ["identity"] * len(domain)
    if len(transforms) != len(domain):
        raise ConfigError("domain and transform lists disagree in length")
    return ParamNormalization(tuple(
        AxisSpec(t, float(lo), float(hi))
        for t, (lo, hi) in zip(transforms, domain)))


def grid_sample(axes):
    """Tensor-product grid over GridAxis entries.

    Returns an (n_total, d) array of physical parameters. The first axis
    varies slowest (meshgrid "ij" order, row-major flattening).
    """
    axes = list(axes)
    if not axes:
        raise ConfigError("grid_sample: no axes")
    values = [ax.spec.forward(np.linspace(ax.lo, ax.hi, ax.count))
              for ax in axes]
    mesh = np.meshgrid(*values, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def lhs_sample(domain, n, seed, transforms=None):
    """Latin hypercube design of n points over a box.

    Parameters
    ----------
    domain : sequence of (lo, hi)
        Axis bounds in sampling space.
    n : int
        Sample count; each axis is split into n strata holding one
        sample each.
    seed : int
        Seed for the generator; fixed seed gives a fixed design.
    transforms : sequence of transform names, optional
        Per-axis transforms applied after sampling (default identity).

    Returns
    -------
    (n, d) array of physical parameters.
    """
    if n < 1:
        raise ConfigError("lhs_sample: need n >= 1")
    norm = normalization_from_box(domain, transforms)
    rng = np.random.default_rng(seed)
    cols = []
    for ax in norm.axes:
        perm = rng.permutation(n)
        u = rng.uniform(size=n)
        lam = ax.lo + (perm + u) / n * (ax.hi - ax.lo)
        cols.append(ax.forward(lam))
    return np.column_stack(cols)
