"""Target energies with analytic gradients, base densities, and data samplers.

Every target exposes `energy(x) -> (N,)` and `score(x) -> (N, d)` with
score = d energy / dx.  Energies are defined up to an additive constant; all
gradient estimators only consume the score, so normalization never matters.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError

LOG_2PI = np.log(2.0 * np.pi)

# beyond this dimension the 2^d mode enumeration is replaced by the exact
# per-coordinate factorization (the mixture is a product of 1-D pairs)
_GMM_ENUM_MAX_DIM = 12


@dataclass(frozen=True)
class GmmTarget:
    """Gaussian mixture with equal-weight modes at every corner of {-1,+1}^d."""

    dim: int
    variance: float = 0.5

    def __post_init__(self):
        if self.dim < 1 or self.variance <= 0:
            raise ConfigError("GmmTarget needs dim >= 1 and variance > 0")

    def energy(self, x) -> np.ndarray:
        x, squeeze = _as_batch(x, self.dim)
        if self.dim <= _GMM_ENUM_MAX_DIM:
            e = self._energy_enumerated(x)
        else:
            e = self._energy_factored(x)
        return e[0] if squeeze else e

    def _log_norm(self) -> float:
        return 0.5 * self.dim * (LOG_2PI + np.log(self.variance))

    def _energy_enumerated(self, x: np.ndarray) -> np.ndarray:
        # log-sum-exp over all 2^d corner modes
        corners = np.array(list(itertools.product((-1.0, 1.0), repeat=self.dim)))
        sq = ((x[:, None, :] - corners[None, :, :]) ** 2).sum(axis=2)
        expo = -sq / (2.0 * self.variance)
        m = expo.max(axis=1)
        lse = m + np.log(np.exp(expo - m[:, None]).sum(axis=1))
        return -(lse - self._log_norm())

    def _energy_factored(self, x: np.ndarray) -> np.ndarray:
        # product over coordinates of two-mode 1-D mixtures
        a = -((x + 1.0) ** 2) / (2.0 * self.variance)
        b = -((x - 1.0) ** 2) / (2.0 * self.variance)
        m = np.maximum(a, b)
        lse = m + np.log(np.exp(a - m) + np.exp(b - m))
        return -(lse.sum(axis=1) - self._log_norm())

    def score(self, x) -> np.ndarray:
        """Softmax-weighted pull toward the two modes, per coordinate."""
        x, squeeze = _as_batch(x, self.dim)
        a = -((x + 1.0) ** 2) / (2.0 * self.variance)
        b = -((x - 1.0) ** 2) / (2.0 * self.variance)
        m = np.maximum(a, b)
        ea, eb = np.exp(a - m), np.exp(b - m)
        wa = ea / (ea + eb)
        g = (wa * (x + 1.0) + (1.0 - wa) * (x - 1.0)) / self.variance
        return g[0] if squeeze else g

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Exact draws: pick a corner uniformly, add Gaussian noise."""
        signs = rng.integers(0, 2, size=(n, self.dim)) * 2.0 - 1.0
        return signs + np.sqrt(self.variance) * rng.standard_normal((n, self.dim))


@dataclass(frozen=True)
class Phi4Target:
    """Scalar lattice field with nearest-neighbor links on a periodic grid.

    energy(phi) = sum over links (phi_u - phi_v)^2
                + sum over sites (m2 phi_u^2 + lam phi_u^4)

    Sites are indexed row-major over an (l1, l2) grid; each site contributes
    two links (right and down neighbors with periodic wrap).
    """

    shape: tuple[int, int]
    m2: float = -4.0
    lam: float = 8.0

    def __post_init__(self):
        l1, l2 = self.shape
        if l1 < 1 or l2 < 1:
            raise ConfigError("lattice extents must be positive")
        if self.lam < 0:
            raise ConfigError("quartic coupling must be nonnegative")

    @property
    def dim(self) -> int:
        return self.shape[0] * self.shape[1]

    def _grid(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(x.shape[0], self.shape[0], self.shape[1])

    def energy(self, x) -> np.ndarray:
        x, squeeze = _as_batch(x, self.dim)
        phi = self._grid(x)
        kin = ((phi - np.roll(phi, -1, axis=1)) ** 2).sum(axis=(1, 2))
        kin += ((phi - np.roll(phi, -1, axis=2)) ** 2).sum(axis=(1, 2))
        pot = (self.m2 * x * x + self.lam * x ** 4).sum(axis=1)
        e = kin + pot
        return e[0] if squeeze else e

    def score(self, x) -> np.ndarray:
        x, squeeze = _as_batch(x, self.dim)
        phi = self._grid(x)
        nbrs = (np.roll(phi, 1, axis=1) + np.roll(phi, -1, axis=1)
                + np.roll(phi, 1, axis=2) + np.roll(phi, -1, axis=2))
        g = 2.0 * (4.0 * phi - nbrs)
        g = g.reshape(x.shape) + 2.0 * self.m2 * x + 4.0 * self.lam * x ** 3
        return g[0] if squeeze else g


@dataclass(frozen=True)
class SelfTarget:
    """Target whose energy is the negative base log density, constant included.

    Composing an identity flow with this target is an exactly solved problem:
    importance weights are all one and path-gradient seeds vanish pointwise.
    """

    base: "BaseDensity"

    @property
    def dim(self) -> int:
        return self.base.dim

    def energy(self, x) -> np.ndarray:
        lq, _ = self.base.log_density_and_grad(x)
        return -lq

    def score(self, x) -> np.ndarray:
        _, g = self.base.log_density_and_grad(x)
        return -g


@dataclass(frozen=True)
class ShiftedTarget:
    """Wrap a target with a constant energy offset (normalization probe)."""

    inner: object
    offset: float

    @property
    def dim(self) -> int:
        return self.inner.dim

    def energy(self, x) -> np.ndarray:
        return self.inner.energy(x) + self.offset

    def score(self, x) -> np.ndarray:
        return self.inner.score(x)


def _as_batch(x, d) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != d:
        raise ConfigError(f"expected points of dimension {d}, got shape {x.shape}")
    return x, squeeze


@dataclass(frozen=True)
class BaseDensity:
    """Base distribution of the flow: standard normal or a uniform box."""

    kind: str
    dim: int
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if self.kind not in ("standard_normal", "uniform"):
            raise ConfigError(f"unknown base density kind {self.kind!r}")
        if self.dim < 1:
            raise ConfigError("base density dimension must be positive")
        if self.kind == "uniform" and not self.b > self.a:
            raise ConfigError("uniform base needs b > a")

    def log_density_and_grad(self, x) -> tuple[np.ndarray, np.ndarray]:
        x, squeeze = _as_batch(x, self.dim)
        if self.kind == "standard_normal":
            lq = -0.5 * (x * x).sum(axis=1) - 0.5 * self.dim * LOG_2PI
            g = -x
        else:
            if np.any(x <= self.a) or np.any(x >= self.b):
                raise UsageError("uniform base evaluated outside its support")
            lq = np.full(x.shape[0], -self.dim * np.log(self.b - self.a))
            g = np.zeros_like(x)
        if squeeze:
            return lq[0], g[0]
        return lq, g

    def log_density(self, x) -> np.ndarray:
        return self.log_density_and_grad(x)[0]

    def grad_log_density(self, x) -> np.ndarray:
        return self.log_density_and_grad(x)[1]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "standard_normal":
            return rng.standard_normal((n, self.dim))
        return rng.uniform(self.a, self.b, size=(n, self.dim))


def standard_normal(dim: int) -> BaseDensity:
    return BaseDensity("standard_normal", dim)


def uniform_interval(dim: int, a: float, b: float) -> BaseDensity:
    return BaseDensity("uniform", dim, a, b)


def phi4_metropolis_samples(
    target: Phi4Target,
    n: int,
    rng: np.random.Generator,
    *,
    burn_in: int = 500,
    thin: int = 10,
    step: float = 0.5,
) -> np.ndarray:
    """Random-walk Metropolis fixture generator for lattice targets.

    Checkerboard site updates keep the chain valid while vectorizing the
    acceptance step.  This is a test/data fixture, not a production sampler.
    """
    if n < 1:
        raise UsageError("need at least one sample")
    l1, l2 = target.shape
    if l1 % 2 or l2 % 2:
        # checkerboard coloring is inconsistent on odd periodic extents
        raise ConfigError("metropolis fixture requires even lattice extents")
    ii, jj = np.meshgrid(np.arange(l1), np.arange(l2), indexing="ij")
    parity = ((ii + jj) % 2).astype(bool)
    phi = rng.standard_normal((l1, l2)) * 0.1
    out = np.empty((n, target.dim))

    def sweep(phi):
        for color in (parity, ~parity):
            prop = phi + step * rng.standard_normal(phi.shape) * color
            nbrs = (np.roll(phi, 1, 0) + np.roll(phi, -1, 0)
                    + np.roll(phi, 1, 1) + np.roll(phi, -1, 1))
            def local(f):
                return 4.0 * f * f - 2.0 * f * nbrs + target.m2 * f * f + target.lam * f ** 4
            d_action = local(prop) - local(phi)
            accept = (np.log(rng.random(phi.shape)) < -d_action) & color
            phi = np.where(accept, prop, phi)
        return phi

    for _ in range(burn_in):
        phi = sweep(phi)
    for k in range(n):
        for _ in range(thin):
            phi = sweep(phi)
        out[k] = phi.ravel()
    return out
