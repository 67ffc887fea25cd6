"""Gaussian-process Bayesian optimization over finite hyperparameter grids.

Each adapter family exposes a small discrete search space. Trials start
with a few seeded random draws, then pick the untried grid point with the
highest expected improvement under a GP posterior (RBF kernel on encoded
points, objectives standardized per fit). Grids are small enough that the
acquisition is maximized exhaustively.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .adapters import (
    AdaptionPromptConfig,
    LoraConfig,
    PrefixConfig,
    PromptConfig,
    PTuningConfig,
)
from .tensor import make_rng

DEFAULT_MAX_TRIALS = 20
N_RANDOM_INIT = 5
LENGTH_SCALE = 0.5
NOISE = 1e-6
EI_XI = 0.01


class NumericError(RuntimeError):
    """Raised when linear algebra inside the GP cannot proceed."""


# ---------------------------------------------------------------------------
# Search spaces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dimension:
    name: str
    kind: str  # ordinal | categorical | boolean
    values: tuple

    def __post_init__(self):
        if self.kind not in ("ordinal", "categorical", "boolean"):
            raise ValueError(f"unknown dimension kind {self.kind!r}")
        if not self.values:
            raise ValueError(f"dimension {self.name!r} has no values")
        if self.kind == "boolean" and tuple(self.values) != (False, True):
            raise ValueError("boolean dimensions enumerate (False, True)")

    @property
    def width(self) -> int:
        """Number of encoded coordinates this dimension occupies."""
        return 1 if self.kind == "ordinal" else len(self.values)


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple[Dimension, ...]

    @property
    def size(self) -> int:
        return int(np.prod([len(d.values) for d in self.dims]))

    def grid(self) -> list[dict]:
        """Every point, in deterministic cartesian order."""
        return [dict(zip([d.name for d in self.dims], combo))
                for combo in itertools.product(*[d.values for d in self.dims])]

    def validate(self, point: dict) -> None:
        if set(point) != {d.name for d in self.dims}:
            raise ValueError(f"point keys {sorted(point)} do not match space dimensions")
        for d in self.dims:
            if point[d.name] not in d.values:
                raise ValueError(f"{d.name}={point[d.name]!r} not in grid {d.values}")

    def key(self, point: dict) -> tuple:
        return tuple(point[d.name] for d in self.dims)


def encode(point: dict, space: SearchSpace) -> np.ndarray:
    """Map a grid point into [0, 1]^d.

    Ordinal values map by grid-rank position (which, for the power-of-two
    grids here, is their log2 spacing); categoricals and booleans one-hot.
    """
    space.validate(point)
    coords: list[float] = []
    for d in space.dims:
        v = point[d.name]
        if d.kind == "ordinal":
            i = d.values.index(v)
            coords.append(0.0 if len(d.values) == 1 else i / (len(d.values) - 1))
        else:
            one_hot = [0.0] * len(d.values)
            one_hot[d.values.index(v)] = 1.0
            coords.extend(one_hot)
    return np.asarray(coords, dtype=np.float64)


def _ordinal(name, *values):
    return Dimension(name, "ordinal", tuple(values))


_NVT = _ordinal("num_virtual_tokens", 1, 5, 10, 15, 20)

_PRETRAIN_SPACES: dict[str, SearchSpace] = {
    "lora": SearchSpace((
        _ordinal("r", 2, 4, 8, 16),
        _ordinal("alpha", 4, 8, 16, 32),
        _ordinal("dropout", 0.0, 0.1, 0.2),
    )),
    "prefix": SearchSpace((
        _NVT,
        Dimension("prefix_projection", "boolean", (False, True)),
    )),
    "prompt": SearchSpace((
        _NVT,
        Dimension("prompt_init", "categorical", ("text", "random")),
    )),
    "ptuning": SearchSpace((
        _NVT,
        Dimension("reparameterisation", "categorical", ("MLP", "LSTM")),
        _ordinal("hidden_size", 64, 128, 256, 768),
        _ordinal("num_layers", 1, 2, 4, 8, 12),
        _ordinal("dropout", 0.0, 0.1, 0.2),
    )),
    "adaption": SearchSpace((
        _ordinal("adapter_length", 5, 10),
        _ordinal("adapter_layers", 10, 20, 30),
    )),
}


def pretrain_space(technique: str) -> SearchSpace:
    """The per-technique grid swept during domain-adaptive pretraining."""
    try:
        return _PRETRAIN_SPACES[technique]
    except KeyError:
        raise ValueError(f"unknown technique {technique!r}") from None


def finetune_space(technique: str) -> SearchSpace:
    """Downstream sweeps are restricted to the low-rank adapter."""
    if technique != "lora":
        raise ValueError(f"downstream sweeps support only 'lora', got {technique!r}")
    return _PRETRAIN_SPACES["lora"]


def config_from_point(technique: str, point: dict):
    """Instantiate the adapter config a grid point describes."""
    if technique == "lora":
        return LoraConfig(r=point["r"], alpha=point["alpha"], dropout=point["dropout"])
    if technique == "prefix":
        return PrefixConfig(num_virtual_tokens=point["num_virtual_tokens"],
                            prefix_projection=point["prefix_projection"])
    if technique == "prompt":
        return PromptConfig(num_virtual_tokens=point["num_virtual_tokens"],
                            init=point["prompt_init"])
    if technique == "ptuning":
        return PTuningConfig(num_virtual_tokens=point["num_virtual_tokens"],
                             reparameterisation=point["reparameterisation"],
                             hidden=point["hidden_size"],
                             num_layers=point["num_layers"],
                             dropout=point["dropout"])
    if technique == "adaption":
        return AdaptionPromptConfig(adapter_length=point["adapter_length"],
                                    adapter_layers=point["adapter_layers"])
    raise ValueError(f"unknown technique {technique!r}")


# ---------------------------------------------------------------------------
# Gaussian process
# ---------------------------------------------------------------------------


@dataclass
class GpState:
    x: np.ndarray            # [n, d] encoded points
    y_std: np.ndarray        # standardized objectives (maximize orientation)
    y_mean: float
    y_scale: float
    chol: np.ndarray
    alpha: np.ndarray
    lengthscale: float = LENGTH_SCALE
    noise: float = NOISE

    @property
    def best_std(self) -> float:
        return float(self.y_std.max())


def _rbf(a: np.ndarray, b: np.ndarray, lengthscale: float) -> np.ndarray:
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return np.exp(-d2 / (2.0 * lengthscale ** 2))


def gp_fit(observations: list[tuple[np.ndarray, float]],
           lengthscale: float = LENGTH_SCALE, noise: float = NOISE) -> GpState:
    """Fit GP regression with an RBF kernel and diagonal jitter.

    Objectives are standardized to zero mean / unit variance per fit.
    Duplicate points must be rejected upstream; they make the jittered
    kernel matrix numerically singular.
    """
    if not observations:
        raise ValueError("gp_fit needs at least one observation")
    x = np.stack([np.asarray(p, dtype=np.float64) for p, _ in observations])
    y = np.asarray([v for _, v in observations], dtype=np.float64)
    y_mean = float(y.mean())
    y_scale = float(y.std())
    if y_scale < 1e-12:
        y_scale = 1.0
    y_std = (y - y_mean) / y_scale
    k = _rbf(x, x, lengthscale) + noise * np.eye(len(x))
    try:
        chol = np.linalg.cholesky(k)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"kernel matrix not positive definite: {e}") from None
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, y_std))
    return GpState(x=x, y_std=y_std, y_mean=y_mean, y_scale=y_scale,
                   chol=chol, alpha=alpha, lengthscale=lengthscale, noise=noise)


def gp_posterior(state: GpState, point: np.ndarray) -> tuple[float, float]:
    """Posterior (mean, variance) at one encoded point, standardized scale."""
    mu, var = gp_posterior_batch(state, np.asarray(point, dtype=np.float64)[None, :])
    return float(mu[0]), float(var[0])


def gp_posterior_batch(state: GpState, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ks = _rbf(points, state.x, state.lengthscale)  # [m, n]
    mu = ks @ state.alpha
    v = np.linalg.solve(state.chol, ks.T)  # [n, m]
    var = np.clip(1.0 - (v * v).sum(axis=0), 0.0, None)
    return mu, var


def expected_improvement(state: GpState, points: np.ndarray, xi: float = EI_XI) -> np.ndarray:
    """EI of candidate points against the incumbent best, maximize orientation."""
    mu, var = gp_posterior_batch(state, points)
    sigma = np.sqrt(var)
    imp = mu - state.best_std - xi
    ei = np.where(imp > 0, imp, 0.0)
    ok = sigma > 1e-12
    z = np.zeros_like(mu)
    z[ok] = imp[ok] / sigma[ok]
    cdf = 0.5 * (1.0 + np.asarray([math.erf(v / math.sqrt(2.0)) for v in z]))
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    ei_ok = imp * cdf + sigma * pdf
    return np.where(ok, ei_ok, ei)


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------


@dataclass
class TrialRecord:
    point: dict
    objective: float
    trial_index: int
    failed: bool = False

    def to_dict(self) -> dict:
        return {"trial_index": self.trial_index, "point": self.point,
                "objective": self.objective, "failed": self.failed}


def suggest(state: GpState | None, space: SearchSpace, tried: set[tuple],
            rng: np.random.Generator) -> dict:
    """Next point: random while warming up (no GP yet), else the untried
    grid point with maximal expected improvement (exhaustive)."""
    grid = space.grid()
    untried = [p for p in grid if space.key(p) not in tried]
    if not untried:
        raise ValueError("search grid exhausted")
    if state is None:
        return untried[int(rng.integers(len(untried)))]
    xs = np.stack([encode(p, space) for p in untried])
    ei = expected_improvement(state, xs)
    return untried[int(np.argmax(ei))]


@dataclass
class SearchResult:
    best: TrialRecord
    history: list[TrialRecord] = field(default_factory=list)


def search(space: SearchSpace, objective_fn, max_trials: int = DEFAULT_MAX_TRIALS,
           seed: int = 0, direction: str = "maximize",
           n_random: int = N_RANDOM_INIT) -> SearchResult:
    """Sequential budgeted search; returns the best *observed* trial.

    The objective is called once per unique grid point, never more than
    ``max_trials`` times; a raising objective is recorded as worst-possible
    and the search continues. Deterministic per seed.
    """
    if direction not in ("maximize", "minimize"):
        raise ValueError("direction must be 'maximize' or 'minimize'")
    sign = 1.0 if direction == "maximize" else -1.0
    rng = make_rng(seed)
    tried: set[tuple] = set()
    history: list[TrialRecord] = []
    oriented: list[tuple[np.ndarray, float]] = []  # finite observations only

    for t in range(max_trials):
        if len(tried) >= space.size:
            break
        state = None
        if t >= n_random and oriented:
            observations = oriented
            if len(history) > len(oriented):  # impute failures as worst-1
                worst = min(v for _, v in oriented)
                observations = oriented + [
                    (encode(h.point, space), worst - 1.0) for h in history if h.failed
                ]
            state = gp_fit(observations)
        point = suggest(state, space, tried, rng)
        tried.add(space.key(point))
        try:
            value = float(objective_fn(point))
            history.append(TrialRecord(point, value, t))
            oriented.append((encode(point, space), sign * value))
        except Exception:
            history.append(TrialRecord(point, sign * (-math.inf), t, failed=True))

    if not history:
        raise ValueError("search produced no trials (empty budget?)")
    best = max(history, key=lambda r: -math.inf if r.failed else sign * r.objective)
    return SearchResult(best=best, history=history)
