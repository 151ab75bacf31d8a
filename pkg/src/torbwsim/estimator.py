"""Attack-resource arithmetic.

The fitted inflation curve maps a cluster size x (relays per dedicated
server) to the achievable inflation factor. From it: how many dedicated
servers are needed to control a target share of network bandwidth, and the
cheapest (cluster size, server count) combination.
"""

import math
from dataclasses import dataclass

import numpy as np

# Fitted power-law-minus-quadratic coefficients for the inflation curve.
CURVE_A = 0.75895138
CURVE_SCALE = 1.44995314
CURVE_EXPONENT = 0.96837148
CURVE_QUAD = 0.03714758
CURVE_OFFSET = 0.07672455

X_MIN = 1
X_MAX = 120


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class InflationModel:
    a: float = CURVE_A
    scale: float = CURVE_SCALE
    exponent: float = CURVE_EXPONENT
    quad: float = CURVE_QUAD
    offset: float = CURVE_OFFSET

    def evaluate(self, x) -> float:
        return (
            self.a * (self.scale * x) ** self.exponent
            - (self.quad * x) ** 2
            - self.offset
        )

    def coefficients(self) -> tuple:
        return (self.a, self.scale, self.exponent, self.quad, self.offset)


DEFAULT_MODEL = InflationModel()


@dataclass(frozen=True)
class ResourceQuery:
    """Inputs for the server-count formula.

    x: relays per dedicated server; b: total network bandwidth (bytes/s);
    p: target controlled-traffic percentage; d: per-server bandwidth (bytes/s).
    """

    x: int
    b: float
    p: float
    d: float

    def __post_init__(self):
        _check_domain(self.x)
        if not 1 <= self.p <= 100:
            raise DomainError("p must be in [1, 100], got %r" % (self.p,))
        if self.b <= 0 or self.d <= 0:
            raise DomainError("bandwidths b and d must be > 0")


def _check_domain(x):
    if isinstance(x, bool) or not isinstance(x, int):
        raise DomainError("cluster size x must be an integer, got %r" % (x,))
    if not X_MIN <= x <= X_MAX:
        raise DomainError(
            "cluster size x=%d outside the fit domain [%d, %d]" % (x, X_MIN, X_MAX)
        )


def inflation_curve(x: int, model: InflationModel = DEFAULT_MODEL) -> float:
    """Inflation factor for a cluster of x relays sharing one server."""
    _check_domain(x)
    return model.evaluate(x)


def _servers_raw(q: ResourceQuery, model: InflationModel) -> float:
    return (2.0 * q.b * (q.p / 100.0)) / (q.d * inflation_curve(q.x, model))


def servers_required(q: ResourceQuery, model: InflationModel = DEFAULT_MODEL) -> int:
    """Dedicated servers needed to reach the target traffic share."""
    return math.ceil(_servers_raw(q, model))


def optimize_cluster(b: float, p: float, d: float,
                     model: InflationModel = DEFAULT_MODEL) -> dict:
    """Pick the cluster size minimizing relays-per-server plus server count.

    Exhaustive search over the 120-point domain; ties resolve to the
    smallest cluster size.
    """
    best = None
    for x in range(X_MIN, X_MAX + 1):
        s = servers_required(ResourceQuery(x=x, b=b, p=p, d=d), model)
        objective = x + s
        if best is None or objective < best["objective"]:
            best = {"x": x, "servers": s, "objective": objective,
                    "total_relays": x * s}
    return best


@dataclass(frozen=True)
class FitResult:
    model: InflationModel
    mse: float
    evaluations: int


def _mse(params, xs, ys):
    a, scale, exponent, quad, offset = params
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    pred = a * (scale * xs) ** exponent - (quad * xs) ** 2 - offset
    resid = pred - ys
    return float(np.mean(resid * resid))


def refit_curve(samples, max_evaluations: int = 100_000,
                step_tolerance: float = 1e-9) -> FitResult:
    """Least-squares refit of the inflation-curve functional form.

    Multi-start coordinate descent with shrinking steps, seeded at the
    published coefficients plus a few perturbed starts. Stops when the
    relative step falls below step_tolerance or the evaluation budget
    runs out.
    """
    if len(samples) < 5:
        raise ValueError("need at least 5 samples to refit, got %d" % len(samples))
    xs = np.array([float(x) for x, _ in samples])
    ys = np.array([float(y) for _, y in samples])
    if len(set(xs.tolist())) < 3:
        raise ValueError("underdetermined fit: samples span fewer than 3 x values")
    if np.any(xs <= 0):
        raise ValueError("sample x values must be positive")

    base = np.array(DEFAULT_MODEL.coefficients())
    starts = [base.copy()]
    for factor in (0.5, 2.0):
        start = base.copy()
        start[0] *= factor  # perturb the leading amplitude only; the power
        starts.append(start)  # term dominates and anchors the other params

    evaluations = 0
    best_params, best_err = None, math.inf
    for start in starts:
        if evaluations >= max_evaluations:
            break
        params = start.copy()
        err = _mse(params, xs, ys)
        evaluations += 1
        steps = np.abs(params) * 0.25 + 1e-3
        while evaluations < max_evaluations:
            improved = False
            for idx in range(len(params)):
                for direction in (1.0, -1.0):
                    if evaluations >= max_evaluations:
                        break
                    trial = params.copy()
                    trial[idx] += direction * steps[idx]
                    trial_err = _mse(trial, xs, ys)
                    evaluations += 1
                    if trial_err < err:
                        params, err = trial, trial_err
                        improved = True
                        break
            if not improved:
                steps *= 0.5
                if np.max(steps / (np.abs(params) + 1e-12)) < step_tolerance:
                    break
        if err < best_err:
            best_params, best_err = params, err

    model = InflationModel(*[float(v) for v in best_params])
    return FitResult(model=model, mse=best_err, evaluations=evaluations)


def curve_table(model: InflationModel = DEFAULT_MODEL) -> list:
    """Rows of (x, inflation) over the whole domain, for CSV export."""
    return [(x, inflation_curve(x, model)) for x in range(X_MIN, X_MAX + 1)]
