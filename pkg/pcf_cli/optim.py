"""Full-batch first-order optimizers on flat numpy vectors.

`minimize_lbfgs` is an unconstrained limited-memory BFGS with a strong-Wolfe line search using cubic
interpolation, the same scheme torch.optim.LBFGS uses, written for numpy objectives returning
(value, gradient).
"""

import dataclasses
import logging
from collections.abc import Callable

import numpy as np

from pcf_cli.error import NonFiniteError

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]

CURVATURE_EPS = 1e-10
EVALUATION_LIMIT = "evaluation limit reached"


@dataclasses.dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = dataclasses.field(default=None, init=False, repr=False)
    v: np.ndarray | None = dataclasses.field(default=None, init=False, repr=False)
    t: int = dataclasses.field(default=0, init=False)

    def step(self, w: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Return the updated weights; the moment estimates are kept on the optimizer."""
        if self.m is None:
            self.m = np.zeros_like(w)
            self.v = np.zeros_like(w)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return w - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclasses.dataclass(frozen=True)
class LbfgsResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    evaluations: int
    converged: bool
    message: str

    @property
    def budget_exhausted(self) -> bool:
        return self.message == EVALUATION_LIMIT


def cubic_interpolate(x1, f1, g1, x2, f2, g2, bounds=None) -> float:
    """Minimizer of the cubic through two points with known values and slopes, clipped to bounds."""
    if bounds is not None:
        xmin_bound, xmax_bound = bounds
    else:
        xmin_bound, xmax_bound = (x1, x2) if x1 <= x2 else (x2, x1)

    d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2)
    d2_square = d1 * d1 - g1 * g2
    if np.isfinite(d2_square) and d2_square >= 0.0:
        d2 = np.sqrt(d2_square)
        if x1 <= x2:
            min_pos = x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        else:
            min_pos = x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        if np.isfinite(min_pos):
            return float(min(max(min_pos, xmin_bound), xmax_bound))
    return float((xmin_bound + xmax_bound) / 2.0)


def strong_wolfe(
    fun: Objective,
    x: np.ndarray,
    t: float,
    d: np.ndarray,
    f: float,
    g: np.ndarray,
    gtd: float,
    c1: float = 1e-4,
    c2: float = 0.9,
    tolerance_change: float = 1e-9,
    max_ls: int = 20,
) -> tuple[float, np.ndarray, float, int]:
    """Find a step t along d satisfying the strong Wolfe conditions. Returns (f, g, t, evaluations)."""
    d_norm = np.max(np.abs(d))
    f_new, g_new = safe_evaluate(fun, x + t * d)
    evaluations = 1
    gtd_new = float(g_new @ d)

    t_prev, f_prev, g_prev, gtd_prev = 0.0, f, g, gtd
    done = False
    ls_iter = 0
    while ls_iter < max_ls:
        if f_new > f + c1 * t * gtd or (ls_iter > 1 and f_new >= f_prev):
            bracket = [t_prev, t]
            bracket_f = [f_prev, f_new]
            bracket_g = [g_prev, g_new]
            bracket_gtd = [gtd_prev, gtd_new]
            break

        if abs(gtd_new) <= -c2 * gtd:
            bracket = [t]
            bracket_f = [f_new]
            bracket_g = [g_new]
            done = True
            break

        if gtd_new >= 0:
            bracket = [t_prev, t]
            bracket_f = [f_prev, f_new]
            bracket_g = [g_prev, g_new]
            bracket_gtd = [gtd_prev, gtd_new]
            break

        min_step = t + 0.01 * (t - t_prev)
        max_step = t * 10.0
        previous = t
        t = cubic_interpolate(t_prev, f_prev, gtd_prev, t, f_new, gtd_new, bounds=(min_step, max_step))

        t_prev, f_prev, g_prev, gtd_prev = previous, f_new, g_new, gtd_new
        f_new, g_new = safe_evaluate(fun, x + t * d)
        evaluations += 1
        gtd_new = float(g_new @ d)
        ls_iter += 1

    if ls_iter == max_ls:
        bracket = [0.0, t]
        bracket_f = [f, f_new]
        bracket_g = [g, g_new]
        bracket_gtd = [gtd, gtd_new]

    # zoom: shrink the bracket until a point satisfies the conditions
    insufficient_progress = False
    low, high = (0, 1) if bracket_f[0] <= bracket_f[-1] else (1, 0)
    while not done and ls_iter < max_ls:
        if abs(bracket[1] - bracket[0]) * d_norm < tolerance_change:
            break

        t = cubic_interpolate(bracket[0], bracket_f[0], bracket_gtd[0], bracket[1], bracket_f[1], bracket_gtd[1])

        # keep trial points at least 10% of the bracket away from its ends
        eps = 0.1 * (max(bracket) - min(bracket))
        if min(max(bracket) - t, t - min(bracket)) < eps:
            if insufficient_progress or t >= max(bracket) or t <= min(bracket):
                if abs(t - max(bracket)) < abs(t - min(bracket)):
                    t = max(bracket) - eps
                else:
                    t = min(bracket) + eps
                insufficient_progress = False
            else:
                insufficient_progress = True
        else:
            insufficient_progress = False

        f_new, g_new = safe_evaluate(fun, x + t * d)
        evaluations += 1
        gtd_new = float(g_new @ d)
        ls_iter += 1

        if f_new > f + c1 * t * gtd or f_new >= bracket_f[low]:
            bracket[high], bracket_f[high], bracket_g[high], bracket_gtd[high] = t, f_new, g_new, gtd_new
            low, high = (0, 1) if bracket_f[0] <= bracket_f[1] else (1, 0)
        else:
            if abs(gtd_new) <= -c2 * gtd:
                done = True
            elif gtd_new * (bracket[high] - bracket[low]) >= 0:
                bracket[high], bracket_f[high] = bracket[low], bracket_f[low]
                bracket_g[high], bracket_gtd[high] = bracket_g[low], bracket_gtd[low]
            bracket[low], bracket_f[low], bracket_g[low], bracket_gtd[low] = t, f_new, g_new, gtd_new

    if len(bracket) == 1:
        low = 0
    return bracket_f[low], bracket_g[low], bracket[low], evaluations


def safe_evaluate(fun: Objective, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Trial points with a non-finite objective count as +inf so the line search backs off."""
    try:
        value, grad = fun(x)
    except NonFiniteError:
        return np.inf, np.zeros_like(x)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        return np.inf, np.zeros_like(x)
    return float(value), grad


def minimize_lbfgs(
    fun: Objective,
    x0: np.ndarray,
    max_iter: int = 2000,
    memory: int = 10,
    max_evals: int | None = None,
    tolerance_grad: float = 1e-7,
    tolerance_change: float = 1e-9,
    max_ls: int = 20,
) -> LbfgsResult:
    """Minimize fun starting at x0. fun must return (value, gradient); non-finite at x0 raises NonFiniteError.

    max_evals defaults to max_iter * 5 // 4. Line searches usually take more than one evaluation, so the
    run can stop on evaluations before it reaches max_iter; the result then has budget_exhausted set.
    """
    if max_evals is None:
        max_evals = max_iter * 5 // 4
    x = np.array(x0, dtype=float)
    value, grad = fun(x)
    value = float(value)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteError("Objective is non-finite at the starting point.")
    evaluations = 1

    if max_iter == 0:
        return LbfgsResult(x, value, grad, 0, evaluations, False, "no iterations requested")
    if np.max(np.abs(grad), initial=0.0) <= tolerance_grad:
        return LbfgsResult(x, value, grad, 0, evaluations, True, "gradient below tolerance")

    old_dirs: list[np.ndarray] = []
    old_steps: list[np.ndarray] = []
    ro: list[float] = []
    H_diag = 1.0
    d = -grad
    t = 0.0
    prev_grad = grad
    iteration = 0
    converged = False
    message = "iteration limit reached"

    while iteration < max_iter:
        iteration += 1
        if iteration == 1:
            d = -grad
        else:
            y = grad - prev_grad
            s = d * t
            ys = float(y @ s)
            if ys > CURVATURE_EPS:
                if len(old_dirs) == memory:
                    old_dirs.pop(0)
                    old_steps.pop(0)
                    ro.pop(0)
                old_dirs.append(y)
                old_steps.append(s)
                ro.append(1.0 / ys)
                H_diag = ys / float(y @ y)

            q = -grad
            alphas = [0.0] * len(old_dirs)
            for i in reversed(range(len(old_dirs))):
                alphas[i] = float(old_steps[i] @ q) * ro[i]
                q = q - alphas[i] * old_dirs[i]
            d = q * H_diag
            for i in range(len(old_dirs)):
                beta = float(old_dirs[i] @ d) * ro[i]
                d = d + old_steps[i] * (alphas[i] - beta)

        prev_grad = grad
        prev_value = value

        t = min(1.0, 1.0 / np.sum(np.abs(grad))) if iteration == 1 else 1.0
        gtd = float(grad @ d)
        if gtd > -tolerance_change:
            message = "no descent direction"
            converged = True
            break

        value, grad, t, ls_evaluations = strong_wolfe(
            fun, x, t, d, value, grad, gtd, tolerance_change=tolerance_change, max_ls=max_ls
        )
        x = x + t * d
        evaluations += ls_evaluations

        if np.max(np.abs(grad)) <= tolerance_grad:
            message = "gradient below tolerance"
            converged = True
            break
        if evaluations >= max_evals:
            message = EVALUATION_LIMIT
            break
        if np.max(np.abs(d * t)) <= tolerance_change:
            message = "step below tolerance"
            converged = True
            break
        if abs(value - prev_value) < tolerance_change:
            message = "objective change below tolerance"
            converged = True
            break

    logger.debug("L-BFGS stopped after %d iterations (%d evaluations): %s", iteration, evaluations, message)
    return LbfgsResult(x, value, grad, iteration, evaluations, converged, message)
