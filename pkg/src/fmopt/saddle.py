"""The primal-dual subgradient (dual averaging) loop.

One iteration evaluates the convex-concave Lagrangian's subgradients at
the current pair, accumulates them into the dual averages, and re-solves
both subproblems in closed form: the adjoint vectors by a radial shrink
onto the eta-ball, the material blocks by the batched spectral projection.
Simple and weighted step weights are supported, as is the window-based
doubling/backtrack controller for the scale sigma.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import proj
from .model import (
    DualState,
    FlopCounter,
    InvalidInstance,
    MaterialState,
    NumericalFailure,
    ProblemInstance,
)

log = logging.getLogger(__name__)

R_THRESHOLD = 1e-14  # relative floor on <A(E)x, x> for membership in R


@dataclass
class StepSchedule:
    """Step-weight scheme plus the beta recurrence state.

    ``beta_hat`` follows beta_hat_0 = beta_hat_1 = 1 and
    beta_hat_{t+1} = beta_hat_t + 1/beta_hat_t; the subproblems at step t
    use beta_{t+1} = sigma * beta_hat_{t+1}.
    """

    scheme: str
    tau: float
    sigma: float
    beta_hat: float = 1.0
    t: int = 0

    def __post_init__(self):
        if self.scheme not in ("simple", "weighted"):
            raise InvalidInstance(f"unknown scheme {self.scheme!r}")
        if not 0.0 < self.tau < 1.0:
            raise InvalidInstance("need tau in (0, 1)")
        if not self.sigma > 0:
            raise InvalidInstance("need sigma > 0")

    def advance(self) -> float:
        """Move to the next iterate index and return beta_{t+1}."""
        if self.t >= 1:
            self.beta_hat = self.beta_hat + 1.0 / self.beta_hat
        self.t += 1
        return self.sigma * self.beta_hat


def beta_hat_sequence(t_max: int) -> np.ndarray:
    """beta_hat_t for t = 0..t_max (inclusive)."""
    out = np.empty(t_max + 1)
    out[0] = 1.0
    if t_max >= 1:
        out[1] = 1.0
    for t in range(1, t_max):
        out[t + 1] = out[t] + 1.0 / out[t]
    return out


@dataclass
class DualAccumulators:
    """Running dual sums and the averaging/gap bookkeeping."""

    s_E: np.ndarray  # (m, k, k)
    s_x: np.ndarray  # (L, N)
    sum_alpha: float = 0.0
    sum_gE_dot_E: float = 0.0
    sum_gx_dot_x: float = 0.0
    E_avg: np.ndarray | None = None  # sum of alpha_l * E^(l)
    x_avg: np.ndarray | None = None

    @classmethod
    def zeros(cls, instance: ProblemInstance) -> "DualAccumulators":
        return cls(
            s_E=np.zeros((instance.m, instance.k, instance.k)),
            s_x=np.zeros((instance.L, instance.N)),
            E_avg=np.zeros((instance.m, instance.k, instance.k)),
            x_avg=np.zeros((instance.L, instance.N)),
        )


@dataclass
class SigmaController:
    """Window-based doubling of sigma with a single backtrack.

    Runs one baseline window at sigma0, doubles while the monitored rate
    (relative decrease of the running gap bound over a window) improves,
    and on the first degradation halves once and freezes.
    """

    sigma0: float
    window: int
    rate_metric: str = "gap_decrease"
    v: int = 0
    sigma: float = field(init=False)
    phase: str = "baseline"  # baseline -> growing -> frozen
    prev_rate: float | None = None
    windows_used: int = 0

    def __post_init__(self):
        if self.window < 10:
            raise InvalidInstance("autotune window must be at least 10 steps")
        if not self.sigma0 > 0:
            raise InvalidInstance("need sigma0 > 0")
        self.sigma = self.sigma0

    @property
    def frozen(self) -> bool:
        return self.phase == "frozen"

    @property
    def test_steps(self) -> int:
        return self.windows_used * self.window

    def observe_window(self, gap_samples) -> float:
        """Consume one window of gap-bound samples; return the new sigma."""
        if self.frozen:
            return self.sigma
        gap_samples = np.asarray(gap_samples, dtype=float)
        first, last = gap_samples[0], gap_samples[-1]
        rate = (first - last) / max(abs(first), 1e-300)
        self.windows_used += 1
        if self.phase == "baseline":
            self.prev_rate = rate
            self.v += 1
            self.sigma = 2.0 * self.sigma
            self.phase = "growing"
        elif rate > self.prev_rate:
            self.prev_rate = rate
            self.v += 1
            self.sigma = 2.0 * self.sigma
        else:
            self.v -= 1
            self.sigma = 0.5 * self.sigma
            self.phase = "frozen"
        return self.sigma


def sigma_autotune(controller: SigmaController, gap_samples) -> float:
    """Feed one window of gap-bound samples to the controller."""
    return controller.observe_window(gap_samples)


def autotune_step_budget(L_norm: float, D: float, sigma0: float, window: int) -> int:
    """Upper bound on the number of test steps the controller may consume."""
    return int(math.ceil(2.5 + math.log2(L_norm / (sigma0 * math.sqrt(D))))) * window


# -- subgradient oracle ----------------------------------------------------


def _batched_element_products(instance: ProblemInstance, E_dense, x):
    """Shared element loop: returns (W, EW, quad) with W[j,i,l] = B_{i,l} x_j."""
    xg = x[:, instance.cols_packed]  # (L, m, n_loc)
    W = np.einsum("qlkd,jqd->jqlk", instance.B_packed, xg)
    EW = np.einsum("qkc,jqlc->jqlk", E_dense, W)
    quad = np.einsum("jqlk,jqlk->j", W, EW)
    low = float(quad.min(initial=0.0))
    if low < -1e-9:
        raise NumericalFailure(
            f"<A(E)x, x> = {low:.3e} is negative beyond roundoff; state corrupted"
        )
    np.maximum(quad, 0.0, out=quad)
    return W, EW, quad


def _scatter_rows(instance: ProblemInstance, local_rows):
    """Scatter (L, m, n_loc) element contributions into (L, N) vectors."""
    out = np.zeros((local_rows.shape[0], instance.N))
    for j in range(local_rows.shape[0]):
        np.add.at(out[j], instance.cols_packed, local_rows[j])
    return out


def subgradients(instance: ProblemInstance, E_dense, x, fallback_y=None, counter=None):
    """Fused evaluation of the Lagrangian subgradients at (E, x).

    Returns ``(g_E, g_x, quad, in_R, used_plain_fallback)``.  Loads outside
    R (vanishing quadratic form) take the set-valued branch: the unit
    representative ``fallback_y`` when supplied, otherwise the plain 2 f_j
    selection, which is flagged.
    """
    W, EW, quad = _batched_element_products(instance, E_dense, x)
    in_R = quad > R_THRESHOLD * np.einsum("jn,jn->j", x, x)
    sqrt_gamma = math.sqrt(instance.gamma)

    coef = np.zeros(instance.L)
    coef[in_R] = sqrt_gamma / np.sqrt(quad[in_R])
    g_E = -np.einsum("j,jqlk,jqlc->qkc", coef, W, W)
    g_E += np.eye(instance.k)[None, :, :]

    ylocal = np.einsum("qlkd,jqlk->jqd", instance.B_packed, EW)  # A_i(E) x_j rows
    Ax = _scatter_rows(instance, ylocal)
    g_x = 2.0 * instance.loads - 2.0 * coef[:, None] * Ax

    used_plain = False
    for j in np.flatnonzero(~in_R):
        if fallback_y is not None and np.any(fallback_y[j]):
            yg = fallback_y[j][instance.cols_packed]
            Wy = np.einsum("qlkd,qd->qlk", instance.B_packed, yg)
            EWy = np.einsum("qkc,qlc->qlk", E_dense, Wy)
            Ay = np.zeros(instance.N)
            np.add.at(Ay, instance.cols_packed, np.einsum("qlkd,qlk->qd", instance.B_packed, EWy))
            g_x[j] = 2.0 * instance.loads[j] - 2.0 * sqrt_gamma * Ay
        else:
            g_x[j] = 2.0 * instance.loads[j]
            used_plain = True

    if counter is not None:
        k, nloc, nig = instance.k, instance.n_loc, instance.nig
        per_l = 4 * k * nloc + 3 * k * k + 3 * k
        counter.add("grads", instance.L * (instance.m * nig * per_l + instance.m * k * (k + 1)))
        counter.add("grads", 5 * instance.L * instance.N + 4 * instance.L)
    return g_E, g_x, quad, in_R, used_plain


def subgrad_E(instance: ProblemInstance, E: MaterialState, x: DualState):
    """Material-side subgradient blocks of the Lagrangian at (E, x)."""
    instance.check_material(E)
    g_E, _, _, _, _ = subgradients(instance, E.dense(), x.vectors)
    return g_E


def subgrad_x(instance: ProblemInstance, E: MaterialState, x: DualState):
    """Adjoint-side subgradient vectors of the Lagrangian at (E, x)."""
    instance.check_material(E)
    _, g_x, _, _, _ = subgradients(instance, E.dense(), x.vectors)
    return g_x


def lagrangian_value(instance: ProblemInstance, E_dense, x) -> float:
    """Value of the saddle function at dense-array arguments."""
    _, _, quad = _batched_element_products(instance, E_dense, x)
    traces = np.einsum("qkk->q", E_dense).sum()
    pair = np.einsum("jn,jn->j", instance.loads, x)
    return float(traces + 2.0 * np.sum(pair - math.sqrt(instance.gamma) * np.sqrt(quad)))


def grad_norm_star(g_E, g_x, tau: float) -> float:
    """Combined dual norm sqrt(|g_E|^2/tau + |g_x|^2/(1-tau))."""
    return math.sqrt(float(np.sum(g_E**2)) / tau + float(np.sum(g_x**2)) / (1.0 - tau))


def da_step(
    instance: ProblemInstance,
    acc: DualAccumulators,
    schedule: StepSchedule,
    E_dense,
    x,
    counter: FlopCounter | None = None,
    fallback_y=None,
    grads=None,
):
    """One dual-averaging iteration from (E, x); mutates ``acc``.

    Returns ``(E_next, x_next, info)``.  ``grads`` may carry a precomputed
    ``subgradients`` tuple (the penalty mode adjusts g_E before stepping).
    """
    if grads is None:
        grads = subgradients(instance, E_dense, x, fallback_y, counter)
    g_E, g_x, quad, in_R, used_plain = grads

    if schedule.scheme == "simple":
        alpha = 1.0
        gnorm = grad_norm_star(g_E, g_x, schedule.tau)
    else:
        gnorm = grad_norm_star(g_E, g_x, schedule.tau)
        alpha = 1.0 / gnorm

    # averaging happens before the state moves: the mean covers E^(0..t)
    acc.E_avg += alpha * E_dense
    acc.x_avg += alpha * x
    acc.sum_alpha += alpha
    acc.sum_gE_dot_E += alpha * float(np.sum(g_E * E_dense))
    acc.sum_gx_dot_x += alpha * float(np.sum(g_x * x))
    acc.s_E += alpha * g_E
    acc.s_x -= alpha * g_x

    beta_next = schedule.advance()
    x_next = _solve_x(acc.s_x, beta_next, schedule.tau, instance.eta)
    E_next = proj.project_blocks(
        acc.s_E, beta_next * schedule.tau, instance.rho_l, instance.rho_u, instance.r
    )

    if counter is not None:
        k, m, L, N = instance.k, instance.m, instance.L, instance.N
        counter.add("x_update", L * (3 * N + 7))
        counter.add("E_update", m * (10 * k**3 + 3 * k * k + 7 * k + 8))
        counter.add("averaging", 2 * m * k * k + 2 * L * N + m * k)

    info = {
        "alpha": alpha,
        "beta": beta_next,
        "grad_norm": gnorm,
        "quad": quad,
        "in_R": in_R,
        "used_plain_fallback": used_plain,
    }
    return E_next, x_next, info


def _solve_x(s_x, beta_next: float, tau: float, eta: float):
    """Closed-form adjoint update: radial shrink of -s onto the eta-ball."""
    norms = np.linalg.norm(s_x, axis=1)
    scale = np.zeros_like(norms)
    nz = norms > 0
    scale[nz] = -np.minimum(eta / norms[nz], 1.0 / (beta_next * (1.0 - tau)))
    return scale[:, None] * s_x


def averaged_primal(acc: DualAccumulators) -> MaterialState:
    """Weighted average of the visited material states."""
    if acc.sum_alpha <= 0:
        raise InvalidInstance("averaged_primal called before the first step")
    return MaterialState.from_dense(acc.E_avg / acc.sum_alpha)


def averaged_dual(acc: DualAccumulators) -> DualState:
    if acc.sum_alpha <= 0:
        raise InvalidInstance("averaged_dual called before the first step")
    return DualState.from_array(acc.x_avg / acc.sum_alpha)


# -- solver loop -----------------------------------------------------------


@dataclass
class SolverConfig:
    """Knobs of one solve; eta/nu/gamma live on the instance."""

    scheme: str = "simple"
    mode: str = "plain"
    iterations: int = 1000
    tau: float = 0.5
    sigma0: float = 1.0
    autotune_window: int = 0
    log_stride: int = 1
    dense_threshold: int = 4000
    deterministic: bool = False
    seed: int = 0
    gap_at_log: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidInstance("need iterations >= 1")
        if self.log_stride < 1:
            raise InvalidInstance("need log_stride >= 1")
        if self.mode not in ("plain", "penalty"):
            raise InvalidInstance(f"unknown mode {self.mode!r}")


@dataclass
class IterationRecord:
    """Per-iteration sink payload (state AFTER ``t`` completed steps)."""

    t: int
    alpha: float
    beta: float
    sigma: float
    objective: float
    grad_norm: float
    gap_kappa: float | None
    gap_upsilon: float | None
    gap: float | None
    theoretical_bound: float | None
    feasible: bool
    x_in_ball: bool
    flops: float
    wall_ns: int
    compliances: np.ndarray | None = None
    violation_literal: float | None = None
    violation_positive: float | None = None
    E_ref: np.ndarray | None = None  # current iterate; rebound every step, safe to hold


@dataclass
class SolveResult:
    E_last: MaterialState
    x_last: DualState
    E_avg: MaterialState
    x_avg: DualState
    acc: DualAccumulators
    counter: FlopCounter
    sigma_final: float
    controller: SigmaController | None
    fallback_events: int
    wall_seconds: float


def run_solver(
    instance: ProblemInstance,
    config: SolverConfig,
    sink=None,
    constants=None,
) -> SolveResult:
    """Run the dual-averaging loop from the canonical starting point.

    ``sink`` receives an IterationRecord every ``log_stride`` steps and at
    the final step.  ``constants`` (a diagnostics.BoundConstants) enables
    the theoretical-bound column.
    """
    from . import diagnostics

    E = instance.start_material().dense()
    x = instance.start_dual().vectors
    acc = DualAccumulators.zeros(instance)
    controller = None
    sigma = config.sigma0
    if config.autotune_window:
        controller = SigmaController(sigma0=config.sigma0, window=config.autotune_window)
        sigma = controller.sigma
    schedule = StepSchedule(scheme=config.scheme, tau=config.tau, sigma=sigma)
    counter = FlopCounter()
    fallback_y = np.zeros((instance.L, instance.N))
    fallback_events = 0
    window_samples: list[float] = []

    pen = None
    if config.mode == "penalty":
        from . import penalty as penalty_mod

        pen = penalty_mod

    t_start = time.perf_counter()
    last_wall = time.perf_counter_ns()
    pen_state = None  # compliances of the current E, carried across log rows
    for step in range(config.iterations):
        grads = subgradients(instance, E, x, fallback_y, counter)
        if pen is not None:
            if pen_state is None:
                pen_state = pen.compliance_solves(
                    instance, E, counter=counter, dense_threshold=config.dense_threshold
                )
            g_E = grads[0] + pen.penalty_grad_correction(instance, pen_state)
            grads = (g_E,) + grads[1:]
        pen_state = None

        x_prev = x
        E, x, info = da_step(
            instance, acc, schedule, E, x, counter=counter, fallback_y=fallback_y, grads=grads
        )
        if info["used_plain_fallback"]:
            fallback_events += 1
            log.info("step %d: plain 2f selection used for a load outside R", step)
        quad, in_R = info["quad"], info["in_R"]
        if np.any(in_R):
            # unit-quadratic representatives for the set-valued branch:
            # the pre-step iterate scaled by its own quadratic form
            fallback_y[in_R] = x_prev[in_R] / np.sqrt(quad[in_R])[:, None]

        if controller is not None and not controller.frozen:
            kappa, upsilon, gap = diagnostics.gap_estimate(acc, instance)
            window_samples.append(gap)
            if len(window_samples) == controller.window:
                schedule.sigma = sigma_autotune(controller, window_samples)
                window_samples = []
                if controller.frozen and constants is not None:
                    # theorem budget applies when sigma0 starts below the optimum
                    sigma_opt = constants.L_combined / math.sqrt(2.0 * constants.D)
                    if config.sigma0 <= sigma_opt:
                        budget = autotune_step_budget(
                            constants.L_combined, constants.D, config.sigma0,
                            controller.window,
                        )
                        if controller.test_steps > budget:
                            raise NumericalFailure(
                                f"sigma autotune used {controller.test_steps} test steps, "
                                f"over the budget {budget}"
                            )

        t = step + 1
        if t % config.log_stride == 0 or t == config.iterations:
            now = time.perf_counter_ns()
            wall_ns = 0 if config.deterministic else now - last_wall
            last_wall = now
            kappa = upsilon = gap = bound = None
            if config.gap_at_log:
                kappa, upsilon, gap = diagnostics.gap_estimate(acc, instance)
            if constants is not None:
                bound = diagnostics.theoretical_gap_bound(
                    constants, t - 1, config.scheme, nu=instance.nu
                )
            if pen is not None:
                # post-step compliances for this row; reused next iteration
                pen_state = pen.compliance_solves(
                    instance, E, counter=counter, dense_threshold=config.dense_threshold
                )
            feas_ok, _ = _quick_feasible(instance, E)
            record = IterationRecord(
                t=t,
                alpha=info["alpha"],
                beta=info["beta"],
                sigma=schedule.sigma,
                objective=float(np.einsum("qkk->", E)),
                grad_norm=info["grad_norm"],
                gap_kappa=kappa,
                gap_upsilon=upsilon,
                gap=gap,
                theoretical_bound=bound,
                feasible=feas_ok,
                x_in_ball=bool(
                    np.all(np.linalg.norm(x, axis=1) <= instance.eta + 1e-12)
                ),
                flops=counter.total,
                wall_ns=wall_ns,
                compliances=None if pen_state is None else pen_state.compliances,
                E_ref=E,
            )
            if pen_state is not None:
                record.violation_literal = float(
                    np.minimum(pen_state.compliances - instance.gamma, 0.0).sum()
                )
                record.violation_positive = float(
                    np.maximum(pen_state.compliances - instance.gamma, 0.0).sum()
                )
            if sink is not None:
                sink(record)

    wall = time.perf_counter() - t_start
    return SolveResult(
        E_last=MaterialState.from_dense(E),
        x_last=DualState.from_array(x),
        E_avg=averaged_primal(acc),
        x_avg=averaged_dual(acc),
        acc=acc,
        counter=counter,
        sigma_final=schedule.sigma,
        controller=controller,
        fallback_events=fallback_events,
        wall_seconds=wall,
    )


def _quick_feasible(instance: ProblemInstance, E_dense) -> tuple:
    traces = np.einsum("qkk->q", E_dense)
    eigmin = np.linalg.eigvalsh(E_dense)[:, 0]
    ok = bool(
        np.all(traces <= instance.rho_u + 1e-9)
        and np.all(traces >= instance.rho_l - 1e-9)
        and np.all(eigmin >= instance.r - 1e-9)
    )
    return ok, (traces, eigmin)
