"""Temporal point process head: GRU recurrence, exponential-affine
intensity, next-event-time density, expectation by quadrature, and the
stance and loss heads.

The conditional intensity since the last event is
``lam(t) = exp(a + w * t)`` with ``a = b + v . g`` summarizing history
through the GRU state. Its integral has the closed form
``(exp(a + w*tau) - exp(a)) / w``, with a series fallback near w = 0.
The density ``f(tau) = lam(tau) * exp(-Lam(tau))`` integrates to 1 for
w >= 0 and to ``1 - exp(exp(a) / w)`` for w < 0 (a defective
distribution: the next event may never come). All of this lives in plain
float functions; the expectation and cumulative integral also exist as
single autodiff nodes whose partial derivatives are computed analytically
(by differentiating under the integral sign on the same quadrature grid),
so end-to-end gradients stay finite-difference checkable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .autodiff import EXP_CLAMP, Graph, Tensor

W_SERIES_CUTOFF = 1e-6   # |w| below this uses the series form of the integral


def _exp_clamped(x):
    return np.exp(np.minimum(x, EXP_CLAMP))


def intensity(a: float, w: float, t) -> np.ndarray | float:
    """lam(t) = exp(a + w t), exponent clamped at +EXP_CLAMP. Vectorized over t."""
    return _exp_clamped(a + w * np.asarray(t, dtype=np.float64))


def cumulative_intensity(a: float, w: float, tau) -> np.ndarray | float:
    """Integral of the intensity over [0, tau]. Vectorized over tau."""
    tau = np.asarray(tau, dtype=np.float64)
    if abs(w) > W_SERIES_CUTOFF:
        return (_exp_clamped(a + w * tau) - _exp_clamped(a)) / w
    wt = w * tau
    return _exp_clamped(a) * tau * (1.0 + wt / 2.0 + wt * wt / 6.0)


def _dcumulative_dw(a: float, w: float, tau) -> np.ndarray | float:
    tau = np.asarray(tau, dtype=np.float64)
    if abs(w) > W_SERIES_CUTOFF:
        lam = intensity(a, w, tau)
        return (tau * lam - cumulative_intensity(a, w, tau)) / w
    t2 = tau * tau
    return _exp_clamped(a) * (t2 / 2.0 + w * tau * t2 / 3.0 + w * w * t2 * t2 / 8.0)


def survival(a: float, w: float, tau) -> np.ndarray | float:
    """P(no event in [0, tau]) = exp(-Lam(tau))."""
    return np.exp(-cumulative_intensity(a, w, tau))


def density(a: float, w: float, tau) -> np.ndarray | float:
    """Next-event-time density f(tau) = lam(tau) exp(-Lam(tau))."""
    return intensity(a, w, tau) * survival(a, w, tau)


def total_mass(a: float, w: float) -> float:
    """Integral of the density over [0, inf): 1 for w >= 0, else defective."""
    if w >= 0.0:
        return 1.0
    return 1.0 - float(np.exp(_exp_clamped(a) / w))


@dataclass(frozen=True)
class QuadratureConfig:
    """Composite-Simpson settings for the expectation integral."""

    panels: int = 2048
    lambda_cutoff: float = 30.0   # integrate until Lam >= this (survival < 1e-13)
    horizon: float = 200.0        # hard cap on the integration endpoint


DEFAULT_QUAD = QuadratureConfig()

# endpoint lattice: 8 steps per octave, so t_max moves in discrete jumps
QUAD_SNAP = math.log(2.0) / 8.0


def quad_t_max(a: float, w: float, cfg: QuadratureConfig = DEFAULT_QUAD) -> float:
    """Integration endpoint: where Lam reaches the cutoff, capped at the horizon.

    For defective w < 0 the cumulative may never reach the cutoff; then
    integrate until the intensity itself is negligible (exponent -46),
    still capped at the horizon. The endpoint is rounded up to a geometric
    lattice so it is locally constant in (a, w): the quadrature then
    differentiates exactly under the integral sign, where a moving
    endpoint would leak grid error into the analytic partials.
    """
    c = cfg.lambda_cutoff
    if abs(w) < 1e-12:
        t = c * np.exp(min(-a, EXP_CLAMP))
    else:
        arg = 1.0 + c * w * np.exp(min(-a, EXP_CLAMP))
        if arg > 0.0:
            t = np.log1p(arg - 1.0) / w
        else:
            t = (-46.0 - a) / w
    t = float(t)
    if t >= cfg.horizon:
        return float(cfg.horizon)
    t = math.exp(QUAD_SNAP * math.ceil(math.log(t) / QUAD_SNAP))
    return float(min(t, cfg.horizon))


def _simpson_weights(n_panels: int, h: float) -> np.ndarray:
    w = np.ones(n_panels + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (h / 3.0)


class ExpectedTime(NamedTuple):
    value: float
    defect: bool


class _QuadFull(NamedTuple):
    value: float
    defect: bool
    d_a: float
    d_w: float


def _expected_time_full(a: float, w: float, cfg: QuadratureConfig) -> _QuadFull:
    t_max = quad_t_max(a, w, cfg)
    if t_max <= 0.0:
        raise FloatingPointError(f"expected_time: empty domain (a={a}, w={w})")
    grid = np.linspace(0.0, t_max, cfg.panels + 1)
    lam = intensity(a, w, grid)
    cum = cumulative_intensity(a, w, grid)
    f = lam * np.exp(-cum)
    sw = _simpson_weights(cfg.panels, grid[1] - grid[0])

    # Partials of f under the integral sign:
    #   df/da = f * (1 - Lam),  df/dw = f * (tau - dLam/dw).
    dfa = f * (1.0 - cum)
    dfw = f * (grid - _dcumulative_dw(a, w, grid))

    n = float(sw @ (grid * f))
    dn_a = float(sw @ (grid * dfa))
    dn_w = float(sw @ (grid * dfw))

    if w < 0.0:
        # mass over [0, t_max] in closed form: the density is the exact
        # derivative of 1 - exp(-Lam), so quadrature error never enters
        # the normalizer (it would show up as a jump at w = 0)
        cum_end = float(cum[-1])
        s_end = float(np.exp(-cum_end))
        m = 1.0 - s_end
        dm_a = s_end * cum_end
        dm_w = s_end * float(_dcumulative_dw(a, w, t_max))
        if m <= 0.0 or not np.isfinite(m):
            raise FloatingPointError(
                f"expected_time: degenerate mass {m} (a={a}, w={w}, t_max={t_max})")
        value = n / m
        d_a = (dn_a * m - n * dm_a) / (m * m)
        d_w = (dn_w * m - n * dm_w) / (m * m)
        defect = True
    else:
        value, d_a, d_w, defect = n, dn_a, dn_w, False

    if not (np.isfinite(value) and np.isfinite(d_a) and np.isfinite(d_w)):
        raise FloatingPointError(
            f"expected_time: non-finite quadrature (a={a}, w={w}, t_max={t_max}, "
            f"value={value}, d_a={d_a}, d_w={d_w})")
    return _QuadFull(value, defect, d_a, d_w)


def expected_time(a: float, w: float,
                  cfg: QuadratureConfig = DEFAULT_QUAD) -> ExpectedTime:
    """E[tau] of the next-event density; conditional on an event when w < 0.

    The defect flag marks the conditional (w < 0) case, where the raw
    density has total mass below 1.
    """
    full = _expected_time_full(a, w, cfg)
    return ExpectedTime(full.value, full.defect)


# -- graph ops ---------------------------------------------------------------

def expected_time_node(g: Graph, a_t: Tensor, w_t: Tensor,
                       cfg: QuadratureConfig = DEFAULT_QUAD,
                       counters: dict | None = None) -> tuple[Tensor, bool]:
    """Differentiable expectation of the next event time, one tape node."""
    if counters is not None:
        counters["intensity_evals"] = counters.get("intensity_evals", 0) + 1
    a = float(a_t.values[0, 0])
    w = float(w_t.values[0, 0])
    full = _expected_time_full(a, w, cfg)
    state = {"full": full}

    def recompute():
        state["full"] = _expected_time_full(
            float(a_t.values[0, 0]), float(w_t.values[0, 0]), cfg)
        return np.array([[state["full"].value]])

    def vjp(out_grad):
        go = out_grad[0, 0]
        fu = state["full"]
        return [np.array([[go * fu.d_a]]), np.array([[go * fu.d_w]])]

    out = g.custom(np.array([[full.value]]), (a_t, w_t), vjp,
                   recompute=recompute, kind="expected_time")
    return out, full.defect


def cumulative_intensity_node(g: Graph, a_t: Tensor, w_t: Tensor, tau: float,
                              counters: dict | None = None) -> Tensor:
    """Differentiable Lam(tau) treating tau as a constant."""
    if counters is not None:
        counters["intensity_evals"] = counters.get("intensity_evals", 0) + 1

    def compute():
        a = float(a_t.values[0, 0])
        w = float(w_t.values[0, 0])
        return np.array([[float(cumulative_intensity(a, w, tau))]])

    def vjp(out_grad):
        go = out_grad[0, 0]
        a = float(a_t.values[0, 0])
        w = float(w_t.values[0, 0])
        # dLam/da = Lam: both branches are proportional to exp(a).
        d_a = float(cumulative_intensity(a, w, tau))
        d_w = float(_dcumulative_dw(a, w, tau))
        return [np.array([[go * d_a]]), np.array([[go * d_w]])]

    return g.custom(compute(), (a_t, w_t), vjp, recompute=compute,
                    kind="cumulative_intensity")


# -- GRU and heads -----------------------------------------------------------

@dataclass
class GruParams:
    """Gate block [reset | update] plus the candidate block."""

    gates_w: Tensor   # (input_dim + m, 2m)
    gates_b: Tensor
    cand_w: Tensor    # (input_dim + m, m)
    cand_b: Tensor

    @property
    def hidden_dim(self) -> int:
        return self.cand_b.shape[1]


def gru_step(g: Graph, p: GruParams, g_prev: Tensor, x: Tensor) -> Tensor:
    """Standard GRU update; a closed update gate preserves g_prev exactly."""
    m = p.hidden_dim
    xh = g.concat_cols(x, g_prev)
    gates = g.sigmoid(g.add(g.matmul(xh, p.gates_w), p.gates_b))
    r = g.slice_cols(gates, 0, m)
    u = g.slice_cols(gates, m, 2 * m)
    xrh = g.concat_cols(x, g.mul_elem(r, g_prev))
    cand = g.tanh(g.add(g.matmul(xrh, p.cand_w), p.cand_b))
    return g.add(g_prev, g.mul_elem(u, g.sub(cand, g_prev)))


def intensity_base(g: Graph, g_state: Tensor, v: Tensor, b: Tensor) -> Tensor:
    """a = b + v . g, the history-dependent part of the log intensity."""
    return g.add(g.matmul(g_state, v), b)


def predict_stance(g: Graph, g_state: Tensor, w_s: Tensor, b_s: Tensor) -> Tensor:
    """Class probabilities over {support, oppose, neutral}."""
    return g.softmax_rows(g.add(g.matmul(g_state, w_s), b_s))


def cross_entropy(g: Graph, probs: Tensor, label: int) -> Tensor:
    return g.scale(g.log(g.slice_cols(probs, label, label + 1)), -1.0)


GAUSS_CONST = 0.5 * float(np.log(2.0 * np.pi))


def time_loss_gaussian(g: Graph, tau_true: float, tau_hat: Tensor,
                       sigma: float) -> Tensor:
    """Negative log Gaussian penalty: (tau - tau_hat)^2 / (2 sigma^2) + log(sigma sqrt(2 pi))."""
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    diff = g.sub(g.scalar(tau_true), tau_hat)
    sq = g.scale(g.mul_elem(diff, diff), 1.0 / (2.0 * sigma * sigma))
    return g.add(sq, g.scalar(GAUSS_CONST + float(np.log(sigma))))


def time_loss_tpp(g: Graph, a_t: Tensor, w_t: Tensor, tau_true: float,
                  counters: dict | None = None) -> Tensor:
    """Point-process NLL of the observed interval: -log f(tau_true)."""
    log_lam = g.add(a_t, g.scale(w_t, tau_true))
    cum = cumulative_intensity_node(g, a_t, w_t, tau_true, counters)
    return g.add(g.scale(log_lam, -1.0), cum)


def total_loss(g: Graph, l_x: Tensor | None, l_time: Tensor, l_stan: Tensor,
               eta: float, beta: float, gamma: float) -> Tensor:
    """Weighted sum of the three minimization terms."""
    if min(eta, beta, gamma) < 0.0:
        raise ValueError("loss coefficients must be nonnegative")
    out = g.add(g.scale(l_time, beta), g.scale(l_stan, gamma))
    if l_x is not None:
        out = g.add(out, g.scale(l_x, eta))
    return out
