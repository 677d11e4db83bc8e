"""Benchmark decoupled FBSDEs with their drivers, terminal conditions and solutions.

Conventions shared by every problem:

  - ``x`` is an (M, d) array of forward states and ``t`` a float or an (M,)
    array of times, one per row.
  - ``driver(t, x, y, z)`` takes ``y`` as an (M,) tensor and ``z`` as an
    (M, d) tensor of row vectors and returns an (M,) tensor, so the backward
    dynamics stay on the tape.
  - ``terminal(x)`` and ``analytic(t, x)`` work on plain arrays.
"""

import numpy as np
from bidict import bidict

from . import autodiff as ad


class NoAnalyticSolution(LookupError):
    pass


class ProblemSpec:
    def __init__(self, name, d, T, x0, mu, driver=None, terminal=None,
                 sigma_diag=None, sigma=None, analytic=None,
                 reference_y0=None, reference_note=None, params=None):
        if sigma_diag is None and sigma is None:
            raise ValueError('a problem needs sigma_diag or sigma')
        self.name = name
        self.d = int(d)
        self.T = float(T)
        self.x0 = np.broadcast_to(np.asarray(x0, dtype=np.float64), (self.d,)).copy()
        self.mu = mu
        self.driver = driver
        self.terminal = terminal
        self.sigma_diag = sigma_diag
        self._sigma = sigma
        self.analytic = analytic
        self.reference_y0 = reference_y0
        self.reference_note = reference_note
        self.params = dict(params or {})

    def sigma(self, t, x):
        if self._sigma is not None:
            return self._sigma(t, x)
        diag = self.sigma_diag(t, x)
        out = np.zeros(diag.shape + (self.d,))
        idx = np.arange(self.d)
        out[..., idx, idx] = diag
        return out

    def diffuse(self, t, x, dw):
        """sigma(t, x) dW for every row."""
        if self.sigma_diag is not None:
            return self.sigma_diag(t, x) * dw
        return np.einsum('mij,mj->mi', self._sigma(t, x), dw)

    def z_from_gradient(self, t, x, grad):
        """Row vector grad times sigma(t, x), kept on the tape."""
        if self.sigma_diag is not None:
            return ad.mul(grad, self.sigma_diag(t, x))
        return ad.vecmat(grad, self._sigma(t, x))

    @property
    def has_analytic(self):
        return self.analytic is not None

    def __repr__(self):
        return f'ProblemSpec({self.name!r}, d={self.d}, T={self.T})'


def _times(t, x):
    return np.broadcast_to(np.asarray(t, dtype=np.float64), x.shape[:1])


def analytic_solution(problem: ProblemSpec, t, x):
    if problem.analytic is None:
        raise NoAnalyticSolution(f'{problem.name} has no analytic solution')
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        y, z = problem.analytic(t, x[None, :])
        return float(y[0]), z[0]
    return problem.analytic(t, x)


def example1(d=1, T=None, mu=None, sigma=None, x0=1.0):
    """Periodic solution with a driver quadratic in Y * sum(Z).

    With Xbar = sum(x), e = exp((T - t)/2):
      Y = e cos(Xbar), Z = -sigma e sin(Xbar) (each component)
      f = e ((1 + d sigma^2)/2 cos(Xbar) + d mu sin(Xbar))
          - 1/2 (d sigma e^2 sin(Xbar) cos(Xbar))^2 + 1/2 (Y sum(Z))^2
    For d = 1, sigma = 1, mu = 0.2 and for d = 100, sigma = 1/sqrt(d),
    mu = 0.2/d the first bracket is cos + 0.2 sin.
    """
    T = (2.0 if d == 1 else 1.0) if T is None else T
    mu = 0.2 / d if mu is None else mu
    sigma = 1.0 / np.sqrt(d) if sigma is None else sigma

    def drift(t, x):
        return np.full_like(x, mu)

    def diffusion(t, x):
        return np.full_like(x, sigma)

    def coefficient(t, x):
        e = np.exp((T - _times(t, x)) / 2.0)
        xbar = x.sum(axis=1)
        linear = e * ((1.0 + d * sigma ** 2) / 2.0 * np.cos(xbar) + d * mu * np.sin(xbar))
        quadratic = 0.5 * (d * sigma * e ** 2 * np.sin(xbar) * np.cos(xbar)) ** 2
        return linear - quadratic

    def driver(t, x, y, z):
        zbar = ad.reduce_sum(z, axis=1)
        return ad.scale(ad.square(ad.mul(y, zbar)), 0.5) + coefficient(t, x)

    def terminal(x):
        return np.cos(x.sum(axis=1))

    def analytic(t, x):
        e = np.exp((T - _times(t, x)) / 2.0)
        xbar = x.sum(axis=1)
        y = e * np.cos(xbar)
        z = np.repeat((-sigma * e * np.sin(xbar))[:, None], d, axis=1)
        return y, z

    return ProblemSpec('ex1', d, T, x0, drift, driver, terminal, sigma_diag=diffusion,
                       analytic=analytic, params=dict(d=d, T=T, mu=mu, sigma=sigma, x0=x0))


def _example2_terms(t, w, T, alpha):
    """psi, grad psi and (d_t + 1/2 Laplacian) psi for psi = sin((T - t + |w|^2)^alpha).

    With s = T - t + |w|^2 and d the dimension:
      grad psi = 2 alpha w cos(s^alpha) s^(alpha - 1)
      (d_t + 1/2 Lap) psi = alpha s^(alpha - 2) [ (d - 1) s cos(s^alpha)
                            + 2 (alpha - 1) |w|^2 cos(s^alpha)
                            - 2 alpha s^alpha |w|^2 sin(s^alpha) ]
    """
    d = w.shape[1]
    r2 = np.sum(w * w, axis=1)
    s = T - _times(t, w) + r2
    sa = s ** alpha
    psi = np.sin(sa)
    grad = 2.0 * alpha * w * (np.cos(sa) * s ** (alpha - 1.0))[:, None]
    heat = alpha * s ** (alpha - 2.0) * (
        (d - 1.0) * s * np.cos(sa)
        + 2.0 * (alpha - 1.0) * r2 * np.cos(sa)
        - 2.0 * alpha * sa * r2 * np.sin(sa))
    return psi, grad, heat


def example2(d=100, T=1.0, alpha=0.4):
    """Driver quadratic in Z; the forward process is W itself."""

    def drift(t, x):
        return np.zeros_like(x)

    def diffusion(t, x):
        return np.ones_like(x)

    def driver(t, x, y, z):
        _, grad, heat = _example2_terms(t, x, T, alpha)
        known = -np.sum(grad * grad, axis=1) - heat
        return ad.reduce_sum(ad.square(z), axis=1) + known

    def terminal(x):
        return np.sin(np.sum(x * x, axis=1) ** alpha)

    def analytic(t, x):
        psi, grad, _ = _example2_terms(t, x, T, alpha)
        return psi, grad

    return ProblemSpec('ex2', d, T, np.zeros(d), drift, driver, terminal, sigma_diag=diffusion,
                       analytic=analytic, params=dict(d=d, T=T, alpha=alpha))


def alternating(d, high=1.0, low=0.5):
    return np.where(np.arange(d) % 2 == 0, high, low)


def example3(d=2, T=1.0, r=0.05, sigma_bs=0.4, s0=None):
    """Black-Scholes-Barenblatt: dS = sigma S dW, g = |S|^2, f = -r (Y - sum(Z)/sigma)."""
    s0 = alternating(d) if s0 is None else s0

    def drift(t, x):
        return np.zeros_like(x)

    def diffusion(t, x):
        return sigma_bs * x

    def driver(t, x, y, z):
        return ad.scale(ad.sub(y, ad.scale(ad.reduce_sum(z, axis=1), 1.0 / sigma_bs)), -r)

    def terminal(x):
        return np.sum(x * x, axis=1)

    def analytic(t, x):
        e = np.exp((r + sigma_bs ** 2) * (T - _times(t, x)))
        return e * np.sum(x * x, axis=1), 2.0 * sigma_bs * e[:, None] * x * x

    return ProblemSpec('ex3', d, T, s0, drift, driver, terminal, sigma_diag=diffusion,
                       analytic=analytic, params=dict(d=d, T=T, r=r, sigma_bs=sigma_bs))


def example4(d=100, T=0.5, mu=0.06, sigma=0.2, Rl=0.04, Rb=0.06, K1=120.0, K2=150.0, s0=100.0):
    """Pricing with different borrowing and lending rates on a call spread of the maximum."""

    def drift(t, x):
        return mu * x

    def diffusion(t, x):
        return sigma * x

    def driver(t, x, y, z):
        zsum = ad.scale(ad.reduce_sum(z, axis=1), 1.0 / sigma)
        borrow = ad.relu(ad.sub(zsum, y))
        return ad.scale(y, -Rl) + ad.scale(zsum, -(mu - Rl)) + ad.scale(borrow, Rb - Rl)

    def terminal(x):
        top = x.max(axis=1)
        return np.maximum(top - K1, 0.0) - 2.0 * np.maximum(top - K2, 0.0)

    return ProblemSpec('ex4', d, T, s0, drift, driver, terminal, sigma_diag=diffusion,
                       reference_y0=21.2988,
                       reference_note='multilevel Monte Carlo with 7 Picard iterations',
                       params=dict(d=d, T=T, mu=mu, sigma=sigma, Rl=Rl, Rb=Rb, K1=K1, K2=K2))


def geometric_brownian_motion(mu=0.05, sigma=0.4, x0=1.0, T=1.0, d=1):
    """dX = mu X dt + sigma X dW, a forward-only problem with an exact terminal value."""

    def drift(t, x):
        return mu * x

    def diffusion(t, x):
        return sigma * x

    problem = ProblemSpec('gbm', d, T, x0, drift, sigma_diag=diffusion,
                          params=dict(mu=mu, sigma=sigma, x0=x0, T=T, d=d))

    def exact_terminal(brownian):
        w = brownian.terminal()
        return problem.x0 * np.exp((mu - 0.5 * sigma ** 2) * T + sigma * w)

    problem.exact_terminal = exact_terminal
    return problem


PROBLEMS = bidict({
    'ex1': example1,
    'ex2': example2,
    'ex3': example3,
    'ex4': example4,
})


def make_problem(problem_id, **overrides):
    if problem_id not in PROBLEMS:
        raise KeyError(f'unknown problem {problem_id!r}, expected one of {sorted(PROBLEMS)}')
    return PROBLEMS[problem_id](**overrides)
