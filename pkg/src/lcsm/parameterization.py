"""Free-parameter vectors and the unconstrained internal parameterization.

The natural vector stacks, in order: growth-factor means, the upper triangle
of the growth-factor covariance (row-major: psi00, psi01, ..., psi11, ...),
the form extras (free relative rates for the nonparametric form, or b, or c)
and finally the residual variance.

The internal vector is the same length but unconstrained:

* means and relative rates are passed through unchanged,
* the covariance is log-Cholesky coded (lower-triangular factor, diagonal on
  the log scale),
* ``b`` and the residual variance are log coded,
* ``c`` (negative) is coded as -log(-c).
"""

from __future__ import annotations

import numpy as np

from .forms import FunctionalForm, Kind, ParameterSet

__all__ = [
    "free_param_names",
    "pack_natural",
    "unpack_natural",
    "natural_to_internal",
    "internal_to_natural",
    "internal_loglik_fn",
    "natural_jacobian",
    "central_gradient",
    "forward_gradient",
    "central_hessian",
]


def _vech_indices(k):
    """Row-major upper-triangle index pairs: (0,0), (0,1), ..., (k-1,k-1)."""
    return [(i, j) for i in range(k) for j in range(i, k)]


def free_param_names(form: FunctionalForm, n_waves: int) -> list[str]:
    k = form.n_factors
    names = [f"mu_eta{i}" for i in range(k)]
    names += [f"psi{i}{j}" for i, j in _vech_indices(k)]
    if form.kind is Kind.NONPARAMETRIC:
        names += [f"gamma{j}" for j in range(2, n_waves)]
    elif form.kind is Kind.NEGATIVE_EXPONENTIAL:
        names.append("b")
    elif form.kind is Kind.JENSS_BAYLEY:
        names.append("c")
    names.append("theta_eps")
    return names


def n_free_params(form: FunctionalForm, n_waves: int) -> int:
    return len(free_param_names(form, n_waves))


def pack_natural(form: FunctionalForm, params: ParameterSet) -> np.ndarray:
    """Flatten a ParameterSet into the natural free-parameter vector."""
    k = form.n_factors
    parts = [params.growth_means]
    parts.append(np.array([params.growth_cov[i, j] for i, j in _vech_indices(k)]))
    if form.kind is Kind.NONPARAMETRIC:
        parts.append(params.gamma[1:])
    elif form.kind is Kind.NEGATIVE_EXPONENTIAL:
        parts.append(np.array([params.b]))
    elif form.kind is Kind.JENSS_BAYLEY:
        parts.append(np.array([params.c]))
    parts.append(np.array([params.residual_var]))
    return np.concatenate(parts)


def _split(form, theta, n_waves):
    k = form.n_factors
    n_cov = k * (k + 1) // 2
    means = theta[:k]
    vech = theta[k : k + n_cov]
    rest = theta[k + n_cov :]
    if form.kind is Kind.NONPARAMETRIC:
        extras, resid = rest[: n_waves - 2], rest[-1]
    elif form.kind in (Kind.NEGATIVE_EXPONENTIAL, Kind.JENSS_BAYLEY):
        extras, resid = rest[:1], rest[-1]
    else:
        extras, resid = rest[:0], rest[-1]
    return means, vech, extras, resid


def unpack_natural(form: FunctionalForm, theta, n_waves: int) -> ParameterSet:
    """Rebuild a ParameterSet from the natural free-parameter vector."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape[0] != n_free_params(form, n_waves):
        raise ValueError(
            f"expected {n_free_params(form, n_waves)} free parameters, "
            f"got {theta.shape[0]}"
        )
    k = form.n_factors
    means, vech, extras, resid = _split(form, theta, n_waves)
    cov = np.zeros((k, k))
    for value, (i, j) in zip(vech, _vech_indices(k)):
        cov[i, j] = cov[j, i] = value
    kwargs = {}
    if form.kind is Kind.NONPARAMETRIC:
        kwargs["gamma"] = np.concatenate([[1.0], extras])
    elif form.kind is Kind.NEGATIVE_EXPONENTIAL:
        kwargs["b"] = float(extras[0])
    elif form.kind is Kind.JENSS_BAYLEY:
        kwargs["c"] = float(extras[0])
    return ParameterSet(
        growth_means=means, growth_cov=cov, residual_var=float(resid), **kwargs
    )


def _chol_pack(chol):
    """Lower-triangular factor -> internal coords (diagonal logged)."""
    k = chol.shape[0]
    out = []
    for i in range(k):
        for j in range(i + 1):
            out.append(np.log(chol[i, i]) if i == j else chol[i, j])
    return np.array(out)


def _chol_unpack(x, k):
    chol = np.zeros((k, k))
    pos = 0
    for i in range(k):
        for j in range(i + 1):
            chol[i, j] = np.exp(x[pos]) if i == j else x[pos]
            pos += 1
    return chol


def natural_to_internal(form: FunctionalForm, theta, n_waves: int) -> np.ndarray:
    """Map the natural vector to unconstrained internal coordinates.

    Requires a strictly positive-definite covariance block (interior point).
    """
    theta = np.asarray(theta, dtype=float)
    k = form.n_factors
    means, vech, extras, resid = _split(form, theta, n_waves)
    cov = np.zeros((k, k))
    for value, (i, j) in zip(vech, _vech_indices(k)):
        cov[i, j] = cov[j, i] = value
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            "internal coding requires a positive definite growth covariance"
        ) from exc
    parts = [means, _chol_pack(chol)]
    if form.kind is Kind.NONPARAMETRIC:
        parts.append(extras)
    elif form.kind is Kind.NEGATIVE_EXPONENTIAL:
        parts.append(np.log(extras))
    elif form.kind is Kind.JENSS_BAYLEY:
        parts.append(-np.log(-extras))
    parts.append(np.log([resid]))
    return np.concatenate(parts)


def internal_to_natural(form: FunctionalForm, x, n_waves: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    k = form.n_factors
    means, packed, extras, logresid = _split(form, x, n_waves)
    chol = _chol_unpack(packed, k)
    cov = chol @ chol.T
    vech = np.array([cov[i, j] for i, j in _vech_indices(k)])
    parts = [means, vech]
    if form.kind is Kind.NONPARAMETRIC:
        parts.append(extras)
    elif form.kind is Kind.NEGATIVE_EXPONENTIAL:
        parts.append(np.exp(extras))
    elif form.kind is Kind.JENSS_BAYLEY:
        parts.append(-np.exp(-extras))
    parts.append(np.exp([logresid]))
    return np.concatenate(parts)


def internal_loglik_fn(form: FunctionalForm, sample):
    """Log-likelihood as a function of the internal coordinate vector,
    decoding straight to evaluation-ready pieces (no round trip through the
    natural scale, no re-validation per call)."""
    from .moments import _RawParams, _loglik_raw

    n_waves = sample.n_waves
    k = form.n_factors

    def fun(x):
        x = np.asarray(x, dtype=float)
        means, packed, extras, logresid = _split(form, x, n_waves)
        with np.errstate(over="ignore", invalid="ignore"):
            chol = _chol_unpack(packed, k)
            kwargs = {}
            if form.kind is Kind.NONPARAMETRIC:
                kwargs["gamma"] = np.concatenate([[1.0], extras])
            elif form.kind is Kind.NEGATIVE_EXPONENTIAL:
                kwargs["b"] = float(np.exp(extras[0]))
            elif form.kind is Kind.JENSS_BAYLEY:
                kwargs["c"] = float(-np.exp(-extras[0]))
            raw = _RawParams(
                growth_means=means,
                psi_factor=chol,
                residual_var=float(np.exp(logresid)),
                **kwargs,
            )
            return _loglik_raw(form, raw, sample)

    return fun


def forward_gradient(fun, x, f0=None, rel=None):
    """One-sided finite-difference gradient; cheap and accurate enough for
    quasi-Newton search directions (not for convergence checks)."""
    x = np.asarray(x, dtype=float)
    if f0 is None:
        f0 = fun(x)
    if rel is None:
        rel = np.sqrt(np.finfo(float).eps)
    grad = np.empty_like(x)
    for i in range(x.shape[0]):
        h = rel * max(1.0, abs(x[i]))
        up = x.copy()
        up[i] += h
        grad[i] = (fun(up) - f0) / h
    return grad


def natural_jacobian(form: FunctionalForm, x, n_waves: int, step=1e-6) -> np.ndarray:
    """d(natural)/d(internal) at x, by central differences.

    The covariance block is quadratic in the factor entries and exponential
    in the rest, so central differences at this step are accurate to well
    below the standard-error scale they feed.
    """
    x = np.asarray(x, dtype=float)
    p = x.shape[0]
    jac = np.empty((p, p))
    for i in range(p):
        h = step * max(1.0, abs(x[i]))
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        jac[:, i] = (
            internal_to_natural(form, up, n_waves)
            - internal_to_natural(form, down, n_waves)
        ) / (2.0 * h)
    return jac


def central_gradient(fun, x, floor=1e-6, rel=1e-7):
    """Central-difference gradient with per-coordinate step max(floor, rel*|x|)."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.shape[0]):
        h = max(floor, rel * abs(x[i]))
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (fun(up) - fun(down)) / (2.0 * h)
    return grad


def central_hessian(fun, x, rel=None):
    """Symmetric central-difference Hessian.

    Steps default to eps**0.25 * max(1, |x_i|) per coordinate, the usual
    balance between truncation and cancellation for second differences.
    """
    x = np.asarray(x, dtype=float)
    p = x.shape[0]
    if rel is None:
        rel = np.finfo(float).eps ** 0.25
    h = rel * np.maximum(1.0, np.abs(x))
    hess = np.empty((p, p))
    f0 = fun(x)
    for i in range(p):
        up, down = x.copy(), x.copy()
        up[i] += h[i]
        down[i] -= h[i]
        hess[i, i] = (fun(up) - 2.0 * f0 + fun(down)) / h[i] ** 2
    for i in range(p):
        for j in range(i + 1, p):
            pp, pm, mp, mm = x.copy(), x.copy(), x.copy(), x.copy()
            pp[[i, j]] += [h[i], h[j]]
            pm[i] += h[i]
            pm[j] -= h[j]
            mp[i] -= h[i]
            mp[j] += h[j]
            mm[[i, j]] -= [h[i], h[j]]
            hess[i, j] = hess[j, i] = (fun(pp) - fun(pm) - fun(mp) + fun(mm)) / (
                4.0 * h[i] * h[j]
            )
    return hess
