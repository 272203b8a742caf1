"""Decoupling of multivariate polynomial vector functions.

A coupled polynomial map ``q = f(p)`` is rewritten as ``q = W g(V^T p)`` with
``r`` univariate polynomial branches ``g_i``.  The construction samples the
Jacobian of ``f`` on a point cloud, stacks the evaluations into a three-way
tensor, and computes a canonical polyadic decomposition by alternating least
squares; the first two factor modes deliver W and V and the branches follow
from a linear fit.  An approximate (reduced-rank) variant refines all factors
jointly by Levenberg-Marquardt on weighted function residuals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

from .polybasis import PolyMap, enumerate_monomials, eval_polymap, jacobian_polymap


@dataclass(frozen=True)
class DecoupledFunction:
    """``q = W g(V^T p)`` with univariate polynomial branches.

    ``branches[i]`` holds ascending coefficients of ``g_i``.  After
    canonicalization the V and W columns have unit norm, branch scales live in
    the coefficients, and branches are sorted by descending coefficient norm.
    """

    w: np.ndarray  # (n_q, r)
    v: np.ndarray  # (n_p, r)
    branches: tuple[np.ndarray, ...]

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.w, dtype=float))
        v = np.atleast_2d(np.asarray(self.v, dtype=float))
        if w.shape[1] != v.shape[1] or w.shape[1] != len(self.branches):
            raise ValueError("W, V and branches must agree on the branch count r")
        if w.shape[1] < 1:
            raise ValueError("need at least one branch (r >= 1)")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "v", v)
        object.__setattr__(
            self, "branches", tuple(np.asarray(b, dtype=float) for b in self.branches)
        )

    @property
    def r(self) -> int:
        return self.w.shape[1]

    @property
    def n_inputs(self) -> int:
        return self.v.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.w.shape[0]

    def branch_degrees(self, rel_tol: float = 1e-6) -> tuple[int, ...]:
        """Effective degree per branch: largest power with a non-negligible
        coefficient (at least 1 by convention)."""
        out = []
        for c in self.branches:
            scale = np.max(np.abs(c)) if len(c) else 0.0
            deg = 1
            for j in range(len(c) - 1, 0, -1):
                if abs(c[j]) > rel_tol * scale:
                    deg = j
                    break
            out.append(deg)
        return tuple(out)

    def to_dict(self) -> dict:
        return {
            "W": self.w.tolist(),
            "V": self.v.tolist(),
            "branches": [b.tolist() for b in self.branches],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecoupledFunction":
        return cls(
            np.asarray(d["W"], dtype=float),
            np.asarray(d["V"], dtype=float),
            tuple(np.asarray(b, dtype=float) for b in d["branches"]),
        )


def eval_decoupled(d: DecoupledFunction, p: np.ndarray) -> np.ndarray:
    """Evaluate ``W g(V^T p)`` at one point (n_p,) or a batch (T, n_p)."""
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = p[None, :] if single else p
    if pts.shape[1] != d.n_inputs:
        raise ValueError(f"expected {d.n_inputs} inputs, got {pts.shape[1]}")
    x = pts @ d.v  # (T, r)
    g = np.stack([np.polyval(c[::-1], x[:, i]) for i, c in enumerate(d.branches)], axis=1)
    q = g @ d.w.T
    return q[0] if single else q


def _branch_values(d: DecoupledFunction, pts: np.ndarray) -> np.ndarray:
    x = pts @ d.v
    return np.stack([np.polyval(c[::-1], x[:, i]) for i, c in enumerate(d.branches)], axis=1)


@dataclass(frozen=True)
class CpdResult:
    factors: tuple[np.ndarray, np.ndarray, np.ndarray]
    rel_error: float
    error_history: np.ndarray
    converged: bool


def cpd_als(tensor: np.ndarray, rank: int, seed: int = 0, max_sweeps: int = 2000,
            rel_tol: float = 1e-10, restarts: int = 5,
            restart_threshold: float = 1e-8) -> CpdResult:
    """Rank-``rank`` canonical polyadic decomposition of a 3-way tensor by ALS.

    Restarts with a fresh random initialization (up to ``restarts`` times)
    when the sweep stagnates above ``restart_threshold`` relative error; the
    best factorization found is returned, flagged unconverged if it never
    reached the threshold.
    """
    norm = np.linalg.norm(tensor)
    if norm == 0.0:
        shape = tensor.shape
        zf = tuple(np.zeros((s, rank)) for s in shape)
        return CpdResult(zf, 0.0, np.zeros(1), True)
    best: CpdResult | None = None
    for attempt in range(restarts + 1):
        rng = np.random.default_rng(seed + 7919 * attempt)
        if attempt == 0:
            # HOSVD-flavored start: leading left singular vectors per mode,
            # padded with noise where the mode is thinner than the rank
            factors = []
            for mode in range(3):
                u_sv = np.linalg.svd(_unfold(tensor, mode), full_matrices=False)[0]
                take = min(rank, u_sv.shape[1])
                f = np.concatenate(
                    [u_sv[:, :take],
                     0.1 * rng.standard_normal((tensor.shape[mode], rank - take))],
                    axis=1,
                )
                factors.append(f)
        else:
            factors = [rng.standard_normal((s, rank)) for s in tensor.shape]
        errors = []
        prev = np.inf
        unfoldings = [_unfold(tensor, m) for m in range(3)]
        for _ in range(max_sweeps):
            for mode in range(3):
                others = [factors[m] for m in range(3) if m != mode]
                kr = _khatri_rao(others[0], others[1])
                gram = (others[0].T @ others[0]) * (others[1].T @ others[1])
                rhs = unfoldings[mode] @ kr
                factors[mode] = np.linalg.solve(
                    gram + 1e-14 * np.eye(rank) * max(np.trace(gram), 1.0), rhs.T
                ).T
            err = _cpd_error(unfoldings[0], factors, norm)
            errors.append(err)
            if abs(prev - err) < rel_tol * max(prev, 1e-300):
                break
            prev = err
        result = CpdResult(tuple(factors), errors[-1], np.asarray(errors),
                           errors[-1] <= restart_threshold)
        if best is None or result.rel_error < best.rel_error:
            best = result
        if best.rel_error <= restart_threshold:
            break
    return best


def _unfold(tensor: np.ndarray, mode: int) -> np.ndarray:
    return np.moveaxis(tensor, mode, 0).reshape(tensor.shape[mode], -1)


def _khatri_rao(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # column-wise Kronecker: rows ordered to match C-order unfolding
    r = a.shape[1]
    return (a[:, None, :] * b[None, :, :]).reshape(-1, r)


def _cpd_error(unfold0: np.ndarray, factors, norm: float) -> float:
    recon = factors[0] @ _khatri_rao(factors[1], factors[2]).T
    return float(np.linalg.norm(unfold0 - recon) / norm)


@dataclass(frozen=True)
class DecoupleResult:
    """Decoupled function plus the fit diagnostics the caller should check."""

    function: DecoupledFunction
    residual_max: float
    residual_rms: float
    converged: bool
    cpd_error: float


def _sample_cloud(rng: np.random.Generator, num_points: int, n_vars: int,
                  domain) -> np.ndarray:
    if domain is None:
        lo = -np.ones(n_vars)
        hi = np.ones(n_vars)
    else:
        lo = np.broadcast_to(np.asarray(domain[0], dtype=float), (n_vars,))
        hi = np.broadcast_to(np.asarray(domain[1], dtype=float), (n_vars,))
    return rng.uniform(lo, hi, size=(num_points, n_vars))


def _cloud_or_points(rng: np.random.Generator, num_points: int, n_vars: int,
                     domain, points: np.ndarray | None) -> np.ndarray:
    if points is None:
        return _sample_cloud(rng, num_points, n_vars, domain)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != n_vars:
        raise ValueError(f"points must have {n_vars} columns")
    if len(pts) > num_points:
        pts = pts[rng.choice(len(pts), num_points, replace=False)]
    return pts


def _test_cloud(seed: int, num_points: int, n_vars: int, domain,
                points: np.ndarray | None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if points is None:
        return _sample_cloud(rng, max(num_points, 256), n_vars, domain)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    take = min(len(pts), max(num_points, 256))
    return pts[rng.choice(len(pts), take, replace=False)]


def _fit_branches(f_vals: np.ndarray, w: np.ndarray, x: np.ndarray,
                  degree: int) -> np.ndarray:
    """Joint linear LS for all branch coefficients given W and branch inputs x.

    Returns coeffs (r, degree+1)."""
    n_pts, n_q = f_vals.shape
    r = w.shape[1]
    powers = np.stack([x**j for j in range(degree + 1)], axis=2)  # (T, r, d+1)
    design = (w[None, :, :, None] * powers[:, None, :, :]).reshape(n_pts * n_q, r * (degree + 1))
    sol, *_ = np.linalg.lstsq(design, f_vals.reshape(-1), rcond=None)
    return sol.reshape(r, degree + 1)


def _refit_w(f_vals: np.ndarray, g_vals: np.ndarray) -> np.ndarray:
    """LS update of W given branch outputs: f ~ g W^T."""
    sol, *_ = np.linalg.lstsq(g_vals, f_vals, rcond=None)
    return sol.T


def canonicalize(d: DecoupledFunction) -> DecoupledFunction:
    """Normalize the scaling/sign/permutation gauge freedom.

    V and W columns are scaled to unit norm (scales absorbed into the branch
    coefficients), signs are fixed so each V column's largest entry and each
    branch's largest coefficient are positive, and branches are sorted by
    descending coefficient norm.
    """
    w = d.w.copy()
    v = d.v.copy()
    coeffs = [c.copy() for c in d.branches]
    r = d.r
    for i in range(r):
        sv = np.linalg.norm(v[:, i])
        if sv > 0:
            v[:, i] /= sv
            coeffs[i] = coeffs[i] * sv ** np.arange(len(coeffs[i]))
        lead = np.argmax(np.abs(v[:, i]))
        if v[lead, i] < 0:
            v[:, i] = -v[:, i]
            signs = (-1.0) ** np.arange(len(coeffs[i]))
            coeffs[i] = coeffs[i] * signs  # g(x) -> g(-x)
        sw = np.linalg.norm(w[:, i])
        if sw > 0:
            w[:, i] /= sw
            coeffs[i] = coeffs[i] * sw
        if len(coeffs[i]):
            lead_c = np.argmax(np.abs(coeffs[i]))
            if coeffs[i][lead_c] < 0:
                coeffs[i] = -coeffs[i]
                w[:, i] = -w[:, i]
    order = np.argsort([-np.linalg.norm(c) for c in coeffs], kind="stable")
    return DecoupledFunction(w[:, order], v[:, order], tuple(coeffs[i] for i in order))


def decouple_exact(f: PolyMap, r: int, num_points: int = 500, seed: int = 0,
                   domain=None, branch_degree: int | None = None,
                   points: np.ndarray | None = None) -> DecoupleResult:
    """Exact tensor-based decoupling of a polynomial map.

    Evaluates the Jacobian of ``f`` at ``num_points`` seeded random points,
    stacks the matrices into an ``n_q x n_p x T`` tensor, computes its rank-r
    CPD by ALS (with restarts), reads W and V off the first two modes, and
    fits the univariate branches by least squares on the function values.

    ``domain`` bounds the sampled cloud (default the unit box); alternatively
    ``points`` supplies the cloud directly, e.g. states visited by a model, so
    the decoupled form is accurate on the operating region.

    The result is canonicalized (see :func:`canonicalize`) and its residual
    ``max |f(p) - W g(V^T p)|`` is evaluated on a fresh test cloud.  CPD
    stagnation is reported through ``converged=False``, never raised.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    if f.basis.degree_max < 1:
        raise ValueError("f must have degree >= 1 to carry Jacobian information")
    degree = f.basis.degree_max if branch_degree is None else branch_degree
    rng = np.random.default_rng(seed)
    pts = _cloud_or_points(rng, num_points, f.n_vars, domain, points)
    jac = jacobian_polymap(f, pts)  # (T, n_q, n_p)
    tensor = np.moveaxis(jac, 0, 2)  # (n_q, n_p, T)
    cpd = cpd_als(tensor, r, seed=seed)
    w, v = cpd.factors[0], cpd.factors[1]
    # unit-norm directions; scales are re-estimated by the branch fit
    w = _safe_normalize(w)
    v = _safe_normalize(v)
    f_vals = eval_polymap(f, pts)
    coeffs = None
    prev_err = np.inf
    for _ in range(50):  # alternate branch-coefficient and W updates to convergence
        coeffs = _fit_branches(f_vals, w, pts @ v, degree)
        g_vals = np.stack(
            [np.polyval(coeffs[i][::-1], pts @ v[:, i]) for i in range(r)], axis=1
        )
        w = _refit_w(f_vals, g_vals)
        err = float(np.linalg.norm(f_vals - g_vals @ w.T))
        if err >= prev_err * (1.0 - 1e-12):
            break
        prev_err = err
    # joint second-order polish removes the linear-convergence plateau of the
    # alternating updates (machine precision for exactly decomposable maps)
    _, func = _lm_refine(DecoupledFunction(w, v, tuple(coeffs)), pts, f_vals,
                         np.ones(f.n_outputs), max_iterations=30)
    func = canonicalize(func)
    test = _test_cloud(seed + 1, num_points, f.n_vars, domain, points)
    resid = eval_polymap(f, test) - eval_decoupled(func, test)
    return DecoupleResult(
        function=func,
        residual_max=float(np.max(np.abs(resid))),
        residual_rms=float(np.sqrt(np.mean(resid**2))),
        converged=cpd.converged,
        cpd_error=cpd.rel_error,
    )


def _safe_normalize(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=0)
    norms[norms == 0.0] = 1.0
    return m / norms


def decouple_approx(f: PolyMap, r: int, branch_degree: int | None = None,
                    weight: np.ndarray | None = None, num_points: int = 500,
                    seed: int = 0, domain=None, max_iterations: int = 200,
                    restarts: int = 2, points: np.ndarray | None = None) -> DecoupleResult:
    """Approximate rank-r decoupling with joint Levenberg-Marquardt refinement.

    Starts from the CPD-based construction of :func:`decouple_exact`, then
    refines W, V and the branch coefficients together on weighted function
    residuals over the seeded point cloud (or caller-supplied ``points``).
    The reported residuals use a held-out cloud.  ``weight`` is per-output; a
    zero weight removes that output from the objective exactly.  The best of
    ``restarts + 1`` seeded attempts is returned; divergence inside LM just
    returns the best iterate.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    degree = f.basis.degree_max if branch_degree is None else branch_degree
    w_out = np.ones(f.n_outputs) if weight is None else np.asarray(weight, dtype=float)
    if w_out.shape != (f.n_outputs,) or np.any(w_out < 0):
        raise ValueError("weight must be a nonnegative vector, one entry per output")
    rng = np.random.default_rng(seed)
    pts = _cloud_or_points(rng, num_points, f.n_vars, domain, points)
    f_vals = eval_polymap(f, pts)
    # zero-weight outputs are excluded end to end: the CPD initialization only
    # ever sees the active rows, and their W rows stay at zero through the LM
    active = np.flatnonzero(w_out > 0)
    if len(active) == 0:
        raise ValueError("at least one output must carry positive weight")
    f_active = PolyMap(f.basis, f.coefficients[active])
    best: tuple[float, DecoupledFunction] | None = None
    for attempt in range(restarts + 1):
        init = decouple_exact(f_active, r, num_points=num_points, seed=seed + 101 * attempt,
                              domain=domain, branch_degree=degree, points=points)
        w_full = np.zeros((f.n_outputs, r))
        w_full[active] = init.function.w
        start = DecoupledFunction(w_full, init.function.v, init.function.branches)
        cost, func = _lm_refine(start, pts, f_vals, w_out, max_iterations)
        if best is None or cost < best[0]:
            best = (cost, func)
    func = canonicalize(best[1])
    held = _test_cloud(seed + 9999, num_points, f.n_vars, domain, points)
    resid = (eval_polymap(f, held) - eval_decoupled(func, held)) * np.sqrt(w_out)
    active = w_out > 0
    resid_active = resid[:, active]
    return DecoupleResult(
        function=func,
        residual_max=float(np.max(np.abs(resid_active))) if resid_active.size else 0.0,
        residual_rms=float(np.sqrt(np.mean(resid_active**2))) if resid_active.size else 0.0,
        converged=True,
        cpd_error=np.nan,
    )


def _lm_refine(func: DecoupledFunction, pts: np.ndarray, f_vals: np.ndarray,
               w_out: np.ndarray, max_iterations: int) -> tuple[float, DecoupledFunction]:
    n_q, r = func.w.shape
    n_p = func.v.shape[0]
    deg = max(len(c) for c in func.branches) - 1
    coeffs = np.zeros((r, deg + 1))
    for i, c in enumerate(func.branches):
        coeffs[i, : len(c)] = c
    theta = np.concatenate([func.w.ravel(), func.v.ravel(), coeffs.ravel()])
    sqrt_w = np.sqrt(w_out)
    n_pts = pts.shape[0]

    def unpack(th):
        w = th[: n_q * r].reshape(n_q, r)
        v = th[n_q * r : n_q * r + n_p * r].reshape(n_p, r)
        c = th[n_q * r + n_p * r :].reshape(r, deg + 1)
        return w, v, c

    def residual(th):
        w, v, c = unpack(th)
        x = pts @ v
        g = np.stack([np.polyval(c[i][::-1], x[:, i]) for i in range(r)], axis=1)
        return ((g @ w.T - f_vals) * sqrt_w).ravel()

    def jacobian(th):
        w, v, c = unpack(th)
        x = pts @ v  # (T, r)
        powers = np.stack([x**j for j in range(deg + 1)], axis=2)  # (T, r, deg+1)
        g = np.einsum("trj,rj->tr", powers, c)
        dg = np.zeros_like(x)
        for j in range(1, deg + 1):
            dg += j * c[:, j][None, :] * x ** (j - 1)
        jw = np.zeros((n_pts, n_q, n_q * r))
        for o in range(n_q):
            jw[:, o, o * r : (o + 1) * r] = g
        jv = np.einsum("oi,ti,tp->topi", w, dg, pts).reshape(n_pts, n_q, n_p * r)
        # reorder: V is stored (n_p, r) row-major -> flat index p * r + i
        jc = np.einsum("oi,tij->toij", w, powers).reshape(n_pts, n_q, r * (deg + 1))
        full = np.concatenate([jw, jv, jc], axis=2)
        return (full * sqrt_w[None, :, None]).reshape(n_pts * n_q, -1)

    r_vec = residual(theta)
    cost = float(r_vec @ r_vec)
    lam = 1e-3
    for _ in range(max_iterations):
        jac = jacobian(theta)
        grad = jac.T @ r_vec
        if np.max(np.abs(grad)) < 1e-12 * max(cost, 1.0):
            break
        jtj = jac.T @ jac
        accepted = False
        for _ in range(60):
            try:
                step = np.linalg.solve(jtj + lam * np.eye(len(theta)), -grad)
            except np.linalg.LinAlgError:
                lam *= 2.0
                continue
            r_try = residual(theta + step)
            c_try = float(r_try @ r_try)
            if np.isfinite(c_try) and c_try < cost:
                theta = theta + step
                rel = (cost - c_try) / max(cost, 1e-300)
                cost = c_try
                r_vec = r_try
                lam = max(lam / 2.0, 1e-12)
                accepted = True
                if rel < 1e-12:
                    return cost, _func_from_theta(unpack(theta))
                break
            lam *= 2.0
        if not accepted:
            break
    return cost, _func_from_theta(unpack(theta))


def _func_from_theta(wvc) -> DecoupledFunction:
    w, v, c = wvc
    return DecoupledFunction(w, v, tuple(c[i] for i in range(c.shape[0])))


def to_polymap(d: DecoupledFunction) -> PolyMap:
    """Expand ``W g(V^T p)`` into an explicit multivariate PolyMap.

    Exact by the multinomial theorem; the result spans total degrees 0 through
    the maximum branch degree.  This is the adapter that lets a decoupled
    state polynomial replace the coupled map inside a state-space model.
    """
    n_p = d.n_inputs
    max_deg = max(len(c) - 1 for c in d.branches)
    basis = enumerate_monomials(n_p, 0, max_deg)
    index = {e: i for i, e in enumerate(basis.exponents)}
    coeff = np.zeros((d.n_outputs, len(basis)))
    for i in range(d.r):
        v = d.v[:, i]
        c = d.branches[i]
        for j, cj in enumerate(c):
            if cj == 0.0:
                continue
            # (sum_k v_k p_k)^j expanded over exponent multisets
            for combo in combinations_with_replacement(range(n_p), j):
                exp = [0] * n_p
                for k in combo:
                    exp[k] += 1
                mult = math.factorial(j)
                coef = cj
                for k, e in enumerate(exp):
                    mult //= math.factorial(e)
                    coef *= v[k] ** e
                coeff[:, index[tuple(exp)]] += d.w[:, i] * (mult * coef)
    return PolyMap(basis, coeff)
