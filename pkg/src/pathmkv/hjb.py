"""Hamiltonian evaluation for the master Bellman equation.

On a finitely supported measure the Hamiltonian supremum admits three forms
that must coincide for integrands without a control-law argument: a brute
force over measurable control assignments, an enumeration over per-atom maps,
and the per-atom essential supremum.  Floating-point equality across forms is
arranged, not hoped for: all three accumulate the same weighted addends in the
same atom order, and float addition is monotone, so the per-atom-argmax map
realizes the esssup sum bit for bit.

With a control-law argument the supremum needs measurable randomization; the
randomized enumerator mixes per-atom actions over a finite grid of levels and
dominates the deterministic forms by construction.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from .calculus import CylindricalFunctional
from .errors import (
    CapacityError,
    ConfigurationError,
    ContractError,
    DomainError,
)
from .hilbert import HilbertVec, SpectralOperator
from .measure import EmpiricalControlMeasure, EmpiricalPathMeasure
from .sde import ModelSpec, PathBatch

ENUMERATION_CAP = 10**6

_FORM_ALIASES = {
    "esssup": "esssup",
    "maps": "maps",
    "m-maps": "maps",
    "mt": "mt",
    "mt-bruteforce": "mt",
    "m_t-bruteforce": "mt",
}


@dataclass
class HamiltonianIntegrand:
    """F(x, u, nu): path x in the support of mu, action u, control law nu.

    Assembled from model pieces and candidate-solution derivatives at a fixed
    (t, mu); measurable by construction.  nu_dependent must be declared so the
    deterministic forms can refuse integrands they cannot maximize.
    """

    fn: object
    nu_dependent: bool = False
    tag: str = "F"

    def value(self, path, u, nu=None) -> float:
        return float(self.fn(path, u, nu))


def _accumulate(seq) -> float:
    # Plain left-to-right accumulation; shared by every Hamiltonian form so
    # that equal addend sequences give bitwise-equal sums.
    total = 0.0
    for v in seq:
        total += v
    return total


def _atom_action_values(F, mu, actions) -> np.ndarray:
    """vals[i, l] = p_i * F(x_i, u_l), the shared addends of all forms."""
    k = mu.n_atoms
    q = actions.shape[0]
    vals = np.empty((k, q))
    for i in range(k):
        path = mu.atom_path(i)
        for l in range(q):
            vals[i, l] = mu.weights[i] * F.value(path, actions[l])
    return vals


def hamiltonian_sup_finite(
    F: HamiltonianIntegrand,
    mu: EmpiricalPathMeasure,
    action_set,
    form: str = "esssup",
    with_argmax: bool = False,
):
    """sup over measurable control assignments of E[F(xi, a)] on a finite U.

    form="esssup": sum_i p_i max_u F(x_i, u).
    form="maps":   enumerate all maps a: supp(mu) -> U (lex order, ties to the
                   lexicographically smallest map).
    form="mt":     brute force over the measurable-assignment class, realized
                   as the same enumeration walked in reversed action order (on
                   finite supports the class collapses to the maps).
    All three coincide exactly.
    """
    if F.nu_dependent:
        raise ConfigurationError(
            "deterministic Hamiltonian forms need a nu-free integrand; "
            "use hamiltonian_sup_randomized"
        )
    form_key = _FORM_ALIASES.get(form.lower())
    if form_key is None:
        raise DomainError(f"unknown Hamiltonian form {form!r}")
    actions = np.atleast_2d(np.asarray(action_set.points, dtype=float))
    k, q = mu.n_atoms, actions.shape[0]
    vals = _atom_action_values(F, mu, actions)

    if form_key == "esssup":
        value = _accumulate(vals[i].max() for i in range(k))
        return (value, None) if with_argmax else value

    if q**k > ENUMERATION_CAP:
        raise CapacityError(
            f"map enumeration needs {q}^{k} evaluations",
            suggestion="use form='esssup'",
        )
    index_ranges = [range(q)] * k if form_key == "maps" else [range(q - 1, -1, -1)] * k
    best = -math.inf
    best_map = None
    for assignment in itertools.product(*index_ranges):
        value = _accumulate(vals[i, assignment[i]] for i in range(k))
        if value > best:
            best = value
            best_map = assignment
    if with_argmax:
        return best, [actions[l] for l in best_map]
    return best


def hamiltonian_sup_randomized(
    F: HamiltonianIntegrand,
    mu: EmpiricalPathMeasure,
    action_set,
    grid_weights=None,
) -> float:
    """sup over randomized measurable assignments a(x_i, r) on a finite grid
    of randomization levels r with the given mixing weights.

    The induced control law nu = sum_{i,g} p_i w_g delta_{a(i,g)} enters F, so
    this dominates the deterministic forms and is strictly better exactly when
    randomizing the law pays (the Wasserstein-penalty integrands).
    """
    actions = np.atleast_2d(np.asarray(action_set.points, dtype=float))
    k, q = mu.n_atoms, actions.shape[0]
    if grid_weights is None:
        grid_weights = np.full(q, 1.0 / q)
    w = np.asarray(grid_weights, dtype=float)
    if abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
        raise ConfigurationError("randomization grid weights must be a probability vector")
    g = w.size
    if q ** (k * g) > ENUMERATION_CAP:
        raise CapacityError(
            f"randomized enumeration needs {q}^{k * g} evaluations",
            suggestion="coarsen the randomization grid",
        )
    joint_w = np.outer(mu.weights, w).ravel()  # (k*g,), index = i*g + gi
    paths = [mu.atom_path(i) for i in range(k)]

    fast = not F.nu_dependent
    vals = _atom_action_values(F, mu, actions) if fast else None

    best = -math.inf
    for assignment in itertools.product(range(q), repeat=k * g):
        if fast:
            value = _accumulate(
                w[gi] * vals[i, assignment[i * g + gi]] for i in range(k) for gi in range(g)
            )
        else:
            chosen = actions[list(assignment)]
            nu = EmpiricalControlMeasure(chosen, joint_w)
            value = _accumulate(
                joint_w[i * g + gi] * F.value(paths[i], actions[assignment[i * g + gi]], nu)
                for i in range(k)
                for gi in range(g)
            )
        if value > best:
            best = value
    if fast:
        # constant-in-r maps belong to the randomized class; folding in their
        # exactly-accumulated values removes the rounding of the w_g split and
        # pins randomized >= deterministic bitwise for nu-free integrands.
        best = max(best, _accumulate(vals[i].max() for i in range(k)))
    return best


# ---------------------------------------------------------------------------
# Investment Hamiltonian, closed form


@dataclass
class InvestmentHamiltonian:
    u_star: HilbertVec
    value: float
    interior: bool
    unconstrained_value: float | None


def investment_hamiltonian_closed_form(
    p: HilbertVec,
    t: float,
    r: float,
    a1: HilbertVec,
    a2: HilbertVec,
    C: SpectralOperator,
    M: SpectralOperator,
    box,
) -> InvestmentHamiltonian:
    """Maximize <C u, p> - e^{-rt} (<a2, u> + <M u, u>) over the box U.

    With diagonal positive M the objective separates across coordinates, so
    the unconstrained maximizer u* = (1/2) M^{-1} (e^{rt} C* p - a2) projects
    onto the box coordinatewise.  When the projection is inactive the optimal
    value equals e^{-rt} <M u*, u*>.  a1 is the state-linear reward weight of
    the investment cost; it does not enter the maximization over u.
    """
    if np.any(M.eigenvalues <= 0):
        raise DomainError("M must have strictly positive eigenvalues")
    disc = math.exp(-r * t)
    q_vec = math.exp(r * t) * (C.eigenvalues * p.coords) - a2.coords
    u_unc = 0.5 * q_vec / M.eigenvalues
    u_star = box.clip(u_unc)
    interior = bool(np.allclose(u_star, u_unc, atol=0.0, rtol=0.0))

    def objective(u):
        return float(
            np.dot(C.eigenvalues * u, p.coords)
            - disc * (np.dot(a2.coords, u) + np.dot(M.eigenvalues * u, u))
        )

    unconstrained_value = (
        disc * float(np.dot(M.eigenvalues * u_unc, u_unc)) if interior else None
    )
    return InvestmentHamiltonian(HilbertVec(u_star), objective(u_star), interior, unconstrained_value)


# ---------------------------------------------------------------------------
# HJB residual for candidate classical solutions


@dataclass
class CandidateSolution:
    """A candidate w for the master equation: a cylindrical functional with
    analytic time, measure and mixed second derivatives, plus the A*-mapped
    measure-derivative field required by the generator term.

    a_star_dmu_fn(t, mu, xs) -> (K, d); when omitted it is derived from the
    model's diagonal generator as eigenvalue-weighting of the dmu field.
    """

    functional: CylindricalFunctional
    a_star_dmu_fn: object = None

    def require_fields(self):
        if not self.functional.has_analytic:
            raise ContractError(
                f"candidate {self.functional.tag!r} lacks analytic derivative fields"
            )

    def a_star_field(self, model: ModelSpec, t: float, mu) -> np.ndarray:
        xs = mu.values_at(t)
        if self.a_star_dmu_fn is not None:
            return np.asarray(self.a_star_dmu_fn(t, mu, xs), dtype=float)
        dmu = np.asarray(self.functional.dmu_fn(t, mu, xs), dtype=float)
        return dmu * model.A.eigenvalues

    def validate_membership(self, model: ModelSpec, instances) -> None:
        """Every derivative field present and finite on the test points."""
        self.require_fields()
        for t, mu in instances:
            vals = [
                self.functional.eval(t, mu),
                self.functional.dt(t, mu),
            ]
            fields = [
                self.functional.dmu_field(t, mu),
                self.functional.dxdmu_field(t, mu),
                self.a_star_field(model, t, mu),
            ]
            if not all(np.isfinite(v) for v in vals) or not all(
                np.all(np.isfinite(f)) for f in fields
            ):
                raise ContractError(
                    f"candidate {self.functional.tag!r} has non-finite derivatives at t={t}"
                )


def hamiltonian_from_model(
    model: ModelSpec, w: CandidateSolution, t: float, mu: EmpiricalPathMeasure
) -> HamiltonianIntegrand:
    """F(x, u, nu) = f + <b, d_mu w(x)> + (1/2) Tr(sigma sigma* sym d2 w(x))
    at the fixed (t, mu), with the symmetrized second derivative in the trace."""
    w.require_fields()
    grid = model.grid

    def fn(path, u, nu):
        xs_t = path.values[grid.node(t)][None, :]
        batch = PathBatch(grid, path.values[None, :, :], grid.node(t))
        u_arr = None if u is None else np.atleast_2d(np.asarray(u, dtype=float))
        f_val = float(model.running_cost_at(t, batch, mu, u_arr, nu)[0])
        b_val = model.drift_at(t, batch, mu, u_arr, nu)[0]
        dmu = np.asarray(w.functional.dmu_fn(t, mu, xs_t), dtype=float)[0]
        total = f_val + float(np.dot(b_val, dmu))
        if model.diffusion is not None:
            s_val = model.diffusion_at(t, batch, mu, u_arr, nu)[0]
            d2 = np.asarray(w.functional.dxdmu_fn(t, mu, xs_t), dtype=float)
            d2 = d2[0] if d2.ndim == 3 else d2
            sym = 0.5 * (d2 + d2.T)
            ns = s_val.shape[0]
            total += 0.5 * float((s_val**2 * np.diag(sym)[:ns]).sum())
        return total

    return HamiltonianIntegrand(fn, nu_dependent=False, tag=f"model:{model.tag}")


@dataclass
class HjbResidualReport:
    residual: float
    terminal_gap: float
    dt_term: float
    a_star_term: float
    hamiltonian: float

    def to_json(self):
        return json.dumps(
            {
                "residual": self.residual,
                "terminal_gap": self.terminal_gap,
                "dt_term": self.dt_term,
                "a_star_term": self.a_star_term,
                "hamiltonian": self.hamiltonian,
            },
            sort_keys=True,
        )


def hjb_residual(
    w: CandidateSolution,
    model: ModelSpec,
    t: float,
    mu: EmpiricalPathMeasure,
    action_set,
) -> HjbResidualReport:
    """Evaluate the master-equation residual of a candidate solution at (t, mu):

        residual = dt w + E<xi_t, A* d_mu w(xi)> + sup-form Hamiltonian,

    plus the terminal gap |w(T, mu) - E g|.  Both are reported without a
    pass/fail verdict; this is a verification tool for supplied candidates.
    """
    w.require_fields()
    grid = model.grid
    dt_term = w.functional.dt(t, mu)
    a_field = w.a_star_field(model, t, mu)
    xi_t = mu.values_at(t)
    a_star_term = float(mu.weights @ (xi_t * a_field).sum(axis=1))
    F = hamiltonian_from_model(model, w, t, mu)
    ham = hamiltonian_sup_finite(F, mu, action_set, form="esssup")
    residual = dt_term + a_star_term + ham

    batch = PathBatch(grid, mu.atoms, grid.steps)
    g_vals = model.terminal_cost_at(batch, mu)
    terminal_gap = abs(w.functional.eval(grid.T, mu) - float(mu.weights @ g_vals))
    return HjbResidualReport(residual, terminal_gap, dt_term, a_star_term, ham)
