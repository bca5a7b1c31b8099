"""Magnetostatics of paramagnetic bodies in a uniform imposed field.

Each body is homogeneous with permeability mu against a vacuum value of one,
so the potential is harmonic on both sides of every surface and the jump
conditions reduce to a single second-kind scalar equation for a single-layer
charge density, coupled across bodies through their exterior fields. From
the solved charge the one-sided surface fields follow without further
quadrature: the tangential part by spectral differentiation of the boundary
potential, the normal part from the jump relations. The mismatch of the
Maxwell stress across the surface is the traction the fluid problem sees,
and it enters the mobility solve as a full incident density so that no
moment of the magnetic loading is thrown away.
"""

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from . import layers, mobility, sphharm

VACUUM_PERMEABILITY = 1.0

DEFAULT_TOL = 1e-10
DEFAULT_MAXITER = 200


class MagneticConfig:
    """Imposed uniform field and the permeability contrast of the bodies."""

    def __init__(self, field, mu_ratio):
        self.field = np.asarray(field, dtype=float).reshape(3)
        self.mu_ratio = float(mu_ratio)
        if not self.mu_ratio > 0.0:
            raise ValueError("permeability ratio must be positive, got %r"
                             % (mu_ratio,))

    @property
    def contrast(self):
        """Jump parameter (mu - mu0)/(mu + mu0); always inside (-1, 1)."""
        mu = self.mu_ratio * VACUUM_PERMEABILITY
        return (mu - VACUUM_PERMEABILITY) / (mu + VACUUM_PERMEABILITY)


def _split_scalar(flat, bodies):
    out = []
    at = 0
    for b in bodies:
        out.append(flat[at:at + b.num_nodes])
        at += b.num_nodes
    return out


class PotentialSolution:
    """Solved surface charges plus everything needed to evaluate fields.

    The potential is the imposed part plus a single layer of the charge;
    the charge alone determines both one-sided surface fields and the
    off-surface field through the layer machinery.
    """

    def __init__(self, bodies, config, charge, report, cache, provider,
                 upsampling):
        self.bodies = list(bodies)
        self.config = config
        self.charge = charge
        self.report = report
        self._cache = cache
        self._provider = provider
        self._upsampling = upsampling
        self._surface = None

    def _surface_terms(self):
        """Per-body boundary potential and normal-derivative ingredients."""
        if self._surface is None:
            phi_s = layers.fast_apply(layers.LAPLACE_SINGLE, self.bodies,
                                      self.charge, self._cache,
                                      provider=self._provider,
                                      upsampling=self._upsampling)
            dn_s = layers.fast_apply(layers.LAPLACE_ADJOINT, self.bodies,
                                     self.charge, self._cache,
                                     provider=self._provider,
                                     upsampling=self._upsampling)
            self._surface = (phi_s, dn_s)
        return self._surface

    def boundary_potential(self, index):
        """Total potential on the surface of one body (continuous across it)."""
        phi_s, _ = self._surface_terms()
        body = self.bodies[index]
        return -body.positions() @ self.config.field + phi_s[index]


def _shape_preconditioner(bodies, cache, eta):
    """Per-shape LU factors of the single-body operator; the scalar blocks
    are rotation invariant, so one factor serves every pose of a shape."""
    factors = {}
    for b in bodies:
        key = (id(b.shape), b.p)
        if key not in factors:
            K = cache.block(b, layers.LAPLACE_ADJOINT).matrix
            factors[key] = lu_factor(0.5 * np.eye(b.num_nodes) + eta * K)
    return factors


def solve_potential(bodies, config, cache=None, provider=None,
                    tol=DEFAULT_TOL, maxiter=DEFAULT_MAXITER,
                    upsampling=layers.DEFAULT_UPSAMPLING, initial=None,
                    use_preconditioner=True):
    """Solve the jump conditions for the surface charge of every body.

    The equation is second kind with spectrum clustered at one half, so a
    handful of iterations suffice at any contrast the physics allows; the
    per-shape preconditioner removes the remaining dependence on shape.
    An initial charge (for example from the previous time step) shortens
    the solve further.
    """
    bodies = list(bodies)
    cache = cache or layers.ShapeOperatorCache()
    provider = provider or layers.DirectSummation()
    eta = config.contrast
    rhs = np.concatenate([eta * (b.normals() @ config.field) for b in bodies])
    if eta == 0.0 or not np.any(rhs):
        charge = [np.zeros(b.num_nodes) for b in bodies]
        return PotentialSolution(bodies, config, charge,
                                 mobility.SolveReport(0, [0.0], True),
                                 cache, provider, upsampling)

    def apply_system(flat):
        qs = _split_scalar(flat, bodies)
        Kq = layers.fast_apply(layers.LAPLACE_ADJOINT, bodies, qs, cache,
                               provider=provider, upsampling=upsampling)
        return np.concatenate([0.5 * q + eta * k for q, k in zip(qs, Kq)])

    precond = None
    if use_preconditioner:
        factors = _shape_preconditioner(bodies, cache, eta)

        def precond(flat):
            qs = _split_scalar(flat, bodies)
            return np.concatenate([
                lu_solve(factors[(id(b.shape), b.p)], q)
                for b, q in zip(bodies, qs)])

    x0 = None if initial is None else np.concatenate(
        [np.asarray(q, dtype=float) for q in initial])
    flat, report = mobility.gmres(apply_system, rhs, tol=tol, maxiter=maxiter,
                                  precondition=precond, x0=x0)
    charge = _split_scalar(flat, bodies)
    return PotentialSolution(bodies, config, charge, report, cache, provider,
                             upsampling)


# ---------------------------------------------------------------------------
# field evaluation

def _tangential_gradient(body, values):
    """Surface gradient of a scalar field given at the nodes, in world frame.

    Spectral differentiation in the parametrization, then the inverse first
    fundamental form maps parametric derivatives to a tangent vector.
    """
    grid = body.ref.grid
    coeffs = sphharm.forward_sht(grid, np.asarray(values, dtype=float))
    f_th = np.real(coeffs @ grid.ynm_dtheta())
    _, orders = sphharm.mode_degrees(body.p)
    f_ph = np.real((coeffs * (1j * orders)) @ grid.ynm())
    E, F, G = body.ref.first_form
    W2 = E * G - F * F
    a = (G * f_th - F * f_ph) / W2
    b = (E * f_ph - F * f_th) / W2
    grad_ref = a[:, None] * body.ref.x_theta + b[:, None] * body.ref.x_phi
    return grad_ref @ body.rotation().T


def surface_field(solution, index, side):
    """One-sided total field on a body surface, at the nodes.

    The tangential part is shared by both sides (the potential is continuous
    across the layer); only the normal derivative jumps, and its one-sided
    values come from the charge and the on-surface normal-derivative
    operator rather than from any limiting quadrature.
    """
    if side not in ("interior", "exterior"):
        raise ValueError("side must be 'interior' or 'exterior', got %r"
                         % (side,))
    body = solution.bodies[index]
    _, dn_s = solution._surface_terms()
    phi = solution.boundary_potential(index)
    grad_t = _tangential_gradient(body, phi)
    sign = -0.5 if side == "exterior" else 0.5
    normals = body.normals()
    dn = -(normals @ solution.config.field) + sign * solution.charge[index] \
        + dn_s[index]
    return -(grad_t + dn[:, None] * normals)


def magnetic_field(solution, targets=None, side="exterior"):
    """Total field: one-sided surface values or off-surface evaluation.

    With no targets, returns the per-body list of one-sided nodal fields for
    side 'interior' or 'exterior'. With targets, evaluates the potential
    representation away from the surfaces: side 'exterior' demands every
    point outside all bodies, 'interior' demands every point inside one,
    and 'off-surface' accepts both. Points on a surface are outside the
    contract either way; use the sided nodal values there.
    """
    if targets is None:
        return [surface_field(solution, i, side)
                for i in range(len(solution.bodies))]
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    inside = np.zeros(len(targets), dtype=bool)
    for body in solution.bodies:
        inside |= body.contains(targets)
    if side == "exterior":
        if np.any(inside):
            raise layers.DomainError(
                "exterior-side evaluation requested at a point inside a body")
    elif side == "interior":
        if not np.all(inside):
            raise layers.DomainError(
                "interior-side evaluation requested at a point outside "
                "every body")
    elif side != "off-surface":
        raise ValueError("side must be 'interior', 'exterior', or "
                         "'off-surface', got %r" % (side,))
    return solution.config.field - _probe(layers.LAPLACE_GRADIENT, solution,
                                          targets)


def _probe(kernel, solution, targets):
    """Layer sum over all bodies at probe points, through the upsampled rule.

    Unlike the surface-to-surface coupling, probe evaluation is cheap enough
    to upsample unconditionally, which keeps full accuracy at moderate
    distances where the native rule already loses digits.
    """
    total = None
    for body, q in zip(solution.bodies, solution.charge):
        vals = layers.near_eval(kernel, body, q, targets,
                                upsampling=solution._upsampling,
                                provider=solution._provider, interior_ok=True)
        total = vals if total is None else total + vals
    return total


def scalar_potential(solution, targets):
    """Total potential at off-surface points (valid on either side)."""
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    return -targets @ solution.config.field \
        + _probe(layers.LAPLACE_SINGLE, solution, targets)


# ---------------------------------------------------------------------------
# Maxwell stresses and the coupling to the flow problem

def maxwell_traction(solution, index):
    """Surface traction from the mismatch of the Maxwell stress.

    Each side contributes its permeability times (H Ht - |H|^2/2 I) n, and
    the traction is the exterior value minus the interior one.
    """
    body = solution.bodies[index]
    normals = body.normals()
    mu_out = VACUUM_PERMEABILITY
    mu_in = solution.config.mu_ratio * VACUUM_PERMEABILITY
    traction = np.zeros((body.num_nodes, 3))
    for side, mu, sign in (("exterior", mu_out, 1.0),
                           ("interior", mu_in, -1.0)):
        H = surface_field(solution, index, side)
        Hn = np.einsum("ni,ni->n", H, normals)
        H2 = np.einsum("ni,ni->n", H, H)
        traction += sign * mu * (Hn[:, None] * H - 0.5 * H2[:, None] * normals)
    return traction


def magnetic_loads(solution):
    """Net forces and torques of the Maxwell tractions, one row per body."""
    n = len(solution.bodies)
    forces = np.empty((n, 3))
    torques = np.empty((n, 3))
    for i, body in enumerate(solution.bodies):
        forces[i], torques[i] = mobility.apply_G(
            body, maxwell_traction(solution, i))
    return forces, torques


def magnetic_mobility_step(bodies, config, solver=None, potential_tol=DEFAULT_TOL,
                           initial=None, **solver_kwargs):
    """One quasi-static coupling step: charges, tractions, then velocities.

    Returns the mobility result and the potential solution it came from;
    the tractions are used directly as incident densities.
    """
    if solver is None:
        solver = mobility.MobilitySolver(bodies, **solver_kwargs)
    solution = solve_potential(bodies, config, cache=solver.cache,
                               provider=solver.provider, tol=potential_tol,
                               upsampling=solver.upsampling, initial=initial)
    rho = [maxwell_traction(solution, i) for i in range(len(bodies))]
    result = solver.solve_incident(rho)
    return result, solution


class MagneticCoupling:
    """Incident-density model for the time stepper.

    The magnetostatic problem is re-solved from scratch at every stage
    configuration; the previous charge only seeds the iteration. The last
    solution stays available for inspection between steps.
    """

    def __init__(self, config, cache=None, provider=None, tol=DEFAULT_TOL,
                 maxiter=DEFAULT_MAXITER,
                 upsampling=layers.DEFAULT_UPSAMPLING):
        self.config = config
        self.cache = cache or layers.ShapeOperatorCache()
        self.provider = provider or layers.DirectSummation()
        self.tol = tol
        self.maxiter = maxiter
        self.upsampling = upsampling
        self.last_solution = None

    def __call__(self, t, bodies):
        initial = None
        if self.last_solution is not None \
                and len(self.last_solution.charge) == len(bodies):
            initial = self.last_solution.charge
        solution = solve_potential(bodies, self.config, cache=self.cache,
                                   provider=self.provider, tol=self.tol,
                                   maxiter=self.maxiter,
                                   upsampling=self.upsampling,
                                   initial=initial)
        self.last_solution = solution
        return [maxwell_traction(solution, i) for i in range(len(bodies))]
