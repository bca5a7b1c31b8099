"""Mobility solves: prescribed forces and torques to rigid-body velocities.

The unknown surface density is split into an incident part carrying the net
force and torque of each body and a scattered correction with zero moments.
The correction solves a second-kind system whose operator is the interior
traction of the single layer plus a rank-six-per-body term that restores the
moments removed by the traction operator's nullspace. The system is applied
matrix-free through the layer machinery and solved with right-preconditioned
GMRES, the preconditioner being the exact inverse of each body's own block,
factored once per shape in the reference orientation and conjugated by the
body rotation on application.
"""

import time
import warnings

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from . import kernels, layers

DEFAULT_TOL = 1e-6
DEFAULT_MAXITER = 200


class ConvergenceError(Exception):
    """GMRES ran out of iterations; carries the best iterate found."""

    def __init__(self, message, best, residuals):
        super().__init__(message)
        self.best = best
        self.residuals = residuals


class GeometryError(Exception):
    pass


class SolveReport:
    def __init__(self, iterations, residuals, converged, timings=None):
        self.iterations = iterations
        self.residuals = list(residuals)
        self.residual = self.residuals[-1] if self.residuals else 0.0
        self.converged = converged
        self.timings = dict(timings or {})


def pack(fields):
    """Concatenate per-body (m_i, 3) fields into one flat vector."""
    return np.concatenate([np.asarray(f).reshape(-1) for f in fields])


def unpack(flat, bodies):
    out = []
    at = 0
    for b in bodies:
        n = 3 * b.num_nodes
        out.append(flat[at:at + n].reshape(-1, 3))
        at += n
    return out


def incident_density(body, force, torque):
    """Density carrying the prescribed net force and torque of one body."""
    force = np.asarray(force, dtype=float)
    torque = np.asarray(torque, dtype=float)
    omega_like = np.linalg.solve(body.inertia(), torque)
    arm = body.positions() - body.center
    return force / body.area + np.cross(omega_like, arm)


def apply_G(body, density):
    """Net force and torque moments of a nodal density."""
    w = body.quad_weights
    force = np.einsum("n,ni->i", w, density)
    arm = body.positions() - body.center
    torque = np.einsum("n,ni->i", w, np.cross(arm, density))
    return force, torque


def apply_L(body, density):
    """Moment feedback term: constant force part plus torque-driven rotation."""
    force, torque = apply_G(body, density)
    arm = body.positions() - body.center
    return force + np.cross(torque, arm)


def rigid_field(body, velocity, omega):
    arm = body.positions() - body.center
    return np.asarray(velocity) + np.cross(np.asarray(omega), arm)


def extract_rigid_velocity(body, u):
    """Project a surface velocity field onto translation and rotation."""
    w = body.quad_weights
    v = np.einsum("n,ni->i", w, u) / body.area
    arm = body.positions() - body.center
    moment = np.einsum("n,ni->i", w, np.cross(arm, u))
    omega = np.linalg.solve(body.inertia(), moment)
    return v, omega


# ---------------------------------------------------------------------------
# dense assemblies (reference path and pose-frozen apply)

def _kernel_block(kernel, tpoints, tnormals, spoints):
    if kernel == layers.STOKES_SINGLE:
        return kernels.stokeslet_block(tpoints, spoints)
    if kernel == layers.STOKES_TRACTION:
        return kernels.traction_block(tpoints, tnormals, spoints)
    raise ValueError("dense assembly supports Stokes kernels only")


def _near_pair_matrix(kernel, tpoints, tnormals, src_body, upsampling):
    """Dense map from source-body nodal values to near targets, by the
    upsampled rule: resample to the fine grid, then sum from fine sources."""
    p = src_body.p
    p_fine = int(round(upsampling * p))
    fine = src_body.shape.geometry(p_fine)
    R = src_body.rotation()
    spts = src_body.center + fine.positions @ R.T
    blocks = _kernel_block(kernel, tpoints, tnormals, spts)
    blocks = blocks * fine.quad_weights[None, :, None, None]
    from . import sphharm
    Yf = sphharm.ynm_at(p, fine.grid.theta, fine.grid.phi)
    P = np.real(Yf.T @ src_body.ref.grid.forward_matrix())
    comp = np.einsum("tfij,fb->tibj", blocks, P)
    return comp.reshape(3 * len(tpoints), 3 * src_body.num_nodes)


def dense_layer_matrix(kernel, bodies, cache, upsampling=layers.DEFAULT_UPSAMPLING):
    """Full dense matrix of a Stokes layer operator over all bodies.

    Content matches fast_apply: singular self blocks on the diagonal, the
    smooth rule between bodies, and upsampled near corrections.
    """
    sizes = [3 * b.num_nodes for b in bodies]
    offsets = np.cumsum([0] + sizes)
    A = np.zeros((offsets[-1], offsets[-1]))
    for i, tb in enumerate(bodies):
        ti, hi = offsets[i], offsets[i + 1]
        tp = tb.positions()
        tn = tb.normals()
        for j, sb in enumerate(bodies):
            sj, hj = offsets[j], offsets[j + 1]
            if i == j:
                blk = layers.rotate_self_matrix(cache.block(tb, kernel),
                                                tb.rotation())
                A[ti:hi, sj:hj] = blk.matrix
                continue
            block = _kernel_block(kernel, tp, tn, sb.positions())
            block = block * sb.quad_weights[None, :, None, None]
            sub = block.transpose(0, 2, 1, 3).reshape(hi - ti, hj - sj)
            mask = layers._near_route_mask(tp, sb)
            if np.any(mask):
                rows = np.repeat(mask, 3)
                sub[rows] = _near_pair_matrix(kernel, tp[mask], tn[mask],
                                              sb, upsampling)
            A[ti:hi, sj:hj] = sub
    return A


def _cross_mat(a):
    return np.array([[0.0, -a[2], a[1]],
                     [a[2], 0.0, -a[0]],
                     [-a[1], a[0], 0.0]])


def _moment_term_matrix(arm, weights):
    """Dense matrix of the moment feedback term for one body."""
    m = len(arm)
    C = np.zeros((m, 3, 3))
    C[:, 0, 1] = -arm[:, 2]
    C[:, 0, 2] = arm[:, 1]
    C[:, 1, 0] = arm[:, 2]
    C[:, 1, 2] = -arm[:, 0]
    C[:, 2, 0] = -arm[:, 1]
    C[:, 2, 1] = arm[:, 0]
    blk = np.einsum("aij,sjk->aisk", C, -C)
    blk += np.eye(3)[None, :, None, :] * np.ones((m, 1, m, 1))
    blk *= weights[None, None, :, None]
    return blk.reshape(3 * m, 3 * m)


def dense_L_matrix(bodies):
    """Block-diagonal dense matrix of the moment feedback term."""
    sizes = [3 * b.num_nodes for b in bodies]
    offsets = np.cumsum([0] + sizes)
    A = np.zeros((offsets[-1], offsets[-1]))
    for i, b in enumerate(bodies):
        A[offsets[i]:offsets[i + 1], offsets[i]:offsets[i + 1]] = \
            _moment_term_matrix(b.positions() - b.center, b.quad_weights)
    return A


# ---------------------------------------------------------------------------
# preconditioner

class BlockPreconditioner:
    """Exact per-body inverse of the body's own system block.

    The block is assembled and factored once per shape and degree in the
    reference orientation; a body's rotation enters only by conjugating the
    vectors around the factored solve, so no refactorization happens as
    bodies move.
    """

    def __init__(self, cache):
        self.cache = cache
        self._factors = {}

    def _factor(self, body):
        key = (id(body.shape), body.p)
        if key not in self._factors:
            ref = body.ref
            m = ref.num_nodes
            K = self.cache.block(body, layers.STOKES_TRACTION).matrix
            A = 0.5 * np.eye(3 * m) + K \
                + _moment_term_matrix(ref.positions, ref.quad_weights)
            try:
                self._factors[key] = lu_factor(A)
            except np.linalg.LinAlgError:
                raise RuntimeError(
                    "singular per-body block (condition estimate %.3e); "
                    "the formulation guarantees injectivity, so the surface "
                    "discretization is degenerate" % np.linalg.cond(A))
        return self._factors[key]

    def solve(self, bodies, flat):
        parts = unpack(flat, bodies)
        out = []
        for body, v in zip(bodies, parts):
            factor = self._factor(body)
            R = body.rotation()
            ref_v = v @ R
            sol = lu_solve(factor, ref_v.reshape(-1)).reshape(-1, 3)
            out.append(sol @ R.T)
        return pack(out)


# ---------------------------------------------------------------------------
# GMRES

def gmres(apply_op, b, tol=DEFAULT_TOL, maxiter=DEFAULT_MAXITER,
          precondition=None, x0=None):
    """Right-preconditioned GMRES with full orthogonalization, no restarts.

    Right preconditioning keeps the monitored residual equal to the true
    residual of the original system, relative to |b| even when an initial
    guess is given. Non-convergence raises, carrying the best iterate and
    the residual history.
    """
    b = np.asarray(b, dtype=float)
    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        return np.zeros_like(b), SolveReport(0, [0.0], True)
    r0 = b if x0 is None else b - apply_op(np.asarray(x0, dtype=float))
    beta = np.linalg.norm(r0)
    if beta / norm_b <= tol:
        x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
        return x, SolveReport(0, [beta / norm_b], True)
    V = [r0 / beta]
    H = np.zeros((maxiter + 1, maxiter))
    residuals = []
    y = None
    for k in range(maxiter):
        z = V[k] if precondition is None else precondition(V[k])
        w = apply_op(z)
        for i in range(k + 1):
            H[i, k] = V[i] @ w
            w = w - H[i, k] * V[i]
        for i in range(k + 1):                    # one re-orthogonalization
            c = V[i] @ w
            H[i, k] += c
            w = w - c * V[i]
        H[k + 1, k] = np.linalg.norm(w)
        e1 = np.zeros(k + 2)
        e1[0] = beta
        y, res2, _, _ = np.linalg.lstsq(H[:k + 2, :k + 1], e1, rcond=None)
        resid = np.linalg.norm(H[:k + 2, :k + 1] @ y - e1)
        residuals.append(resid / norm_b)
        if residuals[-1] <= tol or H[k + 1, k] < 1e-300:
            break
        V.append(w / H[k + 1, k])
    x = np.tensordot(y, np.array(V[:len(y)]), axes=(0, 0))
    if precondition is not None:
        x = precondition(x)
    if x0 is not None:
        x = x + x0
    if residuals[-1] > tol:
        raise ConvergenceError(
            "no convergence in %d iterations (best residual %.3e)"
            % (len(residuals), residuals[-1]), x, residuals)
    return x, SolveReport(len(residuals), residuals, True)


# ---------------------------------------------------------------------------
# the solver

class MobilityResult:
    def __init__(self, velocity, omega, rho, mu, surface_velocity, report,
                 moment_residuals):
        self.velocity = velocity
        self.omega = omega
        self.rho = rho
        self.mu = mu
        self.surface_velocity = surface_velocity
        self.report = report
        self.moment_residuals = moment_residuals

    @property
    def total_density(self):
        return [r + m for r, m in zip(self.rho, self.mu)]


class MobilitySolver:
    """Matrix-free mobility solves over a fixed set of bodies.

    Bodies may move between solves; self blocks and preconditioner factors
    are reference-frame and never rebuilt. For small node counts the layer
    operator is frozen into a dense matrix per pose, which pays off after a
    couple of GMRES iterations; set freeze=False to force matrix-free
    application throughout.
    """

    def __init__(self, bodies, cache=None, provider=None, tol=DEFAULT_TOL,
                 maxiter=DEFAULT_MAXITER, upsampling=layers.DEFAULT_UPSAMPLING,
                 use_preconditioner=True, freeze="auto", freeze_limit=1200):
        self.bodies = list(bodies)
        self.cache = cache or layers.ShapeOperatorCache()
        self.provider = provider or layers.DirectSummation()
        self.tol = tol
        self.maxiter = maxiter
        self.upsampling = upsampling
        self.use_preconditioner = use_preconditioner
        total = sum(b.num_nodes for b in self.bodies)
        if freeze == "auto":
            self.freeze = total <= freeze_limit
        else:
            self.freeze = bool(freeze)
        self.preconditioner = BlockPreconditioner(self.cache)
        self._pose_key = None
        self._frozen_K = None
        if getattr(self.provider, "accuracy", 0.0) > tol:
            warnings.warn("summation provider accuracy %.1e is looser than "
                          "the solver tolerance %.1e"
                          % (self.provider.accuracy, tol))
        self._check_disjoint()

    def _check_disjoint(self):
        for i, a in enumerate(self.bodies):
            for b in self.bodies[i + 1:]:
                if np.any(a.contains(b.positions())) \
                        or np.any(b.contains(a.positions())):
                    raise GeometryError("bodies overlap; mobility problem "
                                        "requires disjoint surfaces")

    def _poses(self):
        return tuple(np.concatenate([b.center, b.orientation]).tobytes()
                     for b in self.bodies)

    def _refresh(self):
        key = self._poses()
        if key != self._pose_key:
            self._pose_key = key
            if self.freeze:
                self._frozen_K = dense_layer_matrix(
                    layers.STOKES_TRACTION, self.bodies, self.cache,
                    upsampling=self.upsampling)
            else:
                self._frozen_K = None

    def _apply_K(self, fields):
        if self._frozen_K is not None:
            return unpack(self._frozen_K @ pack(fields), self.bodies)
        return layers.fast_apply(layers.STOKES_TRACTION, self.bodies, fields,
                                 self.cache, provider=self.provider,
                                 upsampling=self.upsampling)

    def _apply_system(self, flat):
        fields = unpack(flat, self.bodies)
        Kf = self._apply_K(fields)
        out = [0.5 * f + k + apply_L(b, f)
               for f, k, b in zip(fields, Kf, self.bodies)]
        return pack(out)

    def solve(self, forces, torques, initial_guess=None):
        forces = np.atleast_2d(np.asarray(forces, dtype=float))
        torques = np.atleast_2d(np.asarray(torques, dtype=float))
        rho = [incident_density(b, f, t)
               for b, f, t in zip(self.bodies, forces, torques)]
        return self.solve_incident(rho, initial_guess=initial_guess)

    def solve_incident(self, rho, initial_guess=None):
        """Mobility solve driven by explicit incident densities.

        The net force and torque each body feels are the moments of its
        density; prescribing tractions directly (rather than reducing them
        to net loads first) keeps their higher moments in the problem.
        """
        t_start = time.perf_counter()
        self._refresh()
        timings = {"apply": 0.0, "precondition": 0.0,
                   "refresh": time.perf_counter() - t_start,
                   "apply_calls": 0}

        def timed_op(flat):
            t0 = time.perf_counter()
            out = self._apply_system(flat)
            timings["apply"] += time.perf_counter() - t0
            timings["apply_calls"] += 1
            return out

        precond = None
        if self.use_preconditioner:
            def precond(flat):
                t0 = time.perf_counter()
                out = self.preconditioner.solve(self.bodies, flat)
                timings["precondition"] += time.perf_counter() - t0
                return out

        t0 = time.perf_counter()
        Krho = self._apply_K(rho)
        timings["apply"] += time.perf_counter() - t0
        timings["apply_calls"] += 1
        rhs = pack([-(0.5 * r + k) for r, k in zip(rho, Krho)])
        x0 = None if initial_guess is None else pack(initial_guess)
        mu_flat, report = gmres(timed_op, rhs, tol=self.tol,
                                maxiter=self.maxiter, precondition=precond,
                                x0=x0)
        mu = unpack(mu_flat, self.bodies)

        t_eval = time.perf_counter()
        total = [r + m for r, m in zip(rho, mu)]
        u = layers.fast_apply(layers.STOKES_SINGLE, self.bodies, total,
                              self.cache, provider=self.provider,
                              upsampling=self.upsampling)
        vel = np.empty((len(self.bodies), 3))
        omg = np.empty((len(self.bodies), 3))
        for i, b in enumerate(self.bodies):
            vel[i], omg[i] = extract_rigid_velocity(b, u[i])
        timings["evaluate"] = time.perf_counter() - t_eval

        moments = []
        for b, m in zip(self.bodies, mu):
            F, T = apply_G(b, m)
            moments.append((np.linalg.norm(F), np.linalg.norm(T)))
        timings["total"] = time.perf_counter() - t_start
        report.timings.update(timings)
        return MobilityResult(vel, omg, rho, mu, u, report, moments)

    def evaluate_velocity(self, result, targets):
        """Flow velocity at off-surface points from a finished solve."""
        return layers.eval_targets(layers.STOKES_SINGLE, self.bodies,
                                   result.total_density, targets,
                                   provider=self.provider,
                                   upsampling=self.upsampling)


# ---------------------------------------------------------------------------
# dense reference solves

def solve_mobility_dense(bodies, forces, torques, cache,
                         upsampling=layers.DEFAULT_UPSAMPLING):
    """The same second-kind system, assembled dense and solved by LAPACK.

    Debug path for small instances: agreement with the matrix-free solver is
    limited only by the iterative tolerance.
    """
    forces = np.atleast_2d(np.asarray(forces, dtype=float))
    torques = np.atleast_2d(np.asarray(torques, dtype=float))
    A = 0.5 * np.eye(sum(3 * b.num_nodes for b in bodies)) \
        + dense_layer_matrix(layers.STOKES_TRACTION, bodies, cache,
                             upsampling=upsampling) \
        + dense_L_matrix(bodies)
    rho = [incident_density(b, f, t)
           for b, f, t in zip(bodies, forces, torques)]
    S = dense_layer_matrix(layers.STOKES_SINGLE, bodies, cache,
                           upsampling=upsampling)
    half_K = A - dense_L_matrix(bodies)
    rhs = -(half_K @ pack(rho))
    mu = unpack(np.linalg.solve(A, rhs), bodies)
    u = unpack(S @ pack([r + m for r, m in zip(rho, mu)]), bodies)
    vel = np.empty((len(bodies), 3))
    omg = np.empty((len(bodies), 3))
    for i, b in enumerate(bodies):
        vel[i], omg[i] = extract_rigid_velocity(b, u[i])
    return mu, vel, omg


def _real_harmonic_basis(grid, p):
    """Real orthonormal basis of band-limited fields, sampled at the nodes."""
    from . import sphharm
    Y = grid.ynm() if grid.p == p else sphharm.ynm_at(p, grid.theta, grid.phi)
    cols = []
    for n in range(p + 1):
        cols.append(np.real(Y[sphharm.mode_index(n, 0)]))
        for m in range(1, n + 1):
            cols.append(np.sqrt(2.0) * np.real(Y[sphharm.mode_index(n, m)]))
            cols.append(np.sqrt(2.0) * np.imag(Y[sphharm.mode_index(n, m)]))
    return np.array(cols).T                       # (nodes, (p+1)^2)


def solve_mobility_constrained(bodies, forces, torques, cache,
                               upsampling=layers.DEFAULT_UPSAMPLING):
    """Reference solve of the rigid-velocity formulation, explicitly
    constrained: the total single layer must equal rigid motion at every
    node, and the scattered moments are pinned to zero.

    The scattered density is parametrized by band-limited fields (the self
    quadrature resolves nothing beyond them, so nodal unknowns would leave
    aliasing components nearly undetermined), the moment constraints are
    eliminated through their nullspace, and the velocity match is solved by
    quadrature-weighted least squares. Small instances only.
    """
    from scipy.linalg import null_space
    forces = np.atleast_2d(np.asarray(forces, dtype=float))
    torques = np.atleast_2d(np.asarray(torques, dtype=float))
    n = len(bodies)
    sizes = [3 * b.num_nodes for b in bodies]
    offsets = np.cumsum([0] + sizes)
    N = offsets[-1]
    S = dense_layer_matrix(layers.STOKES_SINGLE, bodies, cache,
                           upsampling=upsampling)
    rho = [incident_density(b, f, t)
           for b, f, t in zip(bodies, forces, torques)]

    basis_blocks = []
    G_blocks = []
    P_blocks = []
    for b in bodies:
        E = _real_harmonic_basis(b.ref.grid, b.p)
        basis_blocks.append(np.kron(E, np.eye(3)))
        arm = b.positions() - b.center
        w = b.quad_weights
        m = b.num_nodes
        G = np.zeros((6, 3 * m))
        P = np.zeros((3 * m, 6))
        for a in range(m):
            G[0:3, 3 * a:3 * a + 3] = w[a] * np.eye(3)
            G[3:6, 3 * a:3 * a + 3] = w[a] * _cross_mat(arm[a])
            P[3 * a:3 * a + 3, 0:3] = np.eye(3)
            P[3 * a:3 * a + 3, 3:6] = -_cross_mat(arm[a])
        G_blocks.append(G)
        P_blocks.append(P)

    from scipy.linalg import block_diag
    Ev = block_diag(*basis_blocks)                # nodal values from coeffs
    Gc = block_diag(*G_blocks) @ Ev               # moments of coefficients
    Pv = block_diag(*P_blocks)                    # rigid motions from (v, w)
    Z = null_space(Gc)

    sqw = np.concatenate([np.repeat(np.sqrt(b.quad_weights), 3)
                          for b in bodies])
    lhs = np.hstack([S @ Ev @ Z, -Pv]) * sqw[:, None]
    rhs = -(S @ pack(rho)) * sqw
    sol, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    mu = unpack(Ev @ (Z @ sol[:Z.shape[1]]), bodies)
    vel = sol[Z.shape[1]:].reshape(n, 6)
    return mu, vel[:, :3], vel[:, 3:]


def grand_mobility(bodies, **solver_kwargs):
    """Velocity response matrix to unit forces and torques, body by body."""
    solver = MobilitySolver(bodies, **solver_kwargs)
    n = len(bodies)
    M = np.empty((6 * n, 6 * n))
    for k in range(n):
        for load in range(6):
            forces = np.zeros((n, 3))
            torques = np.zeros((n, 3))
            if load < 3:
                forces[k, load] = 1.0
            else:
                torques[k, load - 3] = 1.0
            res = solver.solve(forces, torques)
            M[:, 6 * k + load] = np.concatenate(
                [np.concatenate([res.velocity[i], res.omega[i]])
                 for i in range(n)])
    return M
