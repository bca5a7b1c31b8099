"""Time evolution of rigid-body poses and the contact-force corrector.

Centroids follow the selected explicit Runge-Kutta scheme directly. The
orientation update composes per-stage exponential-map increments, with the
stage angular velocities pulled back through the truncated inverse
differential of the exponential; the truncation carries enough terms for
fourth order, constant rotations integrate exactly, and every update lands
on the rotation group by construction. Quaternions are renormalized each
update.

Contacts: pairs closer than a gap threshold get an equal-and-opposite force
along the connecting segment, sized so the corrected rigid velocities have
zero relative velocity at the contact point. The correction matrix is the
contact-space restriction of the mobility map, assembled column by column
from unit contact loads; the corrected velocities come from the same columns,
so the correction costs exactly three extra solves per contact.
"""

import time

import numpy as np

from .mobility import ConvergenceError, incident_density
from .rotations import quat_exp, quat_multiply, quat_to_matrix

TABLEAUS = {
    "euler": (np.array([0.0]),
              np.array([[0.0]]),
              np.array([1.0])),
    "heun": (np.array([0.0, 1.0]),
             np.array([[0.0, 0.0], [1.0, 0.0]]),
             np.array([0.5, 0.5])),
    "rk4": (np.array([0.0, 0.5, 0.5, 1.0]),
            np.array([[0.0, 0.0, 0.0, 0.0],
                      [0.5, 0.0, 0.0, 0.0],
                      [0.0, 0.5, 0.0, 0.0],
                      [0.0, 0.0, 1.0, 0.0]]),
            np.array([1.0 / 6, 1.0 / 3, 1.0 / 3, 1.0 / 6])),
}


class StepError(Exception):
    pass


class OverlapError(Exception):
    pass


class DegenerateContactError(Exception):
    pass


def dexpinv(u, omega):
    """Inverse differential of the exponential map on rotations, truncated
    past the order needed by a fourth-order scheme."""
    cu = np.cross(u, omega)
    return omega - 0.5 * cu + np.cross(u, cu) / 12.0


def rotation_step(q, omega, dt):
    """Advance an orientation by a constant angular velocity."""
    out = quat_multiply(quat_exp(np.asarray(omega) * dt), q)
    return out / np.linalg.norm(out)


# ---------------------------------------------------------------------------
# contacts

class ContactPair:
    def __init__(self, i, j, point, normal, gap):
        self.i = i
        self.j = j
        self.point = np.asarray(point, dtype=float)
        self.normal = np.asarray(normal, dtype=float)
        self.gap = float(gap)

    def __repr__(self):
        return "ContactPair(%d, %d, gap=%.3g)" % (self.i, self.j, self.gap)


def default_contact_gap(bodies):
    return 0.05 * min(b.ref.diameter for b in bodies)


def detect_contacts(bodies, delta):
    """Pairs whose closest nodes are nearer than the gap threshold."""
    contacts = []
    pos = [b.positions() for b in bodies]
    for i in range(len(bodies)):
        for j in range(i + 1, len(bodies)):
            d = pos[i][:, None, :] - pos[j][None, :, :]
            d2 = np.einsum("abk,abk->ab", d, d)
            a, b = np.unravel_index(np.argmin(d2), d2.shape)
            gap = np.sqrt(d2[a, b])
            if gap >= delta:
                continue
            if np.any(bodies[i].contains(pos[j])) \
                    or np.any(bodies[j].contains(pos[i])):
                raise OverlapError("bodies %d and %d overlap" % (i, j))
            seg = pos[j][b] - pos[i][a]
            normal = seg / np.linalg.norm(seg) if gap > 0 else \
                (pos[j][b] - bodies[i].center) \
                / np.linalg.norm(pos[j][b] - bodies[i].center)
            contacts.append(ContactPair(i, j, 0.5 * (pos[i][a] + pos[j][b]),
                                        normal, gap))
    return contacts


def contact_difference_matrix(contacts, bodies):
    """Map from stacked rigid velocities (6n) to relative velocities at the
    contact points (3 per contact); its transpose spreads contact forces
    into equal-and-opposite body loads with the matching torque arms."""
    n = len(bodies)
    D = np.zeros((3 * len(contacts), 6 * n))
    for k, c in enumerate(contacts):
        for body_index, sign in ((c.i, 1.0), (c.j, -1.0)):
            arm = c.point - bodies[body_index].center
            col = 6 * body_index
            D[3 * k:3 * k + 3, col:col + 3] = sign * np.eye(3)
            D[3 * k:3 * k + 3, col + 3:col + 6] = -sign * np.array(
                [[0.0, -arm[2], arm[1]],
                 [arm[2], 0.0, -arm[0]],
                 [-arm[1], arm[0], 0.0]])
    return D


def contact_forces(contacts, bodies, v0, omega0, solve_fn):
    """Forces along the contacts that cancel the relative contact velocities.

    solve_fn(forces, torques) must return corrected (v, omega) for the given
    extra loads; it is called once per contact-force component. Returns the
    forces (one 3-vector per contact), the velocity corrections implied by
    them, and the load increments to add to later force evaluations.
    """
    n = len(bodies)
    nc = len(contacts)
    D = contact_difference_matrix(contacts, bodies)
    V0 = np.concatenate([np.concatenate([v, w])
                         for v, w in zip(v0, omega0)])
    cols = np.empty((6 * n, 3 * nc))
    for k in range(3 * nc):
        loads = D.T[:, k].reshape(n, 6)
        v, w = solve_fn(loads[:, :3], loads[:, 3:])
        cols[:, k] = np.concatenate(
            [np.concatenate([v[i], w[i]]) for i in range(n)])
    DMC = D @ cols
    try:
        f = np.linalg.solve(DMC, -(D @ V0))
    except np.linalg.LinAlgError:
        raise DegenerateContactError(
            "contact-response matrix is singular for pairs %s"
            % ([(c.i, c.j) for c in contacts],))
    dV = cols @ f
    loads = (D.T @ f).reshape(n, 6)
    forces = f.reshape(nc, 3)
    return forces, dV.reshape(n, 6), loads


# ---------------------------------------------------------------------------
# the stepper

class StepRecord:
    def __init__(self, t, velocity, omega, iterations, residual, contacts,
                 contact_forces_):
        self.t = t
        self.velocity = velocity
        self.omega = omega
        self.iterations = iterations
        self.residual = residual
        self.contacts = contacts
        self.contact_forces = contact_forces_


class RigidBodyStepper:
    """Advance a set of bodies under force, density, or velocity models.

    force_model(t, bodies) returns per-body forces and torques;
    density_model(t, bodies) returns per-body incident surface tractions
    that enter the mobility solve whole (for stress-driven loading such as
    magnetics), and both may be active at once. A velocity_model replaces
    the mobility solve entirely (test hook; contact correction is
    unavailable in that mode). Contact forces are computed once per step
    from the start-of-step configuration and the resulting load increments
    are held through the remaining stages.
    """

    def __init__(self, bodies, force_model=None, solver=None, scheme="rk4",
                 velocity_model=None, density_model=None, contact=True,
                 contact_delta=None):
        if scheme not in TABLEAUS:
            raise ValueError("unknown scheme %r; choose one of %s"
                             % (scheme, sorted(TABLEAUS)))
        if force_model is None and velocity_model is None \
                and density_model is None:
            raise ValueError("need a force, density, or velocity model")
        self.bodies = list(bodies)
        self.force_model = force_model
        self.solver = solver
        self.scheme = scheme
        self.velocity_model = velocity_model
        self.density_model = density_model
        self.contact = contact and velocity_model is None
        self.contact_delta = contact_delta
        if self.contact_delta is None and self.contact:
            self.contact_delta = default_contact_gap(self.bodies)
        self.last_result = None
        self.last_timings = {}

    def _loads(self, t, extra_loads):
        n = len(self.bodies)
        F = np.zeros((n, 3))
        T = np.zeros((n, 3))
        if self.force_model is not None:
            Fm, Tm = self.force_model(t, self.bodies)
            F += np.atleast_2d(np.asarray(Fm, dtype=float))
            T += np.atleast_2d(np.asarray(Tm, dtype=float))
        if extra_loads is not None:
            F += extra_loads[:, :3]
            T += extra_loads[:, 3:]
        return F, T

    def _solve(self, t, extra_loads=None):
        if self.velocity_model is not None:
            v, w = self.velocity_model(t, self.bodies)
            return (np.asarray(v, dtype=float), np.asarray(w, dtype=float),
                    None, None)
        F, T = self._loads(t, extra_loads)
        if self.density_model is not None:
            rho = [np.asarray(r, dtype=float)
                   for r in self.density_model(t, self.bodies)]
            if np.any(F) or np.any(T):
                rho = [r + incident_density(b, f, tq)
                       for b, r, f, tq in zip(self.bodies, rho, F, T)]
            res = self.solver.solve_incident(rho)
        else:
            res = self.solver.solve(F, T)
        return res.velocity, res.omega, res.report, res

    def step(self, t, dt):
        """One step; bodies are updated in place. Returns a StepRecord."""
        c_nodes, A, bweights = TABLEAUS[self.scheme]
        stages = len(bweights)
        n = len(self.bodies)
        centers0 = [b.center.copy() for b in self.bodies]
        quats0 = [b.orientation.copy() for b in self.bodies]

        extra_loads = None
        contacts = []
        cforces = None
        vs = np.empty((stages, n, 3))
        ks = np.empty((stages, n, 3))
        us = np.zeros((stages, n, 3))
        report = None
        t_step = time.perf_counter()
        solve_wall = 0.0
        apply_wall = 0.0
        apply_calls = 0
        try:
            for s in range(stages):
                if s > 0:
                    for i, b in enumerate(self.bodies):
                        center = centers0[i] + dt * np.einsum(
                            "s,si->i", A[s, :s], vs[:s, i])
                        us[s, i] = dt * np.einsum("s,si->i", A[s, :s], ks[:s, i])
                        b.set_pose(center, quat_multiply(quat_exp(us[s, i]),
                                                         quats0[i]))
                t0 = time.perf_counter()
                v, w, rep, res = self._solve(t + c_nodes[s] * dt, extra_loads)
                solve_wall += time.perf_counter() - t0
                if rep is not None:
                    apply_wall += rep.timings.get("apply", 0.0)
                    apply_calls += rep.timings.get("apply_calls", 0)
                if s == 0:
                    report = rep
                    self.last_result = res
                    if self.contact:
                        contacts = detect_contacts(self.bodies,
                                                   self.contact_delta)
                        if contacts:
                            t0 = time.perf_counter()
                            cforces, dV, loads = contact_forces(
                                contacts, self.bodies, v, w,
                                lambda F, T: _loads_only_solve(self.solver,
                                                               F, T))
                            solve_wall += time.perf_counter() - t0
                            extra_loads = loads
                            v = v + dV[:, :3]
                            w = w + dV[:, 3:]
                vs[s] = v
                for i in range(n):
                    ks[s, i] = dexpinv(us[s, i], w[i])
        except ConvergenceError as err:
            for b, c0, q0 in zip(self.bodies, centers0, quats0):
                b.set_pose(c0, q0)
            raise StepError("stage %d solve failed at t=%.6g (scheme %s): %s"
                            % (s + 1, t, self.scheme, err)) from err

        for i, b in enumerate(self.bodies):
            center = centers0[i] + dt * np.einsum("s,si->i", bweights, vs[:, i])
            u = dt * np.einsum("s,si->i", bweights, ks[:, i])
            q = quat_multiply(quat_exp(u), quats0[i])
            b.set_pose(center, q / np.linalg.norm(q))
            R = quat_to_matrix(b.orientation)
            defect = np.abs(R.T @ R - np.eye(3)).max()
            if defect > 1e-10:
                raise StepError("orientation left the rotation group "
                                "(defect %.3e)" % defect)
        step_wall = time.perf_counter() - t_step
        self.last_timings = {"step": step_wall, "solve": solve_wall,
                             "update": step_wall - solve_wall,
                             "apply": apply_wall, "apply_calls": apply_calls}
        return StepRecord(t, vs[0].copy(), _first_stage_omegas(ks, us),
                          report.iterations if report else 0,
                          report.residual if report else 0.0,
                          contacts, cforces)


def _first_stage_omegas(ks, us):
    # stage one has u = 0, so the pulled-back rate is the angular velocity
    return ks[0].copy()


def _loads_only_solve(solver, forces, torques):
    res = solver.solve(forces, torques)
    return res.velocity, res.omega
