"""Free-space Stokes and Laplace kernels (unit viscosity).

All pairwise routines take targets (t, 3) and sources (s, 3) and are written
to contract over the source index on the fly, so the traction kernel never
materializes its rank-3 form: with r = x - y,

    velocity   u_i(x)   = 1/(8 pi) sum_y [ f_i/|r| + r_i (r.f)/|r|^3 ]
    pressure   p(x)     = 1/(4 pi) sum_y (r.f)/|r|^3
    traction   (T f)_i  = -3/(4 pi) sum_y r_i (r.n_x)(r.f)/|r|^5
    laplace    phi(x)   = 1/(4 pi) sum_y q/|r|
    adj double (K q)(x) = -1/(4 pi) sum_y (r.n_x) q/|r|^3

Coincident source/target pairs are an error here; summation-level routines
that must skip them pass an exclusion mask or set skip_coincident.
"""

import numpy as np

ONE_OVER_8PI = 1.0 / (8.0 * np.pi)
ONE_OVER_4PI = 1.0 / (4.0 * np.pi)


def _displacements(targets, sources, exclude=None, skip_coincident=False):
    r = np.asarray(targets)[:, None, :] - np.asarray(sources)[None, :, :]
    r2 = np.einsum("tsi,tsi->ts", r, r)
    coincident = r2 == 0.0
    if exclude is not None:
        coincident = coincident | exclude
    elif not skip_coincident and np.any(coincident):
        raise ValueError("coincident source and target points")
    inv_r = np.where(coincident, 0.0, 1.0 / np.sqrt(np.where(coincident, 1.0, r2)))
    return r, inv_r


def stokeslet_apply(targets, sources, strengths, exclude=None,
                    skip_coincident=False):
    """Single-layer velocity sums; strengths already carry quadrature weights."""
    r, inv_r = _displacements(targets, sources, exclude, skip_coincident)
    f = np.asarray(strengths)
    rf = np.einsum("tsi,si->ts", r, f)
    u = inv_r @ f + np.einsum("ts,tsi->ti", rf * inv_r ** 3, r)
    return ONE_OVER_8PI * u


def stokeslet_pressure_gradient(targets, sources, strengths, exclude=None,
                                skip_coincident=False):
    """Pressure and velocity gradient sums of a Stokeslet distribution.

    Returns (pressure (t,), grad (t, 3, 3)) with grad[t, i, k] = d u_i / d x_k.
    """
    r, inv_r = _displacements(targets, sources, exclude, skip_coincident)
    f = np.asarray(strengths)
    inv_r3 = inv_r ** 3
    rf = np.einsum("tsi,si->ts", r, f)
    pressure = 2.0 * ONE_OVER_8PI * np.sum(rf * inv_r3, axis=1)
    grad = (np.einsum("ts,si,tsk->tik", inv_r3, f, r) * -1.0
            + np.einsum("ts,tsi,sk->tik", inv_r3, r, f)
            + np.einsum("ts,ik->tik", rf * inv_r3, np.eye(3))
            - 3.0 * np.einsum("ts,tsi,tsk->tik", rf * inv_r ** 5, r, r))
    return pressure, ONE_OVER_8PI * grad


def traction_apply(targets, target_normals, sources, strengths,
                   exclude=None, skip_coincident=False):
    """Traction sums (T f).n contracted with the target normals."""
    r, inv_r = _displacements(targets, sources, exclude, skip_coincident)
    f = np.asarray(strengths)
    rn = np.einsum("tsi,ti->ts", r, np.asarray(target_normals))
    rf = np.einsum("tsi,si->ts", r, f)
    return -6.0 * ONE_OVER_8PI * np.einsum("ts,tsi->ti", rn * rf * inv_r ** 5, r)


def stress_from_derivatives(pressure, grad, normals):
    """Assemble tractions [-p I + grad u + (grad u)^T] . n from field data."""
    sym = grad + np.swapaxes(grad, -1, -2)
    return (np.einsum("tik,tk->ti", sym, normals)
            - pressure[:, None] * normals)


def stokeslet_block(targets, sources, exclude=None):
    """Dense single-layer matrix, shape (t, s, 3, 3)."""
    r, inv_r = _displacements(targets, sources, exclude)
    eye = np.eye(3)
    return ONE_OVER_8PI * (np.einsum("ts,ij->tsij", inv_r, eye)
                           + np.einsum("ts,tsi,tsj->tsij", inv_r ** 3, r, r))


def traction_block(targets, target_normals, sources, exclude=None):
    """Dense matrix of the traction kernel contracted with target normals.

    Entry [t, s, i, j] maps density component j at source s to traction
    component i at target t.
    """
    r, inv_r = _displacements(targets, sources, exclude)
    rn = np.einsum("tsi,ti->ts", r, np.asarray(target_normals))
    return -6.0 * ONE_OVER_8PI * np.einsum("ts,tsi,tsj->tsij",
                                           rn * inv_r ** 5, r, r)


def laplace_apply(targets, sources, charges, exclude=None,
                  skip_coincident=False):
    r, inv_r = _displacements(targets, sources, exclude, skip_coincident)
    return ONE_OVER_4PI * (inv_r @ np.asarray(charges))


def laplace_gradient(targets, sources, charges, exclude=None,
                     skip_coincident=False):
    """Gradient of the single-layer potential at the targets, shape (t, 3)."""
    r, inv_r = _displacements(targets, sources, exclude, skip_coincident)
    q = np.asarray(charges)
    return -ONE_OVER_4PI * np.einsum("ts,tsi->ti", q[None, :] * inv_r ** 3, r)


def laplace_block(targets, sources, exclude=None):
    r, inv_r = _displacements(targets, sources, exclude)
    return ONE_OVER_4PI * inv_r


def laplace_adjoint_double_block(targets, target_normals, sources, exclude=None):
    """Dense normal-derivative-at-target matrix of the single layer."""
    r, inv_r = _displacements(targets, sources, exclude)
    rn = np.einsum("tsi,ti->ts", r, np.asarray(target_normals))
    return -ONE_OVER_4PI * rn * inv_r ** 3
