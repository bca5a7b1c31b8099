"""Spherical-harmonic grids and transforms on the unit sphere.

A surface of degree p is sampled on the tensor grid

    theta_j = arccos(t_j),   j = 0..p      (t_j Gauss-Legendre nodes on [-1,1])
    phi_k   = 2 pi k/(2p+2), k = 0..2p+1

giving (p+1)(2p+2) nodes. The basis is the orthonormal complex family

    Y_n^m(theta, phi) = sqrt((2n+1)/4pi) sqrt((n-|m|)!/(n+|m|)!)
                        P_n^{|m|}(cos theta) e^{i m phi}

so Y_n^{-m} = conj(Y_n^m) and expansions of real data carry conjugate-symmetric
coefficients. Coefficients are stored flat with mode (n, m) at index n^2 + n + m.

Associated Legendre values are generated by the standard three-term recurrence
applied directly to the normalized functions, which stays well scaled up to the
degrees used here (p <= 64).
"""

import numpy as np

FOUR_PI = 4.0 * np.pi


def num_modes(p):
    return (p + 1) * (p + 1)


def num_nodes(p):
    return (p + 1) * (2 * p + 2)


def mode_index(n, m):
    return n * n + n + m


def mode_degrees(p):
    """Arrays (n_of_mode, m_of_mode) for the flat coefficient ordering."""
    n = np.concatenate([np.full(2 * k + 1, k, dtype=int) for k in range(p + 1)])
    m = np.concatenate([np.arange(-k, k + 1, dtype=int) for k in range(p + 1)])
    return n, m


def norm_legendre(p, x):
    """Normalized associated Legendre table Pbar[n, m] at points x in [-1, 1].

    Pbar_n^m = sqrt((2n+1)/4pi) sqrt((n-m)!/(n+m)!) P_n^m, with the
    Condon-Shortley sign carried inside P_n^m. Output shape (p+1, p+1, *x.shape);
    entries with m > n are zero.
    """
    x = np.asarray(x, dtype=float)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    P = np.zeros((p + 1, p + 1) + x.shape)
    P[0, 0] = 1.0 / np.sqrt(FOUR_PI)
    for m in range(1, p + 1):
        P[m, m] = -np.sqrt((2 * m + 1.0) / (2 * m)) * s * P[m - 1, m - 1]
    for m in range(0, p):
        P[m + 1, m] = np.sqrt(2 * m + 3.0) * x * P[m, m]
    for m in range(0, p + 1):
        for n in range(m + 2, p + 1):
            a = np.sqrt((4.0 * n * n - 1.0) / (n * n - m * m))
            b = np.sqrt(((n - 1.0) ** 2 - m * m) / (4.0 * (n - 1.0) ** 2 - 1.0))
            P[n, m] = a * (x * P[n - 1, m] - b * P[n - 2, m])
    return P


def norm_legendre_dtheta(p, P):
    """d/dtheta of the normalized Legendre table, from the table itself.

    Uses the pole-regular ladder identity
        d/dtheta Pbar_n^m = 1/2 [ sqrt((n-m)(n+m+1)) Pbar_n^{m+1}
                                 - sqrt((n+m)(n-m+1)) Pbar_n^{m-1} ]
    with Pbar_n^{-1} read as -Pbar_n^1.
    """
    dP = np.zeros_like(P)
    for n in range(p + 1):
        for m in range(n + 1):
            hi = P[n, m + 1] if m + 1 <= n else 0.0
            if m == 0:
                lo = -P[n, 1] if n >= 1 else 0.0
            else:
                lo = P[n, m - 1]
            dP[n, m] = 0.5 * (np.sqrt((n - m) * (n + m + 1.0)) * hi
                              - np.sqrt((n + m) * (n - m + 1.0)) * lo)
    return dP


def norm_legendre_over_sin(p, x):
    """Pbar_n^m / sin(theta) for m >= 1, computed by its own recurrence.

    The three-term recurrences are linear, so dividing the seed by sin(theta)
    propagates exactly; this avoids the unstable direct division near the poles.
    Entries with m == 0 (or m > n) are zero.
    """
    x = np.asarray(x, dtype=float)
    Q = np.zeros((p + 1, p + 1) + x.shape)
    if p == 0:
        return Q
    # seed: Pbar_1^1 / sin = -sqrt(3/8pi)
    Q[1, 1] = -np.sqrt(3.0 / (2.0 * FOUR_PI)) * np.ones_like(x)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    for m in range(2, p + 1):
        Q[m, m] = -np.sqrt((2 * m + 1.0) / (2 * m)) * s * Q[m - 1, m - 1]
    for m in range(1, p):
        Q[m + 1, m] = np.sqrt(2 * m + 3.0) * x * Q[m, m]
    for m in range(1, p + 1):
        for n in range(m + 2, p + 1):
            a = np.sqrt((4.0 * n * n - 1.0) / (n * n - m * m))
            b = np.sqrt(((n - 1.0) ** 2 - m * m) / (4.0 * (n - 1.0) ** 2 - 1.0))
            Q[n, m] = a * (x * Q[n - 1, m] - b * Q[n - 2, m])
    return Q


def ynm_at(p, theta, phi):
    """Matrix of Y_n^m values, shape (num_modes(p), npts)."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    P = norm_legendre(p, np.cos(theta))
    Y = np.empty((num_modes(p), theta.size), dtype=complex)
    for n in range(p + 1):
        for m in range(0, n + 1):
            e = np.exp(1j * m * phi)
            Y[mode_index(n, m)] = P[n, m] * e
            if m > 0:
                Y[mode_index(n, -m)] = P[n, m] * np.conj(e)
    return Y


def ynm_dtheta_at(p, theta, phi):
    """Matrix of d/dtheta Y_n^m values, shape (num_modes(p), npts)."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    P = norm_legendre(p, np.cos(theta))
    dP = norm_legendre_dtheta(p, P)
    dY = np.empty((num_modes(p), theta.size), dtype=complex)
    for n in range(p + 1):
        for m in range(0, n + 1):
            e = np.exp(1j * m * phi)
            dY[mode_index(n, m)] = dP[n, m] * e
            if m > 0:
                dY[mode_index(n, -m)] = dP[n, m] * np.conj(e)
    return dY


def sph_tangent_gradient_at(p, theta, phi):
    """Cartesian tangential gradient of each Y_n^m on the unit sphere.

    Returns an array of shape (num_modes(p), npts, 3) with

        grad Y = (d Y/d theta) e_theta + (i m Y / sin theta) e_phi,

    where the 1/sin factor is folded into a dedicated Legendre recurrence so
    points arbitrarily close to the coordinate poles stay well conditioned.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    x = np.cos(theta)
    P = norm_legendre(p, x)
    dP = norm_legendre_dtheta(p, P)
    Q = norm_legendre_over_sin(p, x)
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    e_theta = np.stack([ct * cp, ct * sp, -st], axis=-1)
    e_phi = np.stack([-sp, cp, np.zeros_like(sp)], axis=-1)
    G = np.empty((num_modes(p), theta.size, 3), dtype=complex)
    for n in range(p + 1):
        for m in range(0, n + 1):
            e = np.exp(1j * m * phi)
            gt = dP[n, m] * e
            gp = 1j * m * Q[n, m] * e
            G[mode_index(n, m)] = gt[:, None] * e_theta + gp[:, None] * e_phi
            if m > 0:
                G[mode_index(n, -m)] = np.conj(G[mode_index(n, m)])
    return G


class SphericalGrid:
    """Gauss-Legendre x trapezoid sampling of degree p, with cached basis tables."""

    def __init__(self, p):
        if p < 1:
            raise ValueError("grid degree must be >= 1, got %r" % (p,))
        self.p = int(p)
        t, lam = np.polynomial.legendre.leggauss(p + 1)
        # descending colatitude order: theta_0 near the north pole
        t = t[::-1].copy()
        lam = lam[::-1].copy()
        self.gl_nodes = t
        self.gl_weights = lam
        self.theta1d = np.arccos(t)
        self.nphi = 2 * p + 2
        self.phi1d = 2.0 * np.pi * np.arange(self.nphi) / self.nphi
        th, ph = np.meshgrid(self.theta1d, self.phi1d, indexing="ij")
        self.theta = th.ravel()
        self.phi = ph.ravel()
        self.sin_theta = np.sin(self.theta)
        lam2 = np.repeat(lam, self.nphi)
        # weights for integrals over (theta, phi) of W-carrying integrands
        self.weights = 2.0 * np.pi * lam2 / (self.nphi * self.sin_theta)
        # weights for solid-angle integrals on the unit sphere
        self.solid_weights = self.weights * self.sin_theta
        self.nodes = np.stack([self.sin_theta * np.cos(self.phi),
                               self.sin_theta * np.sin(self.phi),
                               np.cos(self.theta)], axis=-1)
        self.num_nodes = self.theta.size
        self.num_modes = num_modes(p)
        self._ynm = None
        self._ynm_dtheta = None
        self._forward = None

    def ynm(self):
        if self._ynm is None:
            self._ynm = ynm_at(self.p, self.theta, self.phi)
        return self._ynm

    def ynm_dtheta(self):
        if self._ynm_dtheta is None:
            self._ynm_dtheta = ynm_dtheta_at(self.p, self.theta, self.phi)
        return self._ynm_dtheta

    def forward_matrix(self):
        """Matrix mapping nodal samples to coefficients, shape (modes, nodes)."""
        if self._forward is None:
            self._forward = np.conj(self.ynm()) * self.solid_weights
        return self._forward


_GRIDS = {}


def get_grid(p):
    if p not in _GRIDS:
        _GRIDS[p] = SphericalGrid(p)
    return _GRIDS[p]


def forward_sht(grid, samples):
    """Nodal samples (..., nodes) -> coefficients (..., modes).

    Real input is mapped to exactly conjugate-symmetric coefficients.
    """
    samples = np.asarray(samples)
    if samples.shape[-1] != grid.num_nodes:
        raise ValueError("expected %d nodal samples, got %d"
                         % (grid.num_nodes, samples.shape[-1]))
    coeffs = samples @ grid.forward_matrix().T
    if np.isrealobj(samples):
        coeffs = symmetrize_coeffs(grid.p, coeffs)
    return coeffs


def inverse_sht(grid, coeffs):
    """Coefficients (..., modes) -> nodal samples (..., nodes), real part."""
    coeffs = np.asarray(coeffs)
    if coeffs.shape[-1] != grid.num_modes:
        raise ValueError("expected %d coefficients, got %d"
                         % (grid.num_modes, coeffs.shape[-1]))
    return np.real(coeffs @ grid.ynm())


def symmetrize_coeffs(p, coeffs):
    """Enforce coeff(n,-m) = conj(coeff(n,m)) exactly (real nodal data)."""
    out = np.array(coeffs, dtype=complex, copy=True)
    for n in range(p + 1):
        lo, hi = mode_index(n, -n), mode_index(n, n)
        block = out[..., lo:hi + 1]
        sym = 0.5 * (block + np.conj(block[..., ::-1]))
        out[..., lo:hi + 1] = sym
    return out


def pad_coeffs(coeffs, p, p_to):
    """Zero-pad coefficients from degree p to degree p_to >= p."""
    if p_to < p:
        raise ValueError("cannot pad degree %d down to %d" % (p, p_to))
    coeffs = np.asarray(coeffs)
    out = np.zeros(coeffs.shape[:-1] + (num_modes(p_to),), dtype=complex)
    out[..., :num_modes(p)] = coeffs
    return out


def truncate_coeffs(coeffs, p_to):
    return np.asarray(coeffs)[..., :num_modes(p_to)]


def upsample(samples, p, p_to):
    """Resample nodal data from the degree-p grid onto the degree-p_to grid."""
    if p_to < p:
        raise ValueError("refinement target %d below source degree %d" % (p_to, p))
    coarse = get_grid(p)
    fine = get_grid(p_to)
    coeffs = forward_sht(coarse, samples)
    return inverse_sht(fine, pad_coeffs(coeffs, p, p_to))


def eval_expansion(coeffs, p, theta, phi):
    """Evaluate a degree-p expansion at arbitrary points; real part."""
    return np.real(np.asarray(coeffs) @ ynm_at(p, theta, phi))


def rotation_to_pole(theta, phi):
    """Rotation Q with Q e3 = the unit vector at (theta, phi): Rz(phi) Ry(theta)."""
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(phi), np.sin(phi)
    ry = np.array([[ct, 0.0, st], [0.0, 1.0, 0.0], [-st, 0.0, ct]])
    rz = np.array([[cp, -sp, 0.0], [sp, cp, 0.0], [0.0, 0.0, 1.0]])
    return rz @ ry
