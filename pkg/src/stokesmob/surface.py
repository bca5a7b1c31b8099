"""Particle surfaces: harmonic shape descriptions, geometry, and moments.

A shape is a truncated harmonic expansion of the three reference coordinates,
recentered so the area centroid sits at the origin. A body is a shape plus a
rigid pose (centroid position and orientation quaternion); the world frame
geometry is obtained by rotating reference quantities, which leaves the area
element, the total area, and the quadrature weights unchanged.
"""

import json

import numpy as np

from . import sphharm
from .rotations import quat_to_matrix

# area elements below this are treated as a collapsed parametrization
DEGENERATE_AREA_TOL = 1e-12


class DegenerateSurfaceError(Exception):
    pass


class Shape:
    """Reference boundary given by harmonic coefficients of its coordinates."""

    def __init__(self, coeffs, degree, name="shape", recenter=True):
        coeffs = np.asarray(coeffs, dtype=complex)
        if coeffs.shape != (3, sphharm.num_modes(degree)):
            raise ValueError("expected coefficient shape (3, %d), got %r"
                             % (sphharm.num_modes(degree), coeffs.shape))
        self.degree = int(degree)
        self.name = name
        self.coeffs = sphharm.symmetrize_coeffs(self.degree, coeffs)
        if recenter:
            self._recenter()
        self._geometry = {}

    def _recenter(self):
        # area centroid of the raw shape, computed on a generously fine grid
        q = max(2 * self.degree + 2, 8)
        geo = _build_geometry(self.coeffs, self.degree, q)
        shift = geo["centroid"]
        self.coeffs[:, 0] -= shift * np.sqrt(4.0 * np.pi)

    def geometry(self, p):
        """Reference-frame geometry sampled on the degree-p grid (cached)."""
        if p not in self._geometry:
            self._geometry[p] = ReferenceGeometry(self, p)
        return self._geometry[p]

    @classmethod
    def sphere(cls, radius=1.0):
        if radius <= 0:
            raise ValueError("sphere radius must be positive")
        return cls.from_function(
            lambda n: radius * n, 1, name="sphere(%g)" % radius)

    @classmethod
    def ellipsoid(cls, a, b, c):
        if min(a, b, c) <= 0:
            raise ValueError("ellipsoid semi-axes must be positive")
        return cls.from_function(
            lambda n: n * np.array([a, b, c]), 1,
            name="ellipsoid(%g,%g,%g)" % (a, b, c))

    @classmethod
    def from_function(cls, fn, degree, name="shape"):
        """Build from a map fn: unit-sphere points (m, 3) -> surface points."""
        grid = sphharm.get_grid(degree)
        samples = np.asarray(fn(grid.nodes), dtype=float)
        coeffs = sphharm.forward_sht(grid, samples.T)
        return cls(coeffs, degree, name=name)


def _entry_coeffs(entry):
    coeffs = []
    for comp in entry["coeffs"]:
        pairs = np.asarray(comp, dtype=float)
        coeffs.append(pairs[:, 0] + 1j * pairs[:, 1])
    return np.array(coeffs)


def load_shape_library(path):
    """Read shapes from a JSON library file; returns {name: Shape}."""
    with open(path) as fh:
        doc = json.load(fh)
    entries = doc["shapes"] if isinstance(doc, dict) else doc
    shapes = {}
    for entry in entries:
        shapes[entry["name"]] = Shape(_entry_coeffs(entry), entry["p"],
                                      name=entry["name"])
    return shapes


def save_shape_library(path, shapes):
    entries = []
    for shape in shapes:
        comps = []
        for c in shape.coeffs:
            comps.append([[float(v.real), float(v.imag)] for v in c])
        entries.append({"name": shape.name, "p": shape.degree, "coeffs": comps})
    with open(path, "w") as fh:
        json.dump({"shapes": entries}, fh, indent=1)


def _build_geometry(coeffs, degree, p):
    """Evaluate positions, tangents, area element, and normals on a grid.

    The shape expansion is evaluated at its own degree (truncated if the grid
    is coarser) so fine evaluation grids never materialize full-degree tables.
    """
    grid = sphharm.get_grid(p)
    d_eff = min(degree, p)
    c = sphharm.truncate_coeffs(coeffs, d_eff)
    Y = sphharm.ynm_at(d_eff, grid.theta, grid.phi)
    dY = sphharm.ynm_dtheta_at(d_eff, grid.theta, grid.phi)
    X = np.real(c @ Y).T                               # (nodes, 3)
    Xt = np.real(c @ dY).T
    _, m_of = sphharm.mode_degrees(d_eff)
    Xp = np.real((c * (1j * m_of)) @ Y).T
    E = np.einsum("ni,ni->n", Xt, Xt)
    F = np.einsum("ni,ni->n", Xt, Xp)
    G = np.einsum("ni,ni->n", Xp, Xp)
    W2 = E * G - F * F
    if np.any(W2 <= DEGENERATE_AREA_TOL ** 2):
        raise DegenerateSurfaceError(
            "area element vanishes at a node (min W^2 = %.3e)" % W2.min())
    W = np.sqrt(W2)
    normals = np.cross(Xt, Xp) / W[:, None]
    area = np.sum(grid.weights * W)
    centroid = (grid.weights * W) @ X / area
    # orient outward: the flux of (x - centroid) through the surface is 3V > 0
    sign = 1.0
    if np.sum(grid.weights * W * np.einsum("ni,ni->n",
                                           X - centroid, normals)) < 0:
        normals = -normals
        sign = -1.0
    return {"grid": grid, "positions": X, "x_theta": Xt, "x_phi": Xp,
            "W": W, "normals": normals, "area": area, "centroid": centroid,
            "orient_sign": sign, "E": E, "F": F, "G": G}


class ReferenceGeometry:
    """Shape geometry sampled on the degree-p grid, centroid at the origin."""

    def __init__(self, shape, p):
        geo = _build_geometry(shape.coeffs, shape.degree, p)
        self.shape = shape
        self.p = p
        self.grid = geo["grid"]
        self.positions = geo["positions"]
        self.x_theta = geo["x_theta"]
        self.x_phi = geo["x_phi"]
        self.W = geo["W"]
        self.normals = geo["normals"]
        self.area = geo["area"]
        self.orient_sign = geo["orient_sign"]
        self.first_form = (geo["E"], geo["F"], geo["G"])
        self.quad_weights = self.grid.weights * self.W
        self.inertia = inertia_tensor(self.positions, np.zeros(3),
                                      self.quad_weights)
        self._node_spacing = None
        self._diameter = None
        self._bounding_radius = None

    def _pair_extremes(self):
        # chunked pass over the pairwise distances; fine grids get large
        X = self.positions
        m = len(X)
        step = max(1, 2_000_000 // max(1, m))
        nn_max = 0.0
        far_max = 0.0
        for lo in range(0, m, step):
            d2 = np.sum((X[lo:lo + step, None, :] - X[None, :, :]) ** 2,
                        axis=-1)
            far_max = max(far_max, d2.max())
            d2[np.arange(lo, min(lo + step, m)) - lo,
               np.arange(lo, min(lo + step, m))] = np.inf
            nn_max = max(nn_max, d2.min(axis=1).max())
        self._node_spacing = np.sqrt(nn_max)
        self._diameter = np.sqrt(far_max)

    @property
    def node_spacing(self):
        """Largest nearest-neighbor spacing, setting the near-zone width."""
        if self._node_spacing is None:
            self._pair_extremes()
        return self._node_spacing

    @property
    def diameter(self):
        if self._diameter is None:
            self._pair_extremes()
        return self._diameter

    @property
    def bounding_radius(self):
        """Largest node distance from the centroid."""
        if self._bounding_radius is None:
            self._bounding_radius = float(
                np.linalg.norm(self.positions, axis=1).max())
        return self._bounding_radius

    @property
    def num_nodes(self):
        return self.grid.num_nodes


def inertia_tensor(points, center, weights):
    """Surface second-moment matrix about center: tau = int (|y|^2 I - y y^T) dS."""
    y = points - center
    yy = np.einsum("n,ni,nj->ij", weights, y, y)
    return np.eye(3) * np.trace(yy) - yy


def surface_integral(geometry, values):
    """Integrate nodal values (scalar (m,) or vector (m, d)) over the surface."""
    w = geometry.quad_weights
    values = np.asarray(values)
    if values.shape[0] != w.size:
        raise ValueError("field has %d samples, surface has %d nodes"
                         % (values.shape[0], w.size))
    if values.ndim == 1:
        return np.sum(w * values)
    return w @ values


class Body:
    """A shape with a rigid pose: centroid position and orientation quaternion."""

    def __init__(self, shape, p, center=(0.0, 0.0, 0.0),
                 orientation=(1.0, 0.0, 0.0, 0.0)):
        self.shape = shape
        self.p = p
        self.ref = shape.geometry(p)
        self.center = np.array(center, dtype=float)
        self.orientation = np.array(orientation, dtype=float)
        self.orientation /= np.linalg.norm(self.orientation)

    def set_pose(self, center, orientation):
        self.center = np.array(center, dtype=float)
        self.orientation = np.array(orientation, dtype=float)
        self.orientation /= np.linalg.norm(self.orientation)

    def rotation(self):
        return quat_to_matrix(self.orientation)

    def positions(self):
        return self.center + self.ref.positions @ self.rotation().T

    def normals(self):
        return self.ref.normals @ self.rotation().T

    @property
    def area(self):
        return self.ref.area

    @property
    def quad_weights(self):
        return self.ref.quad_weights

    def inertia(self):
        R = self.rotation()
        return R @ self.ref.inertia @ R.T

    @property
    def num_nodes(self):
        return self.ref.num_nodes

    def radial_extent(self, directions):
        """Surface radius of the reference shape along unit directions (m, 3).

        Only meaningful for shapes that are star-shaped about the centroid;
        used for inside/outside tests.
        """
        d = np.asarray(directions, dtype=float)
        theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
        phi = np.arctan2(d[:, 1], d[:, 0])
        X = sphharm.eval_expansion(self.shape.coeffs, self.shape.degree,
                                   theta, phi)
        return np.linalg.norm(X.T, axis=-1)

    def contains(self, points, pad=0.0):
        """Star-shape test: is each world point inside the surface (plus pad)?"""
        rel = (np.atleast_2d(points) - self.center) @ self.rotation()
        r = np.linalg.norm(rel, axis=-1)
        safe = np.where(r > 0, r, 1.0)
        extent = self.radial_extent(rel / safe[:, None])
        return r < extent + pad


def body_moments(body):
    """Area, area centroid (world frame), and inertia about the centroid."""
    return body.area, body.center.copy(), body.inertia()
