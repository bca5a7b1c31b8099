"""Layer-potential evaluation: smooth, near-singular, and singular quadrature.

Three regimes, by target location relative to a source surface:

  * well separated: the native grid rule applied to weighted sources, summed
    either directly or by a pluggable fast-summation provider;
  * near zone (closer than half the node spacing): the density and geometry
    are upsampled to a finer grid and the smooth rule is applied there;
  * on-surface (self interaction): a pole-rotation rule. The grid is rotated
    so the target sits at the north pole, density and geometry are resampled
    onto the rotated grid by evaluating their harmonic expansions, and the
    1/|x-y| singularity is integrated against the chord distance to the pole,
    whose Legendre expansion on the sphere is known in closed form. The
    resulting correction enters as a per-ring reweighting of the smooth rule
    and the scheme converges spectrally.

Self-interaction matrices are assembled once per shape in the reference
orientation. Under a rigid rotation R the Stokes blocks transform by
conjugation with the block-diagonal rotation, and the scalar Laplace blocks
are invariant, so no reassembly is ever needed as bodies move.
"""

import numpy as np

from . import kernels, sphharm

STOKES_SINGLE = "stokes-single"
STOKES_TRACTION = "stokes-traction"
LAPLACE_SINGLE = "laplace-single"
LAPLACE_ADJOINT = "laplace-adjoint-double"
LAPLACE_GRADIENT = "laplace-gradient"

KERNEL_TAGS = (STOKES_SINGLE, STOKES_TRACTION, LAPLACE_SINGLE, LAPLACE_ADJOINT,
               LAPLACE_GRADIENT)

DEFAULT_UPSAMPLING = 4.0


class NearZoneError(Exception):
    pass


class DomainError(Exception):
    pass


def _is_stokes(kernel):
    if kernel not in KERNEL_TAGS:
        raise ValueError("unknown kernel tag %r" % (kernel,))
    return kernel in (STOKES_SINGLE, STOKES_TRACTION)


def near_threshold(body):
    """Distance below which targets are near-singular for this surface."""
    return 0.5 * body.ref.node_spacing


_NEAR_REFINEMENT = 4


def surface_distance(points, body, refinement=_NEAR_REFINEMENT):
    """Distance to the surface, sharpened against a refined node cloud.

    Node distances on the native grid overestimate the true surface distance
    by up to half the node spacing, which is far too coarse for near-zone
    classification; the refined cloud tightens the estimate to a fraction of
    the zone width.
    """
    fine = body.shape.geometry(refinement * body.p)
    cloud = body.center + fine.positions @ body.rotation().T
    points = np.atleast_2d(points)
    out = np.empty(len(points))
    step = max(1, 2_000_000 // max(1, len(cloud)))
    for lo in range(0, len(points), step):
        d = points[lo:lo + step, None, :] - cloud[None, :, :]
        out[lo:lo + step] = np.sqrt(np.einsum("tsi,tsi->ts", d, d).min(axis=1))
    return out


def _near_route_mask(points, body):
    """Targets to send through the upsampled rule: everything that could be
    inside the near zone, padded by the refined cloud's own resolution."""
    points = np.atleast_2d(points)
    cut = near_threshold(body) + body.ref.node_spacing
    # bounding-sphere rejection spares the refined cloud for distant targets
    gap = np.linalg.norm(points - body.center, axis=1) \
        - body.ref.bounding_radius - body.ref.node_spacing
    if np.all(gap > cut):
        return np.zeros(len(points), dtype=bool)
    fine = body.shape.geometry(_NEAR_REFINEMENT * body.p)
    cut = near_threshold(body) + fine.node_spacing
    mask = np.zeros(len(points), dtype=bool)
    check = gap <= cut + body.ref.node_spacing
    mask[check] = surface_distance(points[check], body) < cut
    return mask


# ---------------------------------------------------------------------------
# direct summation provider

class DirectSummation:
    """Reference O(N^2) summation backend; coincident pairs contribute zero.

    Any replacement must provide the same three methods and declare its
    accuracy; sums are over strengths that already include quadrature weights.
    """

    accuracy = 1e-14

    def __init__(self, chunk_pairs=4_000_000):
        self.chunk_pairs = chunk_pairs

    def _chunks(self, num_targets, num_sources):
        step = max(8, self.chunk_pairs // max(1, num_sources))
        for lo in range(0, num_targets, step):
            yield lo, min(lo + step, num_targets)

    def stokes_velocity(self, sources, strengths, targets):
        out = np.empty((len(targets), 3))
        for lo, hi in self._chunks(len(targets), len(sources)):
            out[lo:hi] = kernels.stokeslet_apply(targets[lo:hi], sources,
                                                 strengths,
                                                 skip_coincident=True)
        return out

    def stokes_derivatives(self, sources, strengths, targets):
        """Pressure and velocity gradient of the single layer at the targets."""
        pr = np.empty(len(targets))
        gr = np.empty((len(targets), 3, 3))
        for lo, hi in self._chunks(len(targets), len(sources)):
            pr[lo:hi], gr[lo:hi] = kernels.stokeslet_pressure_gradient(
                targets[lo:hi], sources, strengths, skip_coincident=True)
        return pr, gr

    def stokes_traction(self, sources, strengths, targets, target_normals):
        """Single-layer traction contracted with the target normals.

        Algebraically the same field as assembling the stress from
        stokes_derivatives, but the contraction keeps every temporary at
        pair size instead of pair-times-tensor size.
        """
        out = np.empty((len(targets), 3))
        for lo, hi in self._chunks(len(targets), len(sources)):
            out[lo:hi] = kernels.traction_apply(targets[lo:hi],
                                                target_normals[lo:hi],
                                                sources, strengths,
                                                skip_coincident=True)
        return out

    def laplace(self, sources, charges, targets, gradient=False):
        phi = np.empty(len(targets))
        grad = np.empty((len(targets), 3)) if gradient else None
        for lo, hi in self._chunks(len(targets), len(sources)):
            t = targets[lo:hi]
            phi[lo:hi] = kernels.laplace_apply(t, sources, charges,
                                               skip_coincident=True)
            if gradient:
                grad[lo:hi] = kernels.laplace_gradient(t, sources, charges,
                                                       skip_coincident=True)
        return (phi, grad) if gradient else phi


def _eval_from_sources(kernel, provider, sources, strengths, targets,
                       target_normals):
    """One summation pass of the given kernel from weighted point sources."""
    if kernel == STOKES_SINGLE:
        return provider.stokes_velocity(sources, strengths, targets)
    if kernel == STOKES_TRACTION:
        direct = getattr(provider, "stokes_traction", None)
        if direct is not None:
            return direct(sources, strengths, targets,
                          np.asarray(target_normals))
        pr, gr = provider.stokes_derivatives(sources, strengths, targets)
        return kernels.stress_from_derivatives(pr, gr, target_normals)
    if kernel == LAPLACE_SINGLE:
        return provider.laplace(sources, strengths, targets)
    if kernel == LAPLACE_ADJOINT:
        _, grad = provider.laplace(sources, strengths, targets, gradient=True)
        return np.einsum("ti,ti->t", grad, target_normals)
    if kernel == LAPLACE_GRADIENT:
        _, grad = provider.laplace(sources, strengths, targets, gradient=True)
        return grad
    raise ValueError("unknown kernel tag %r" % (kernel,))


def _weighted(body, density):
    density = np.asarray(density)
    if density.ndim == 1:
        return body.quad_weights * density
    return body.quad_weights[:, None] * density


def smooth_layer_eval(kernel, body, density, targets, target_normals=None,
                      provider=None):
    """Native-grid quadrature of a layer potential at well-separated targets."""
    provider = provider or DirectSummation()
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    dmin = surface_distance(targets, body)
    if np.any(dmin < near_threshold(body)):
        raise NearZoneError(
            "target at distance %.3g is inside the near zone (%.3g); "
            "use the upsampled evaluation" % (dmin.min(), near_threshold(body)))
    return _eval_from_sources(kernel, provider, body.positions(),
                              _weighted(body, density), targets, target_normals)


def near_eval(kernel, body, density, targets, target_normals=None,
              upsampling=DEFAULT_UPSAMPLING, provider=None, interior_ok=False):
    """Near-singular evaluation by upsampling density and geometry.

    With upsampling factor 1 this reproduces the smooth rule term by term.
    Targets inside the surface are rejected unless interior_ok is set; the
    upsampled rule is equally valid on either side for representations that
    extend across the surface (the scalar potentials do, the Stokes layers
    as used here do not).
    """
    if upsampling < 1.0:
        raise ValueError("upsampling factor must be >= 1")
    provider = provider or DirectSummation()
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if not interior_ok and np.any(body.contains(targets)):
        raise DomainError("near evaluation target lies on or inside the surface")
    p = body.p
    p_fine = int(round(upsampling * p))
    fine = body.shape.geometry(p_fine)
    density = np.asarray(density)
    coeffs = sphharm.forward_sht(body.ref.grid, density.T)
    fine_density = sphharm.eval_expansion(coeffs, p, fine.grid.theta,
                                          fine.grid.phi).T
    R = body.rotation()
    sources = body.center + fine.positions @ R.T
    if fine_density.ndim == 1:
        strengths = fine.quad_weights * fine_density
    else:
        strengths = fine.quad_weights[:, None] * fine_density
    return _eval_from_sources(kernel, provider, sources, strengths,
                              targets, target_normals)


# ---------------------------------------------------------------------------
# singular self-interaction by pole rotation

_SING_FACTORS = {}


def singular_ring_factor(q, series_degree):
    """Reweighting of the rotated-grid rule that integrates the 1/|x-y|
    singularity at the pole: 2 sin(theta/2) * sum_{n<=N} P_n(cos theta)."""
    key = (q, series_degree)
    if key not in _SING_FACTORS:
        grid = sphharm.get_grid(q)
        x = np.cos(grid.theta)
        total = np.ones_like(x)
        pm, pn = np.ones_like(x), x.copy()
        total += pn
        for n in range(2, series_degree + 1):
            pm, pn = pn, ((2 * n - 1) * x * pn - (n - 1) * pm) / n
            total += pn
        _SING_FACTORS[key] = 2.0 * np.sin(grid.theta / 2.0) * total
    return _SING_FACTORS[key]


class SelfBlock:
    """Dense self-interaction operator of one kernel on one surface.

    The matrix maps nodal density values to potential values on the same
    grid and is stored in the shape's reference orientation.
    """

    def __init__(self, kernel, matrix, p, shape_name,
                 orientation=(1.0, 0.0, 0.0, 0.0)):
        self.kernel = kernel
        self.matrix = matrix
        self.p = p
        self.shape_name = shape_name
        self.orientation = np.asarray(orientation, dtype=float)

    def apply(self, density, rotation=None):
        """Apply in world frame: conjugate by the body rotation if given."""
        density = np.asarray(density)
        if self.kernel in (LAPLACE_SINGLE, LAPLACE_ADJOINT):
            return self.matrix @ density
        if rotation is None:
            return (self.matrix @ density.reshape(-1)).reshape(density.shape)
        ref = density.reshape(-1, 3) @ rotation
        out = (self.matrix @ ref.reshape(-1)).reshape(-1, 3) @ rotation.T
        return out.reshape(density.shape)


def singular_self_matrix(ref, kernel, rotated_degree=None):
    """Self-interaction matrix of a single kernel on a reference surface."""
    return build_self_blocks(ref, (kernel,), rotated_degree=rotated_degree)[kernel]


def rotate_self_matrix(block, rotation):
    """World-frame copy of a self block under a rigid rotation.

    Stokes blocks conjugate 3x3 sub-block-wise; scalar Laplace blocks are
    rotation invariant and are returned unchanged (shared matrix).
    """
    rotation = np.asarray(rotation, dtype=float)
    defect = np.abs(rotation.T @ rotation - np.eye(3)).max()
    if defect > 1e-8:
        raise ValueError("matrix is not a rotation (orthogonality defect %.3g)"
                         % defect)
    if block.kernel in (LAPLACE_SINGLE, LAPLACE_ADJOINT):
        return SelfBlock(block.kernel, block.matrix, block.p, block.shape_name,
                         orientation=block.orientation)
    m = block.matrix.shape[0] // 3
    four = block.matrix.reshape(m, 3, m, 3)
    rotated = np.einsum("ia,tasb,jb->tisj", rotation, four, rotation)
    out = SelfBlock(block.kernel, rotated.reshape(3 * m, 3 * m), block.p,
                    block.shape_name)
    return out


def build_self_blocks(ref, kernel_tags, rotated_degree=None,
                      chunk_floats=3_000_000):
    """Assemble self-interaction matrices for several kernels in one sweep.

    ref is a reference-frame geometry; all requested kernels share the
    rotated-grid machinery, which dominates the cost. The rotated grid
    defaults to twice the surface degree, which resolves the pole-smooth
    integrand well below the degree-p representation error.
    """
    p = ref.p
    q = rotated_degree if rotated_degree is not None else 2 * p
    base = ref.grid
    rot = sphharm.get_grid(q)
    wsing = rot.weights * singular_ring_factor(q, q)
    shape = ref.shape
    sc = shape.coeffs
    sdeg = shape.degree
    m = base.num_nodes
    mq = rot.num_nodes
    fwd = base.forward_matrix()
    modes_p = base.num_modes

    ds_dth = np.stack([np.cos(rot.theta) * np.cos(rot.phi),
                       np.cos(rot.theta) * np.sin(rot.phi),
                       -np.sin(rot.theta)], axis=-1)
    ds_dph = np.stack([-np.sin(rot.theta) * np.sin(rot.phi),
                       np.sin(rot.theta) * np.cos(rot.phi),
                       np.zeros_like(rot.phi)], axis=-1)

    mats = {}
    for tag in kernel_tags:
        if tag == LAPLACE_GRADIENT:
            raise ValueError("the gradient kernel is for off-surface "
                             "evaluation only and has no self interaction")
        size = 3 * m if _is_stokes(tag) else m
        mats[tag] = np.zeros((size, size))

    batch = max(1, chunk_floats // (mq * modes_p))
    for lo in range(0, m, batch):
        hi = min(lo + batch, m)
        nb = hi - lo
        Q = np.stack([sphharm.rotation_to_pole(base.theta[t], base.phi[t])
                      for t in range(lo, hi)])
        u = np.einsum("bij,rj->bri", Q, rot.nodes)
        thr = np.arccos(np.clip(u[..., 2], -1.0, 1.0)).ravel()
        phr = np.arctan2(u[..., 1], u[..., 0]).ravel()

        # geometry of the rotated parametrization
        Ys = sphharm.ynm_at(sdeg, thr, phr)
        X = np.real(sc @ Ys).T.reshape(nb, mq, 3)
        Gt = sphharm.sph_tangent_gradient_at(sdeg, thr, phr)
        t_th = np.einsum("bij,rj->bri", Q, ds_dth).reshape(-1, 3)
        t_ph = np.einsum("bij,rj->bri", Q, ds_dph).reshape(-1, 3)
        Xt = np.real(np.einsum("cn,nr->rc", sc,
                               np.einsum("nri,ri->nr", Gt, t_th)))
        Xp = np.real(np.einsum("cn,nr->rc", sc,
                               np.einsum("nri,ri->nr", Gt, t_ph)))
        E = np.einsum("ri,ri->r", Xt, Xt)
        F = np.einsum("ri,ri->r", Xt, Xp)
        G2 = np.einsum("ri,ri->r", Xp, Xp)
        Wrot = np.sqrt(np.maximum(E * G2 - F * F, 0.0)).reshape(nb, mq)
        wq = wsing * Wrot

        # resampling: degree-p expansion evaluated at the rotated nodes
        Yrot = np.ascontiguousarray(
            sphharm.ynm_at(p, thr, phr).T.reshape(nb, mq, modes_p))

        r = ref.positions[lo:hi, None, :] - X
        r2 = np.einsum("bri,bri->br", r, r)
        inv = 1.0 / np.sqrt(r2)

        for tag in kernel_tags:
            if tag == STOKES_SINGLE:
                Kv = (kernels.ONE_OVER_8PI
                      * (np.einsum("br,ij->brij", inv, np.eye(3))
                         + np.einsum("br,bri,brj->brij", inv ** 3, r, r)))
                V = np.einsum("br,brij->bijr", wq, Kv).reshape(nb, 9, mq)
            elif tag == STOKES_TRACTION:
                rn = np.einsum("bri,bi->br", r, ref.normals[lo:hi])
                Kv = -6.0 * kernels.ONE_OVER_8PI * np.einsum(
                    "br,bri,brj->brij", rn * inv ** 5, r, r)
                V = np.einsum("br,brij->bijr", wq, Kv).reshape(nb, 9, mq)
            elif tag == LAPLACE_SINGLE:
                V = (wq * kernels.ONE_OVER_4PI * inv)[:, None, :]
            else:
                rn = np.einsum("bri,bi->br", r, ref.normals[lo:hi])
                V = (wq * (-kernels.ONE_OVER_4PI) * rn * inv ** 3)[:, None, :]
            rows = np.real((V @ Yrot) @ fwd)      # (nb, comps, m)
            if _is_stokes(tag):
                rows = rows.reshape(nb, 3, 3, m).swapaxes(2, 3)
                mats[tag][3 * lo:3 * hi] = rows.reshape(3 * nb, 3 * m)
            else:
                mats[tag][lo:hi] = rows[:, 0, :]

    return {tag: SelfBlock(tag, mats[tag], p, shape.name)
            for tag in kernel_tags}


# ---------------------------------------------------------------------------
# multi-body application

class ShapeOperatorCache:
    """Per-shape self blocks, shared by all bodies with the same shape."""

    def __init__(self, rotated_degree=None):
        self.rotated_degree = rotated_degree
        self._blocks = {}

    def block(self, body, kernel):
        key = (id(body.shape), body.p, kernel)
        if key not in self._blocks:
            fresh = build_self_blocks(body.ref, (kernel,),
                                      rotated_degree=self.rotated_degree)
            self._blocks[key] = fresh[kernel]
        return self._blocks[key]


def fast_apply(kernel, bodies, densities, cache, provider=None,
               upsampling=DEFAULT_UPSAMPLING, include_self=True):
    """Apply a layer operator over all surfaces to per-body nodal densities.

    Inter-body terms come from one all-to-all summation pass; the spurious
    same-body portion of that pass is removed with a provider-consistent
    subtraction and replaced by the singular self matrix, and targets inside
    another body's near zone are corrected with the upsampled rule.
    """
    provider = provider or DirectSummation()
    stokes = _is_stokes(kernel)
    positions = [b.positions() for b in bodies]
    normals = [b.normals() for b in bodies]
    weighted = [_weighted(b, d) for b, d in zip(bodies, densities)]
    all_src = np.vstack(positions)
    all_str = np.concatenate(weighted, axis=0)
    all_tgt = np.vstack(positions)
    all_nrm = np.vstack(normals)

    vals = _eval_from_sources(kernel, provider, all_src, all_str,
                              all_tgt, all_nrm)
    out = []
    offsets = np.cumsum([0] + [b.num_nodes for b in bodies])
    for i, body in enumerate(bodies):
        lo, hi = offsets[i], offsets[i + 1]
        vi = vals[lo:hi]
        # remove this body's own smooth-rule contribution from the global pass
        vi = vi - _eval_from_sources(kernel, provider, positions[i],
                                     weighted[i], positions[i], normals[i])
        out.append(vi)

    # near-zone corrections between distinct bodies
    for j, src_body in enumerate(bodies):
        for i in range(len(bodies)):
            if i == j:
                continue
            mask = _near_route_mask(positions[i], src_body)
            if not np.any(mask):
                continue
            tg = positions[i][mask]
            nm = normals[i][mask]
            out[i][mask] -= _eval_from_sources(kernel, provider, positions[j],
                                               weighted[j], tg, nm)
            out[i][mask] += near_eval(kernel, src_body, densities[j], tg,
                                      target_normals=nm,
                                      upsampling=upsampling,
                                      provider=provider)

    if include_self:
        for i, body in enumerate(bodies):
            block = cache.block(body, kernel)
            out[i] = out[i] + block.apply(densities[i],
                                          rotation=body.rotation())
    return out


def eval_targets(kernel, bodies, densities, targets, target_normals=None,
                 provider=None, upsampling=DEFAULT_UPSAMPLING,
                 exclude_body=None, allow_interior=False):
    """Evaluate a layer potential of all bodies at off-surface targets."""
    provider = provider or DirectSummation()
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    total = None
    for j, body in enumerate(bodies):
        if exclude_body is not None and j == exclude_body:
            continue
        if not allow_interior and np.any(body.contains(targets)):
            raise DomainError("evaluation target lies inside body %d" % j)
        near = _near_route_mask(targets, body)
        far = ~near
        shape = (len(targets),) if kernel in (LAPLACE_SINGLE, LAPLACE_ADJOINT) \
            else (len(targets), 3)
        vals = np.zeros(shape)
        if np.any(far):
            nrm = target_normals[far] if target_normals is not None else None
            vals[far] = _eval_from_sources(
                kernel, provider, body.positions(),
                _weighted(body, densities[j]), targets[far], nrm)
        if np.any(near):
            nrm = target_normals[near] if target_normals is not None else None
            vals[near] = near_eval(kernel, body, densities[j], targets[near],
                                   target_normals=nrm, upsampling=upsampling,
                                   provider=provider,
                                   interior_ok=allow_interior)
        total = vals if total is None else total + vals
    if total is None:
        total = np.zeros((len(targets), 3))
    return total
