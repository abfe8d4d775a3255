# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: escape cost, Bellman stage sweep, DDP passes.

Every function here has a pure-Python twin in ``_fallback.py`` with the
same signature and semantics; ``sglosa.backend`` picks one at import.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, cbrt, cos, acos, fabs, floor, ceil, nearbyint, INFINITY

cnp.import_array()

cdef short NO_CONTROL = -32768


cdef inline double _dmin(double a, double b) noexcept nogil:
    return a if a < b else b


cdef inline double _dmax(double a, double b) noexcept nogil:
    return a if a > b else b


cdef inline double _q(double t, double w, double b, double c, double d) noexcept nogil:
    # t**4 * d/dt[w t + E(t)], the free-horizon stationarity quartic
    cdef double t2 = t * t
    return w * t2 * t2 - b * t2 + c * t - d


cdef inline double _dq(double t, double w, double b, double c) noexcept nogil:
    return 4.0 * w * t * t * t - 2.0 * b * t + c


cdef inline double _objective(double t, double w, double D, double m, double dv) noexcept nogil:
    cdef double s = D - m * t
    return w * t + 6.0 * s * s / (t * t * t) + dv * dv / (2.0 * t)


cdef inline double _polish(double t, double w, double b, double c, double d) noexcept nogil:
    # Newton on the quartic from a close root estimate, until the step is
    # at rounding level
    cdef double t2, qt, dqt, tn
    cdef int i
    for i in range(8):
        t2 = t * t
        qt = w * t2 * t2 - b * t2 + c * t - d
        dqt = _dq(t, w, b, c)
        if dqt == 0.0:
            break
        tn = t - qt / dqt
        if tn <= 0.0:
            break
        if fabs(tn - t) <= 4e-16 * t:
            return tn
        t = tn
    return t


cdef double _largest_cubic_root(double A, double B, double C) noexcept nogil:
    # largest real root of y^3 + A y^2 + B y + C = 0
    cdef double p = B - A * A / 3.0
    cdef double q = (2.0 * A * A * A / 27.0 - A * B / 3.0) + C
    cdef double disc = q * q / 4.0 + p * p * p / 27.0
    cdef double u, z, r, arg, y, fy, dfy
    cdef int i
    if disc > 0.0:
        u = cbrt(-0.5 * q - (sqrt(disc) if q >= 0.0 else -sqrt(disc)))
        z = u - p / (3.0 * u) if u != 0.0 else 0.0
    elif p < 0.0:
        r = sqrt(-p / 3.0)
        arg = -0.5 * q / (r * r * r)
        if arg > 1.0:
            arg = 1.0
        elif arg < -1.0:
            arg = -1.0
        z = 2.0 * r * cos(acos(arg) / 3.0)
    else:
        z = 0.0
    y = z - A / 3.0
    for i in range(2):
        fy = ((y + A) * y + B) * y + C
        dfy = (3.0 * y + 2.0 * A) * y + B
        if dfy == 0.0:
            break
        y -= fy / dfy
    return y


cdef int _quartic_positive_roots(double w, double b, double c, double d, double* out) noexcept nogil:
    # positive real roots of w t^4 - b t^2 + c t - d (b, d >= 0): Ferrari
    # factorization into two real quadratics via the resolvent cubic
    cdef double P = -b / w, Q = c / w, R = -d / w
    cdef double y, s, al, be, disc, sq, r1, r2, u
    cdef int n = 0
    y = _largest_cubic_root(2.0 * P, P * P - 4.0 * R, -Q * Q)
    if y > 1e-12 * (fabs(P) + sqrt(fabs(R))):
        s = sqrt(y)
        al = 0.5 * (P + y - Q / s)
        be = 0.5 * (P + y + Q / s)
        # t^2 + s t + al = 0
        disc = y - 4.0 * al
        if disc >= -1e-12 * (y + fabs(4.0 * al)):
            sq = sqrt(_dmax(disc, 0.0))
            r1 = -0.5 * (s + sq)
            r2 = al / r1 if r1 != 0.0 else 0.0
            if r1 > 0.0:
                out[n] = r1
                n += 1
            if r2 > 0.0:
                out[n] = r2
                n += 1
        # t^2 - s t + be = 0
        disc = y - 4.0 * be
        if disc >= -1e-12 * (y + fabs(4.0 * be)):
            sq = sqrt(_dmax(disc, 0.0))
            r1 = 0.5 * (s + sq)
            r2 = be / r1 if r1 != 0.0 else 0.0
            if r1 > 0.0:
                out[n] = r1
                n += 1
            if r2 > 0.0:
                out[n] = r2
                n += 1
    else:
        # (nearly) biquadratic
        sq = sqrt(P * P - 4.0 * R)
        u = 0.5 * (-P + sq)
        if u > 0.0:
            out[n] = sqrt(u)
            n += 1
        u = 0.5 * (-P - sq)
        if u > 0.0:
            out[n] = sqrt(u)
            n += 1
    return n


cdef int _small_root(double w, double b, double c, double d, double* out) noexcept nogil:
    # smaller root of b t^2 - c t + d, kept only where w t^4 << b t^2
    cdef double disc, t
    if c <= 0.0 or d <= 0.0:
        return 0
    disc = c * c - 4.0 * b * d
    if disc < 0.0:
        return 0
    t = 2.0 * d / (c + sqrt(disc))
    if w * t * t > 1e-2 * b:
        return 0
    out[0] = t
    return 1


cdef double _escape(double x, double v, double xe, double ve, double w, double* te_out) noexcept nogil:
    cdef double D = xe - x
    cdef double m = 0.5 * (v + ve)
    cdef double dv = ve - v
    cdef double b = 6.0 * m * m + 0.5 * dv * dv
    cdef double c = 24.0 * D * m
    cdef double d = 18.0 * D * D
    cdef double roots[5]
    cdef double best = INFINITY
    cdef double best_t = 0.0
    cdef double t, f, scale
    cdef int n, i
    scale = b
    if fabs(c) > scale:
        scale = fabs(c)
    if d > scale:
        scale = d
    if scale <= 1e-14 * w:
        te_out[0] = 0.0
        return 0.0
    # stationary points of w t + E(t) are the positive roots of the quartic;
    # the global minimum is the smallest objective among them
    n = _quartic_positive_roots(w, b, c, d, roots)
    # near the target the minimizer is a tiny te where w t^4 is negligible
    # and the factorization can lose it
    n += _small_root(w, b, c, d, roots + n)
    for i in range(n):
        t = roots[i]
        # local maxima of the objective sit where q crosses downward
        if n > 1 and _dq(t, w, b, c) < -1e-9 * (4.0 * w * t * t * t + 2.0 * b * t + fabs(c)):
            continue
        t = _polish(t, w, b, c, d)
        f = _objective(t, w, D, m, dv)
        if f < best:
            best = f
            best_t = t
    te_out[0] = best_t
    return best


cdef double _escape_warm(double x, double v, double xe, double ve, double w, double t0,
                         double* te_out) noexcept nogil:
    # same minimizer as _escape, by safeguarded Newton from a nearby horizon
    # t0; only used when the quartic provably has a single positive root,
    # otherwise (or on any doubt) defers to the full solve
    cdef double D = xe - x
    cdef double m = 0.5 * (v + ve)
    cdef double dv = ve - v
    cdef double b = 6.0 * m * m + 0.5 * dv * dv
    cdef double c = 24.0 * D * m
    cdef double d = 18.0 * D * D
    cdef double t = t0, lo = 0.0, hi = INFINITY, qt, dqt, tn, t2
    cdef double disc, mag, b2, c2, bd, wd
    cdef int i
    if not (t0 > 0.0) or d <= 1e-12 * (b + fabs(c) + 1.0):
        return _escape(x, v, xe, ve, w, te_out)
    if c > 0.0:
        # discriminant over w; negative means two real roots, i.e. exactly
        # one positive root (w t^4 - b t^2 + c t - d has one negative root)
        b2 = b * b
        c2 = c * c
        bd = b * d
        wd = w * d
        disc = (-256.0 * wd * wd * d - 128.0 * wd * b2 * d + 144.0 * wd * b * c2
                - 27.0 * w * c2 * c2 - 16.0 * b2 * bd * b + 4.0 * b2 * b * c2)
        mag = (256.0 * wd * wd * d + 128.0 * wd * b2 * d + 144.0 * wd * b * c2
               + 27.0 * w * c2 * c2 + 16.0 * b2 * bd * b + 4.0 * b2 * b * c2)
        if disc > -1e-9 * mag:
            return _escape(x, v, xe, ve, w, te_out)
    # q < 0 on (0, root), > 0 beyond
    for i in range(12):
        t2 = t * t
        qt = w * t2 * t2 - b * t2 + c * t - d
        if qt < 0.0:
            lo = t
        elif qt > 0.0:
            hi = t
        else:
            break
        dqt = _dq(t, w, b, c)
        if dqt <= 0.0:
            return _escape(x, v, xe, ve, w, te_out)
        tn = t - qt / dqt
        if not (tn > lo and tn < hi):
            return _escape(x, v, xe, ve, w, te_out)
        if fabs(tn - t) <= 4e-16 * t:
            t = tn
            break
        t = tn
    else:
        return _escape(x, v, xe, ve, w, te_out)
    te_out[0] = t
    return _objective(t, w, D, m, dv)


def escape_scalar(double x, double v, double xe, double ve, double w):
    cdef double te
    cdef double cost = _escape(x, v, xe, ve, w, &te)
    return cost, te


def escape_batch(x, v, double xe, double ve, double w):
    cdef cnp.ndarray[double, ndim=1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] vf = np.ascontiguousarray(v, dtype=np.float64).ravel()
    cdef Py_ssize_t n = xf.shape[0], i
    cost = np.empty(n)
    te = np.empty(n)
    cdef double[::1] cv = cost, tv = te, xv = xf, vv = vf
    with nogil:
        for i in range(n):
            cv[i] = _escape(xv[i], vv[i], xe, ve, w, &tv[i])
    shape = np.shape(x)
    return cost.reshape(shape), te.reshape(shape)


def stage_sweep(const double[:, ::1] v_next, const double[:, ::1] j_next,
                long ox_next, long ov_next, long ox, long ov,
                double[:, ::1] v_out, short[:, ::1] r_out,
                long ia_lo, long ia_hi, double p, double delta):
    """One Bellman stage over a rectangular box of grid nodes.

    Nodes are absolute integer indices: x = ix*dx, v = iv*dv, a = ia*delta with
    dx = delta*T^2/2 and dv = delta*T, so the successor of (ix, iv) under ia is
    (ix + 2*iv + ia, iv + ia). Candidates are scanned by increasing |a|,
    positive first; a later candidate wins only if lower by more than 1e-12.
    """
    cdef Py_ssize_t nx = v_out.shape[0], nv = v_out.shape[1]
    cdef Py_ssize_t nxn = v_next.shape[0], nvn = v_next.shape[1]
    cdef Py_ssize_t i, j, q, nord
    cdef long ix, iv, m, jx, jv, step
    cdef double best, phi, a, vn
    cdef short arg
    cdef bint use_v = p < 1.0
    cdef bint use_j = p > 0.0
    cdef long[::1] order = np.empty(2 * (ia_hi - ia_lo + 1) + 1, dtype=np.int64)
    nord = 0
    for step in range(0, max(ia_hi, -ia_lo) + 1):
        if ia_lo <= step <= ia_hi:
            order[nord] = step
            nord += 1
        if step > 0 and ia_lo <= -step <= ia_hi:
            order[nord] = -step
            nord += 1
    with nogil:
        for i in range(nx):
            ix = ox + i
            for j in range(nv):
                iv = ov + j
                best = INFINITY
                arg = NO_CONTROL
                for q in range(nord):
                    m = order[q]
                    jx = ix + 2 * iv + m - ox_next
                    jv = iv + m - ov_next
                    if jx < 0 or jx >= nxn or jv < 0 or jv >= nvn:
                        continue
                    a = m * delta
                    phi = 0.5 * a * a
                    if use_v:
                        vn = v_next[jx, jv]
                        if vn == INFINITY:
                            continue
                        phi += (1.0 - p) * vn
                    if use_j:
                        phi += p * j_next[jx, jv]
                    if phi < best - 1e-12:
                        best = phi
                        arg = <short>m
                v_out[i, j] = best
                r_out[i, j] = arg


cdef int _backward_into(const double[::1] xs, const double[::1] vs, const double[::1] accels,
                        const double[::1] pswitch, const double[:, ::1] fits, double* box,
                        double T, bint project, double[::1] alpha, double[:, ::1] beta,
                        double[:, ::1] quad, signed char[::1] active,
                        const signed char* force) noexcept nogil:
    # ``force`` (may be NULL) holds a bound code per stage that is kept
    # active where the QP would otherwise leave the stage free
    cdef double xmin = box[0], xmax = box[1], vmin = box[2]
    cdef double vmax = box[3], amin = box[4], amax = box[5]
    cdef Py_ssize_t K = accels.shape[0], k
    cdef double s11 = 0.0, s12 = 0.0, s22 = 0.0, g1 = 0.0, g2 = 0.0
    cdef double p, e11, e12, e22, tr, det, disc, l1, l2, c2, sn, nrm
    cdef double h11, h12, h22, n1, n2, u1, u2, G1 = 0.5 * T * T, G2 = T
    cdef double A11, A12, A22, B1, B2, C, D, E1, E2
    cdef double X1, V1, up, lo, cand, da, al, b1, b2
    cdef int up_code, lo_code, nproj = 0
    for k in range(K - 1, -1, -1):
        p = pswitch[k]
        e11 = 2.0 * fits[k, 0]
        e22 = 2.0 * fits[k, 1]
        e12 = fits[k, 2]
        # PSD projection of the escape Hessian
        tr = e11 + e22
        det = e11 * e22 - e12 * e12
        disc = sqrt(_dmax(0.25 * tr * tr - det, 0.0))
        l1 = 0.5 * tr + disc
        l2 = 0.5 * tr - disc
        if project and p > 0.0 and l2 < 0.0:
            nproj += 1
            if l1 <= 0.0:
                e11 = 0.0
                e12 = 0.0
                e22 = 0.0
            else:
                # keep only the l1 eigencomponent
                if fabs(e12) > 0.0:
                    c2 = l1 - e22
                    sn = e12
                elif e11 >= e22:
                    c2 = 1.0
                    sn = 0.0
                else:
                    c2 = 0.0
                    sn = 1.0
                nrm = c2 * c2 + sn * sn
                e11 = l1 * c2 * c2 / nrm
                e12 = l1 * c2 * sn / nrm
                e22 = l1 * sn * sn / nrm
        h11 = p * e11 + (1.0 - p) * s11
        h12 = p * e12 + (1.0 - p) * s12
        h22 = p * e22 + (1.0 - p) * s22
        n1 = p * fits[k, 3] + (1.0 - p) * g1
        n2 = p * fits[k, 4] + (1.0 - p) * g2
        A11 = h11
        A12 = h11 * T + h12
        A22 = h11 * T * T + 2.0 * h12 * T + h22
        u1 = h11 * G1 + h12 * G2
        u2 = h12 * G1 + h22 * G2
        B1 = u1
        B2 = T * u1 + u2
        C = 1.0 + G1 * u1 + G2 * u2
        if C <= 1e-8:
            C = 1e-8
            nproj += 1
        D = accels[k] + G1 * n1 + G2 * n2
        E1 = n1
        E2 = T * n1 + n2
        quad[k, 0] = A11
        quad[k, 1] = A12
        quad[k, 2] = A22
        quad[k, 3] = B1
        quad[k, 4] = B2
        quad[k, 5] = C
        quad[k, 6] = D
        quad[k, 7] = E1
        quad[k, 8] = E2
        X1 = xs[k + 1]
        V1 = vs[k + 1]
        up = 2.0 * (xmax - X1) / (T * T)
        up_code = 1
        cand = (vmax - V1) / T
        if cand < up:
            up = cand
            up_code = 2
        cand = amax - accels[k]
        if cand < up:
            up = cand
            up_code = 3
        lo = 2.0 * (xmin - X1) / (T * T)
        lo_code = -1
        cand = (vmin - V1) / T
        if cand > lo:
            lo = cand
            lo_code = -2
        cand = amin - accels[k]
        if cand > lo:
            lo = cand
            lo_code = -3
        da = -D / C
        if da > up:
            al = up
            active[k] = up_code
        elif da < lo:
            al = lo
            active[k] = lo_code
        else:
            al = da
            active[k] = 0
        if active[k] == 0 and force != NULL and force[k] != 0:
            active[k] = force[k]
            al = _bound_value(force[k], X1, V1, accels[k], box, T)
        if active[k] == 0:
            b1 = -B1 / C
            b2 = -B2 / C
        elif active[k] == 1 or active[k] == -1:
            b1 = -2.0 / (T * T)
            b2 = -2.0 / T
        elif active[k] == 2 or active[k] == -2:
            b1 = 0.0
            b2 = -1.0 / T
        else:
            b1 = 0.0
            b2 = 0.0
        alpha[k] = al
        beta[k, 0] = b1
        beta[k, 1] = b2
        s11 = A11 + 2.0 * B1 * b1 + C * b1 * b1
        s12 = A12 + B1 * b2 + B2 * b1 + C * b1 * b2
        s22 = A22 + 2.0 * B2 * b2 + C * b2 * b2
        g1 = E1 + B1 * al + b1 * (C * al + D)
        g2 = E2 + B2 * al + b2 * (C * al + D)
    return nproj


cdef inline double _bound_value(int code, double X1, double V1, double a, double* box,
                               double T) noexcept nogil:
    # control change that puts the nominal next state on bound ``code``
    if code == 1:
        return 2.0 * (box[1] - X1) / (T * T)
    if code == -1:
        return 2.0 * (box[0] - X1) / (T * T)
    if code == 2:
        return (box[3] - V1) / T
    if code == -2:
        return (box[2] - V1) / T
    if code == 3:
        return box[5] - a
    return box[4] - a


cdef void _unpack_bounds(bounds, double* box) except *:
    cdef int i
    if len(bounds) != 6:
        raise ValueError("bounds must be (x_min, x_max, v_min, v_max, a_min, a_max)")
    for i in range(6):
        box[i] = bounds[i]


def ddp_backward(const double[::1] xs, const double[::1] vs, const double[::1] accels,
                 const double[::1] pswitch, const double[:, ::1] fits, bounds, double T,
                 bint project=True, force=None):
    """Backward sweep of constrained DDP for the double integrator.

    ``fits[k]`` holds the escape quadratic (p1..p6) centred at the nominal
    state k+1. Returns alpha, beta (K x 2), the per-stage Q coefficients
    (K x 9: A11 A12 A22 B1 B2 C D E1 E2), the active-bound code per stage
    (0 free, +/-1 position, +/-2 speed, +/-3 acceleration) and the number
    of convexity projections. With ``project`` false the escape Hessian is
    used as fitted and only the control curvature is floored. ``force``
    optionally holds a bound code per stage kept active where the QP is free.
    """
    cdef double box[6]
    cdef Py_ssize_t K = accels.shape[0]
    cdef int nproj
    _unpack_bounds(bounds, box)
    alpha_a = np.zeros(K)
    beta_a = np.zeros((K, 2))
    quad_a = np.zeros((K, 9))
    active_a = np.zeros(K, dtype=np.int8)
    cdef double[::1] alpha = alpha_a
    cdef double[:, ::1] beta = beta_a, quad = quad_a
    cdef signed char[::1] active = active_a
    cdef signed char[::1] fv
    cdef const signed char* fp = NULL
    if force is not None:
        fv = np.ascontiguousarray(force, dtype=np.int8)
        if fv.shape[0] != K:
            raise ValueError("force must have one code per stage")
        fp = &fv[0]
    with nogil:
        nproj = _backward_into(xs, vs, accels, pswitch, fits, box, T, project,
                               alpha, beta, quad, active, fp)
    return alpha_a, beta_a, quad_a, active_a, nproj


cdef inline double _escape_model(double x, double v, double xe, double ve, double wh,
                                 bint energy_only) noexcept nogil:
    cdef double te
    cdef double f = _escape(x, v, xe, ve, wh, &te)
    return f - wh * te if energy_only else f


cdef double _forward_into(const double[::1] xs, const double[::1] vs, const double[::1] accels,
                          const double[::1] alpha, const double[:, ::1] beta, double eps,
                          double* box, double T, const double[::1] pswitch,
                          double xe, double ve, double wh, bint energy_only,
                          double[::1] nx, double[::1] nv, double[::1] na,
                          int* nclamp_out, bint* feasible_out, double* step_out,
                          signed char* clamped) noexcept nogil:
    # rollout of the feedback law; returns the exact expected cost. Clamped
    # stages get the code of the binding bound in ``clamped`` (if not NULL)
    cdef double xmin = box[0], xmax = box[1], vmin = box[2]
    cdef double vmax = box[3], amin = box[4], amax = box[5]
    cdef Py_ssize_t K = accels.shape[0], k
    cdef double x = xs[0], v = vs[0], a, hi, lo, cand, tol = 1e-9
    cdef double total = 0.0, surv = 1.0, p, stage, step = 0.0, f, te = 0.0
    cdef int nclamp = 0, hi_code, lo_code, code
    cdef bint feasible = True
    nx[0] = x
    nv[0] = v
    for k in range(K):
        a = accels[k] + eps * (alpha[k] + beta[k, 0] * (x - xs[k]) + beta[k, 1] * (v - vs[k]))
        hi = 2.0 * (xmax - x - v * T) / (T * T)
        hi_code = 1
        cand = (vmax - v) / T
        if cand < hi:
            hi = cand
            hi_code = 2
        if amax < hi:
            hi = amax
            hi_code = 3
        lo = 2.0 * (xmin - x - v * T) / (T * T)
        lo_code = -1
        cand = (vmin - v) / T
        if cand > lo:
            lo = cand
            lo_code = -2
        if amin > lo:
            lo = amin
            lo_code = -3
        code = 0
        if a > hi:
            a = hi
            code = hi_code
            nclamp += 1
        elif a < lo:
            a = lo
            code = lo_code
            nclamp += 1
        if clamped != NULL:
            clamped[k] = code
        x = x + v * T + 0.5 * a * T * T
        v = v + a * T
        if (x > xmax + tol or x < xmin - tol or v > vmax + tol or v < vmin - tol
                or a > amax + tol or a < amin - tol):
            feasible = False
        na[k] = a
        nx[k + 1] = x
        nv[k + 1] = v
        step += (a - accels[k]) * (a - accels[k])
        p = pswitch[k]
        stage = 0.5 * a * a
        if p > 0.0:
            # consecutive states are close: warm start from the last horizon
            f = _escape_warm(x, v, xe, ve, wh, te, &te)
            stage += p * (f - wh * te if energy_only else f)
        total += surv * stage
        surv *= 1.0 - p
    nclamp_out[0] = nclamp
    feasible_out[0] = feasible
    step_out[0] = sqrt(step)
    return total


def ddp_forward(const double[::1] xs, const double[::1] vs, const double[::1] accels,
                const double[::1] alpha, const double[:, ::1] beta, double eps,
                bounds, double T, const double[::1] pswitch,
                double xe, double ve, double wh, bint energy_only):
    """Roll the feedback law forward from the nominal initial state.

    Returns new positions, speeds, accelerations, the number of clamped
    stages, whether every state stayed inside the box, the exact expected
    cost of the rollout and the Euclidean norm of the control change.
    """
    cdef double box[6]
    cdef Py_ssize_t K = accels.shape[0]
    cdef int nclamp
    cdef bint feasible
    cdef double cost, step
    _unpack_bounds(bounds, box)
    nx_a = np.empty(K + 1)
    nv_a = np.empty(K + 1)
    na_a = np.empty(K)
    cdef double[::1] nx = nx_a, nv = nv_a, na = na_a
    with nogil:
        cost = _forward_into(xs, vs, accels, alpha, beta, eps, box, T, pswitch,
                             xe, ve, wh, energy_only, nx, nv, na,
                             &nclamp, &feasible, &step, NULL)
    return nx_a, nv_a, na_a, nclamp, feasible, cost, step


cdef void _fits_into(const double[::1] xs, const double[::1] vs, const double[::1] pswitch,
                     const double[:, ::1] offsets, const double[:, ::1] op,
                     double xe, double ve, double wh, bint energy_only,
                     double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t K = pswitch.shape[0], n = offsets.shape[0], k, i, j
    cdef double vals[64]
    cdef double acc, te0, te
    for k in range(K):
        if pswitch[k] <= 0.0:
            for j in range(6):
                out[k, j] = 0.0
            continue
        # full solve at the first point, warm starts from it elsewhere
        vals[0] = _escape(xs[k + 1] + offsets[0, 0], vs[k + 1] + offsets[0, 1],
                          xe, ve, wh, &te0)
        if energy_only:
            vals[0] -= wh * te0
        for i in range(1, n):
            vals[i] = _escape_warm(xs[k + 1] + offsets[i, 0], vs[k + 1] + offsets[i, 1],
                                   xe, ve, wh, te0, &te)
            if energy_only:
                vals[i] -= wh * te
        for j in range(6):
            acc = 0.0
            for i in range(n):
                acc += op[j, i] * vals[i]
            out[k, j] = acc


def escape_fits(const double[::1] xs, const double[::1] vs, const double[::1] pswitch,
                const double[:, ::1] offsets, const double[:, ::1] op,
                double xe, double ve, double wh, bint energy_only):
    """Weighted least-squares quadratic of the escape cost around each state
    ``(xs[k+1], vs[k+1])`` with ``pswitch[k] > 0`` (zero rows elsewhere).

    ``op`` (6 x n) maps the n stencil values to the fit coefficients.
    """
    if offsets.shape[0] > 64:
        raise ValueError("stencil too large")
    out_a = np.zeros((pswitch.shape[0], 6))
    cdef double[:, ::1] out = out_a
    with nogil:
        _fits_into(xs, vs, pswitch, offsets, op, xe, ve, wh, energy_only, out)
    return out_a


def expected_cost(const double[::1] xs, const double[::1] vs, const double[::1] accels,
                  const double[::1] pswitch, double xe, double ve, double wh, bint energy_only):
    """sum_k S(k) (a_k^2/2 + p_k J(x_{k+1})), S the no-switch survival."""
    cdef Py_ssize_t K = accels.shape[0], k
    cdef double total = 0.0, surv = 1.0, p, stage, f, te = 0.0
    with nogil:
        for k in range(K):
            p = pswitch[k]
            stage = 0.5 * accels[k] * accels[k]
            if p > 0.0:
                f = _escape_warm(xs[k + 1], vs[k + 1], xe, ve, wh, te, &te)
                stage += p * (f - wh * te if energy_only else f)
            total += surv * stage
            surv *= 1.0 - p
    return total


def ddp_solve(const double[::1] x0, const double[::1] v0, const double[::1] a0,
              double cost0, const double[::1] pswitch,
              const double[:, ::1] offsets, const double[:, ::1] op, bounds, double T,
              double xe, double ve, double wh, bint energy_only,
              double eps0, double eps1, int max_iterations, int max_halvings,
              bint project, double cost_tol):
    """Whole DDP iteration (fits, backward sweep, forward attempts with step
    halving) from a nominal trajectory of expected cost ``cost0``; see
    ``sglosa.ddp.solve_ddp``.

    Returns the final x, v, a, cost, a per-iteration log array with columns
    (cost, eps, step, clamps, projections, feasible), the convergence flag
    and the last backward-pass outputs (alpha, beta, quad, active, nproj).
    """
    cdef double box[6]
    cdef Py_ssize_t K = a0.shape[0]
    cdef int it, h, rnd, nclamp, nproj = 0, b_clamp = 0, n_log = 0, nforce
    cdef bint ok, b_ok = False, feasible = True, converged = False, have, done
    cdef double c, step, eps, b_cost = 0.0, b_eps = 0.0, b_step = 0.0, cost = cost0
    if offsets.shape[0] > 64:
        raise ValueError("stencil too large")
    _unpack_bounds(bounds, box)
    # nominal, trial and best-trial buffers
    x_a = np.array(x0, dtype=float)
    v_a = np.array(v0, dtype=float)
    a_a = np.array(a0, dtype=float)
    tx_a, tv_a, ta_a = np.empty(K + 1), np.empty(K + 1), np.empty(K)
    bx_a, bv_a, ba_a = np.empty(K + 1), np.empty(K + 1), np.empty(K)
    cdef double[::1] x = x_a, v = v_a, a = a_a
    cdef double[::1] tx = tx_a, tv = tv_a, ta = ta_a, bx = bx_a, bv = bv_a, ba = ba_a
    fits_a = np.zeros((K, 6))
    alpha_a = np.zeros(K)
    beta_a = np.zeros((K, 2))
    quad_a = np.zeros((K, 9))
    active_a = np.zeros(K, dtype=np.int8)
    clamped_a = np.zeros(K, dtype=np.int8)
    force_a = np.zeros(K, dtype=np.int8)
    log_a = np.zeros((max(max_iterations, 0), 6))
    cdef double[:, ::1] fits = fits_a, lg = log_a, beta = beta_a, quad = quad_a
    cdef double[::1] alpha = alpha_a
    cdef signed char[::1] active = active_a, clamped = clamped_a, force = force_a
    cdef Py_ssize_t k
    cdef double tol = 1e-9
    with nogil:
        for k in range(K + 1):
            if (x[k] > box[1] + tol or x[k] < box[0] - tol or v[k] > box[3] + tol
                    or v[k] < box[2] - tol or (k < K and (a[k] > box[5] + tol or a[k] < box[4] - tol))):
                feasible = False
        for it in range(max_iterations):
            _fits_into(x, v, pswitch, offsets, op, xe, ve, wh, energy_only, fits)
            have = False
            done = False
            # round 0: plain QP active sets; round 1 (only if no attempt was
            # accepted): bounds that clamped free stages are held active
            for rnd in range(2):
                if rnd == 0:
                    nproj = _backward_into(x, v, a, pswitch, fits, box, T, project,
                                           alpha, beta, quad, active, NULL)
                else:
                    nforce = 0
                    for k in range(K):
                        force[k] = clamped[k] if active[k] == 0 else 0
                        if force[k] != 0:
                            nforce += 1
                    if nforce == 0:
                        break
                    nproj = _backward_into(x, v, a, pswitch, fits, box, T, project,
                                           alpha, beta, quad, active, &force[0])
                eps = eps0
                for h in range(max_halvings + 1):
                    c = _forward_into(x, v, a, alpha, beta, eps, box, T, pswitch,
                                      xe, ve, wh, energy_only, tx, tv, ta, &nclamp, &ok, &step,
                                      &clamped[0])
                    # feasible rollouts rank first, then by cost
                    if not have or (ok and not b_ok) or (ok == b_ok and c < b_cost):
                        have = True
                        bx[:] = tx
                        bv[:] = tv
                        ba[:] = ta
                        b_cost, b_eps, b_step, b_clamp, b_ok = c, eps, step, nclamp, ok
                    if ok and (not feasible or c <= cost + cost_tol * fabs(cost)):
                        done = True
                        break
                    # a step already inside the convergence tolerance is not retried
                    if step < eps1:
                        done = True
                        break
                    eps *= 0.5
                if done:
                    break
            x[:] = bx
            v[:] = bv
            a[:] = ba
            cost, feasible = b_cost, b_ok
            lg[it, 0] = b_cost
            lg[it, 1] = b_eps
            lg[it, 2] = b_step
            lg[it, 3] = b_clamp
            lg[it, 4] = nproj
            lg[it, 5] = b_ok
            n_log = it + 1
            if b_step < eps1:
                converged = True
                break
    return (x_a, v_a, a_a, cost, log_a[:n_log], converged,
            (alpha_a, beta_a, quad_a, active_a, nproj))


cdef inline double _two_segment(double vs, double x0, double v0, double x1, double t1,
                                double xe, double ve, double wh, bint energy_only) noexcept nogil:
    cdef double s = x1 - x0 - 0.5 * (v0 + vs) * t1
    return (6.0 * s * s / (t1 * t1 * t1) + (vs - v0) * (vs - v0) / (2.0 * t1)
            + _escape_model(x1, vs, xe, ve, wh, energy_only))


def two_segment_search(double x0, double v0, double x1, double t1, double vmax,
                       double xe, double ve, double wh, bint energy_only):
    """Crossing speed at ``x1`` minimizing energy to ``(x1, vS)`` over ``t1``
    plus the escape cost from there: 33-node scan of ``[0, vmax]``, then
    bounded Brent refinement around the best node. Returns (vS, cost)."""
    cdef int n = 33, i, ibest = 0, golden
    cdef double h = vmax / (n - 1), f, fbest = INFINITY
    cdef double a, b, x, xf, fx, fu, nfc, fnfc, fulc, ffulc, xm, tol1, tol2
    cdef double r, q, pp, e = 0.0, rat = 0.0
    cdef double sqrt_eps = 1.4832396974191326e-08, gm = 0.3819660112501051
    cdef double xatol = 1e-10
    with nogil:
        for i in range(n):
            f = _two_segment(i * h, x0, v0, x1, t1, xe, ve, wh, energy_only)
            if f < fbest:
                fbest = f
                ibest = i
        a = _dmax(0.0, (ibest - 1) * h)
        b = _dmin(vmax, (ibest + 1) * h)
        # Brent's bounded minimizer (parabolic steps with golden fallback)
        xf = a + gm * (b - a)
        nfc = xf
        fulc = xf
        fx = _two_segment(xf, x0, v0, x1, t1, xe, ve, wh, energy_only)
        ffulc = fx
        fnfc = fx
        xm = 0.5 * (a + b)
        tol1 = sqrt_eps * fabs(xf) + xatol / 3.0
        tol2 = 2.0 * tol1
        for i in range(500):
            if fabs(xf - xm) <= tol2 - 0.5 * (b - a):
                break
            golden = 1
            if fabs(e) > tol1:
                golden = 0
                r = (xf - nfc) * (fx - ffulc)
                q = (xf - fulc) * (fx - fnfc)
                pp = (xf - fulc) * q - (xf - nfc) * r
                q = 2.0 * (q - r)
                if q > 0.0:
                    pp = -pp
                q = fabs(q)
                r = e
                e = rat
                if fabs(pp) < fabs(0.5 * q * r) and pp > q * (a - xf) and pp < q * (b - xf):
                    rat = pp / q
                    x = xf + rat
                    if x - a < tol2 or b - x < tol2:
                        rat = tol1 if xm - xf >= 0.0 else -tol1
                else:
                    golden = 1
            if golden:
                e = (a - xf) if xf >= xm else (b - xf)
                rat = gm * e
            x = xf + (_dmax(fabs(rat), tol1) if rat >= 0.0 else -_dmax(fabs(rat), tol1))
            fu = _two_segment(x, x0, v0, x1, t1, xe, ve, wh, energy_only)
            if fu <= fx:
                if x >= xf:
                    a = xf
                else:
                    b = xf
                fulc = nfc
                ffulc = fnfc
                nfc = xf
                fnfc = fx
                xf = x
                fx = fu
            else:
                if x < xf:
                    a = x
                else:
                    b = x
                if fu <= fnfc or nfc == xf:
                    fulc = nfc
                    ffulc = fnfc
                    nfc = x
                    fnfc = fu
                elif fu <= ffulc or fulc == xf or fulc == nfc:
                    fulc = x
                    ffulc = fu
            xm = 0.5 * (a + b)
            tol1 = sqrt_eps * fabs(xf) + xatol / 3.0
            tol2 = 2.0 * tol1
    if fx < fbest:
        return xf, fx
    return ibest * h, fbest


def track_speed(const double[::1] vt, double x0, double v0, double T, bounds, double delta):
    """Controls following the speed profile ``vt`` (one entry per step,
    ``vt[0]`` unused), clamped so the next state stays in ``bounds``; with
    ``delta > 0`` rounded onto multiples of ``delta``. Returns positions,
    speeds, controls and the first stage without an admissible control
    (-1 if none)."""
    cdef double xmin = bounds[0], xmax = bounds[1], vmin = bounds[2]
    cdef double vmax = bounds[3], amin = bounds[4], amax = bounds[5]
    cdef Py_ssize_t K = vt.shape[0] - 1, k
    xs_a = np.empty(K + 1)
    vs_a = np.empty(K + 1)
    as_a = np.empty(K)
    cdef double[::1] xs = xs_a, vs = vs_a, acc = as_a
    cdef double x = x0, v = v0, a, hi, lo
    cdef long fail = -1
    xs[0] = x
    vs[0] = v
    with nogil:
        for k in range(K):
            a = (vt[k + 1] - v) / T
            hi = _dmin(amax, _dmin((vmax - v) / T, 2.0 * (xmax - x - v * T) / (T * T)))
            lo = _dmax(amin, _dmax((vmin - v) / T, 2.0 * (xmin - x - v * T) / (T * T)))
            if delta > 0.0:
                hi = floor(hi / delta + 1e-9) * delta
                lo = ceil(lo / delta - 1e-9) * delta
                a = nearbyint(a / delta) * delta
            if lo > hi + 1e-12:
                fail = k
                break
            a = _dmin(_dmax(a, lo), hi)
            x = x + v * T + 0.5 * a * T * T
            v = v + a * T
            xs[k + 1] = x
            vs[k + 1] = v
            acc[k] = a
    return xs_a, vs_a, as_a, fail
