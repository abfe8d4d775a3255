"""Pure numpy/Python versions of the compiled kernels in ``_core.pyx``.

The escape cost here takes the stationary points of the free-horizon
objective from the eigenvalues of the quartic's companion matrix, which is a
different route from the bracketed Newton solve of the compiled kernel.
"""

import math

import numpy as np

NO_CONTROL = -32768


def _objective(t, w, D, m, dv):
    s = D - m * t
    return w * t + 6.0 * s * s / (t * t * t) + dv * dv / (2.0 * t)


def escape_batch(x, v, xe, ve, w):
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    shape = np.broadcast(x, v).shape
    x = np.broadcast_to(x, shape).ravel()
    v = np.broadcast_to(v, shape).ravel()
    D = xe - x
    m = 0.5 * (v + ve)
    dv = ve - v
    b = 6.0 * m * m + 0.5 * dv * dv
    c = 24.0 * D * m
    d = 18.0 * D * D
    n = x.size
    # companion matrix of t^4 - (b/w) t^2 + (c/w) t - d/w
    comp = np.zeros((n, 4, 4))
    comp[:, 1, 0] = 1.0
    comp[:, 2, 1] = 1.0
    comp[:, 3, 2] = 1.0
    comp[:, 0, 3] = d / w
    comp[:, 1, 3] = -c / w
    comp[:, 2, 3] = b / w
    roots = np.linalg.eigvals(comp) if n else np.zeros((0, 4), dtype=complex)
    real = roots.real
    ok = (np.abs(roots.imag) <= 1e-7 * (1.0 + np.abs(real))) & (real > 0.0)
    t = np.where(ok, real, 1.0)
    # one Newton polish step on the quartic
    q = t**4 - (b / w)[:, None] * t**2 + (c / w)[:, None] * t - (d / w)[:, None]
    dq = 4.0 * t**3 - 2.0 * (b / w)[:, None] * t + (c / w)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        tp = np.where(dq != 0.0, t - q / dq, t)
    t = np.where(ok & (tp > 0.0), tp, t)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = _objective(t, w, D[:, None], m[:, None], dv[:, None])
    f = np.where(ok, f, np.inf)
    idx = np.argmin(f, axis=1)
    cost = f[np.arange(n), idx]
    te = t[np.arange(n), idx]
    trivial = np.maximum(np.maximum(b, np.abs(c)), d) <= 1e-14 * w
    cost = np.where(trivial, 0.0, cost)
    te = np.where(trivial, 0.0, te)
    return cost.reshape(shape), te.reshape(shape)


def escape_scalar(x, v, xe, ve, w):
    cost, te = escape_batch(np.array([x]), np.array([v]), xe, ve, w)
    return float(cost[0]), float(te[0])


def control_order(ia_lo, ia_hi):
    """Control indices by increasing magnitude, positive before negative."""
    order = []
    for step in range(0, max(ia_hi, -ia_lo) + 1):
        if ia_lo <= step <= ia_hi:
            order.append(step)
        if step > 0 and ia_lo <= -step <= ia_hi:
            order.append(-step)
    return order


def stage_sweep(v_next, j_next, ox_next, ov_next, ox, ov, v_out, r_out,
                ia_lo, ia_hi, p, delta):
    nx, nv = v_out.shape
    nxn, nvn = v_next.shape
    ix = ox + np.arange(nx)[:, None]
    iv = ov + np.arange(nv)[None, :]
    base_x = ix + 2 * iv - ox_next
    base_v = np.broadcast_to(iv - ov_next, (nx, nv))
    best = np.full((nx, nv), np.inf)
    arg = np.full((nx, nv), NO_CONTROL, dtype=np.int16)
    for m in control_order(ia_lo, ia_hi):
        jx = base_x + m
        jv = base_v + m
        ok = (jx >= 0) & (jx < nxn) & (jv >= 0) & (jv < nvn)
        if not ok.any():
            continue
        jxc = np.clip(jx, 0, nxn - 1)
        jvc = np.clip(jv, 0, nvn - 1)
        a = m * delta
        phi = np.full((nx, nv), 0.5 * a * a)
        if p < 1.0:
            vn = v_next[jxc, jvc]
            ok &= vn != np.inf
            phi = phi + (1.0 - p) * np.where(ok, vn, 0.0)
        if p > 0.0:
            phi = phi + p * j_next[jxc, jvc]
        better = ok & (phi < best - 1e-12)
        best = np.where(better, phi, best)
        arg = np.where(better, np.int16(m), arg)
    v_out[...] = best
    r_out[...] = arg


def _psd_project(e11, e12, e22):
    tr = e11 + e22
    det = e11 * e22 - e12 * e12
    disc = math.sqrt(max(0.25 * tr * tr - det, 0.0))
    l1 = 0.5 * tr + disc
    l2 = 0.5 * tr - disc
    if l2 >= 0.0:
        return e11, e12, e22, False
    if l1 <= 0.0:
        return 0.0, 0.0, 0.0, True
    if abs(e12) > 0.0:
        c, s = l1 - e22, e12
    elif e11 >= e22:
        c, s = 1.0, 0.0
    else:
        c, s = 0.0, 1.0
    nrm = c * c + s * s
    return l1 * c * c / nrm, l1 * c * s / nrm, l1 * s * s / nrm, True


def ddp_backward(xs, vs, accels, pswitch, fits, bounds, T, project=True, force=None):
    # force: optional bound code per stage, held active where the QP is free
    xmin, xmax, vmin, vmax, amin, amax = bounds
    K = len(accels)
    alpha = np.zeros(K)
    beta = np.zeros((K, 2))
    quad = np.zeros((K, 9))
    active = np.zeros(K, dtype=np.int8)
    s11 = s12 = s22 = g1 = g2 = 0.0
    G1, G2 = 0.5 * T * T, T
    nproj = 0
    for k in range(K - 1, -1, -1):
        p = float(pswitch[k])
        p1, p2, p3, p4, p5, _ = (float(c) for c in fits[k])
        e11, e12, e22 = 2.0 * p1, p3, 2.0 * p2
        if project and p > 0.0:
            e11, e12, e22, projected = _psd_project(e11, e12, e22)
            nproj += projected
        h11 = p * e11 + (1.0 - p) * s11
        h12 = p * e12 + (1.0 - p) * s12
        h22 = p * e22 + (1.0 - p) * s22
        n1 = p * p4 + (1.0 - p) * g1
        n2 = p * p5 + (1.0 - p) * g2
        A11 = h11
        A12 = h11 * T + h12
        A22 = h11 * T * T + 2.0 * h12 * T + h22
        u1 = h11 * G1 + h12 * G2
        u2 = h12 * G1 + h22 * G2
        B1, B2 = u1, T * u1 + u2
        C = 1.0 + G1 * u1 + G2 * u2
        if C <= 1e-8:
            C = 1e-8
            nproj += 1
        D = float(accels[k]) + G1 * n1 + G2 * n2
        E1, E2 = n1, T * n1 + n2
        quad[k] = (A11, A12, A22, B1, B2, C, D, E1, E2)
        X1, V1 = float(xs[k + 1]), float(vs[k + 1])
        ups = (2.0 * (xmax - X1) / (T * T), (vmax - V1) / T, amax - float(accels[k]))
        los = (2.0 * (xmin - X1) / (T * T), (vmin - V1) / T, amin - float(accels[k]))
        iu = min(range(3), key=lambda i: (ups[i], i))
        il = max(range(3), key=lambda i: (los[i], -i))
        da = -D / C
        if da > ups[iu]:
            al, code = ups[iu], iu + 1
        elif da < los[il]:
            al, code = los[il], -(il + 1)
        else:
            al, code = da, 0
        if code == 0 and force is not None and force[k] != 0:
            code = int(force[k])
            al = ups[code - 1] if code > 0 else los[-code - 1]
        if code == 0:
            b1, b2 = -B1 / C, -B2 / C
        elif abs(code) == 1:
            b1, b2 = -2.0 / (T * T), -2.0 / T
        elif abs(code) == 2:
            b1, b2 = 0.0, -1.0 / T
        else:
            b1, b2 = 0.0, 0.0
        alpha[k] = al
        beta[k] = (b1, b2)
        active[k] = code
        s11 = A11 + 2.0 * B1 * b1 + C * b1 * b1
        s12 = A12 + B1 * b2 + B2 * b1 + C * b1 * b2
        s22 = A22 + 2.0 * B2 * b2 + C * b2 * b2
        g1 = E1 + B1 * al + b1 * (C * al + D)
        g2 = E2 + B2 * al + b2 * (C * al + D)
    return alpha, beta, quad, active, nproj


def ddp_forward(xs, vs, accels, alpha, beta, eps, bounds, T, pswitch, xe, ve, wh, energy_only):
    return _rollout(xs, vs, accels, alpha, beta, eps, bounds, T, pswitch, xe, ve, wh,
                    energy_only)[:7]


def _rollout(xs, vs, accels, alpha, beta, eps, bounds, T, pswitch, xe, ve, wh, energy_only):
    xmin, xmax, vmin, vmax, amin, amax = bounds
    K = len(accels)
    nx = np.empty(K + 1)
    nv = np.empty(K + 1)
    na = np.empty(K)
    clamped = np.zeros(K, dtype=np.int8)
    x, v = float(xs[0]), float(vs[0])
    nx[0], nv[0] = x, v
    nclamp = 0
    feasible = True
    tol = 1e-9
    for k in range(K):
        a = accels[k] + eps * (alpha[k] + beta[k, 0] * (x - xs[k]) + beta[k, 1] * (v - vs[k]))
        ups = (2.0 * (xmax - x - v * T) / (T * T), (vmax - v) / T, amax)
        los = (2.0 * (xmin - x - v * T) / (T * T), (vmin - v) / T, amin)
        iu = min(range(3), key=lambda i: (ups[i], i))
        il = max(range(3), key=lambda i: (los[i], -i))
        if a > ups[iu]:
            a = ups[iu]
            clamped[k] = iu + 1
            nclamp += 1
        elif a < los[il]:
            a = los[il]
            clamped[k] = -(il + 1)
            nclamp += 1
        x = x + v * T + 0.5 * a * T * T
        v = v + a * T
        if x > xmax + tol or x < xmin - tol or v > vmax + tol or v < vmin - tol \
                or a > amax + tol or a < amin - tol:
            feasible = False
        na[k] = a
        nx[k + 1] = x
        nv[k + 1] = v
    cost = expected_cost(nx, nv, na, pswitch, xe, ve, wh, energy_only)
    step = math.sqrt(float(np.dot(na - accels, na - accels)))
    return nx, nv, na, nclamp, feasible, cost, step, clamped


def _escape_model(x, v, xe, ve, wh, energy_only):
    f, te = escape_batch(x, v, xe, ve, wh)
    return f - wh * te if energy_only else f


def escape_fits(xs, vs, pswitch, offsets, op, xe, ve, wh, energy_only):
    p = np.asarray(pswitch)
    offsets = np.asarray(offsets)
    out = np.zeros((len(p), 6))
    idx = np.nonzero(p > 0)[0]
    X = np.asarray(xs)[idx + 1][:, None] + offsets[:, 0]
    V = np.asarray(vs)[idx + 1][:, None] + offsets[:, 1]
    out[idx] = _escape_model(X, V, xe, ve, wh, energy_only) @ np.asarray(op).T
    return out


def expected_cost(xs, vs, accels, pswitch, xe, ve, wh, energy_only):
    p = np.asarray(pswitch)
    a = np.asarray(accels)
    surv = np.concatenate(([1.0], np.cumprod(1.0 - p)[:-1]))
    J = np.zeros(len(p))
    idx = np.nonzero(p > 0)[0]
    J[idx] = _escape_model(np.asarray(xs)[idx + 1], np.asarray(vs)[idx + 1], xe, ve, wh, energy_only)
    return float(np.sum(surv * (0.5 * a * a + p * J)))


def two_segment_search(x0, v0, x1, t1, vmax, xe, ve, wh, energy_only):
    from scipy.optimize import minimize_scalar

    def f(vs):
        vs = np.asarray(vs, dtype=float)
        s = x1 - x0 - 0.5 * (v0 + vs) * t1
        e = 6.0 * s * s / t1**3 + (vs - v0) ** 2 / (2.0 * t1)
        return e + _escape_model(np.full_like(vs, x1), vs, xe, ve, wh, energy_only)

    grid = np.linspace(0.0, vmax, 33)
    vals = f(grid)
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(lambda z: float(f(np.array([z]))[0]), bounds=(lo, hi),
                          method="bounded", options={"xatol": 1e-10})
    if res.fun < vals[i]:
        return float(res.x), float(res.fun)
    return float(grid[i]), float(vals[i])


def track_speed(vt, x0, v0, T, bounds, delta):
    xmin, xmax, vmin, vmax, amin, amax = bounds
    K = len(vt) - 1
    xs = np.empty(K + 1)
    vs = np.empty(K + 1)
    acc = np.empty(K)
    x, v = float(x0), float(v0)
    xs[0], vs[0] = x, v
    for k in range(K):
        a = (vt[k + 1] - v) / T
        hi = min(amax, (vmax - v) / T, 2.0 * (xmax - x - v * T) / (T * T))
        lo = max(amin, (vmin - v) / T, 2.0 * (xmin - x - v * T) / (T * T))
        if delta > 0:
            hi = math.floor(hi / delta + 1e-9) * delta
            lo = math.ceil(lo / delta - 1e-9) * delta
            a = round(a / delta) * delta
        if lo > hi + 1e-12:
            return xs, vs, acc, k
        a = min(max(a, lo), hi)
        x, v = x + v * T + 0.5 * a * T * T, v + a * T
        xs[k + 1], vs[k + 1], acc[k] = x, v, a
    return xs, vs, acc, -1


def ddp_solve(x0, v0, a0, cost0, pswitch, offsets, op, bounds, T, xe, ve, wh,
              energy_only, eps0, eps1, max_iterations, max_halvings, project, cost_tol):
    x, v, a = np.array(x0, dtype=float), np.array(v0, dtype=float), np.array(a0, dtype=float)
    xmin, xmax, vmin, vmax, amin, amax = bounds
    tol = 1e-9
    cost = float(cost0)
    feasible = bool(np.all((x >= xmin - tol) & (x <= xmax + tol) & (v >= vmin - tol) & (v <= vmax + tol))
                    and np.all((a >= amin - tol) & (a <= amax + tol)))
    esc = (xe, ve, wh, energy_only)
    log = []
    converged = False
    gains = None
    for _ in range(max_iterations):
        fits = escape_fits(x, v, pswitch, offsets, op, *esc)
        best = None
        force = None
        # round 0: plain QP active sets; round 1 (only if no attempt was
        # accepted): bounds that clamped free stages are held active
        for _ in range(2):
            gains = ddp_backward(x, v, a, pswitch, fits, bounds, T, project, force)
            eps = eps0
            done = False
            for _ in range(max_halvings + 1):
                nx, nv, na, nclamp, ok, c, step, clamped = _rollout(
                    x, v, a, gains[0], gains[1], eps, bounds, T, pswitch, *esc)
                # feasible rollouts rank first, then by cost
                if best is None or (not ok, c) < (not best[4], best[3]):
                    best = (nx, nv, na, c, ok, eps, step, nclamp)
                if ok and (not feasible or c <= cost + cost_tol * abs(cost)):
                    done = True
                    break
                if step < eps1:
                    done = True
                    break
                eps *= 0.5
            if done or force is not None:
                break
            force = np.where(gains[3] == 0, clamped, 0).astype(np.int8)
            if not force.any():
                break
        x, v, a, cost, feasible, eps, step, nclamp = best
        log.append((cost, eps, step, nclamp, gains[4], float(feasible)))
        if step < eps1:
            converged = True
            break
    if gains is None:
        K = len(a)
        gains = (np.zeros(K), np.zeros((K, 2)), np.zeros((K, 9)), np.zeros(K, dtype=np.int8), 0)
    return x, v, a, cost, np.array(log, dtype=float).reshape(-1, 6), converged, gains
