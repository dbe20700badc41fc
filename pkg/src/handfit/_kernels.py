"""Numba-compiled hot loops: hull closest-point queries and the impulse solver.

Everything here is deterministic: fixed iteration order, no fastmath, no
parallel scheduling.  Ties (equidistant faces or bodies) resolve to the lowest
index because comparisons are strict.
"""

import numpy as np
from numba import njit

INF = np.inf


@njit(cache=True)
def _face_distance(qx, qy, qz, slack, f, verts, normals, face_idx, face_cnt, vbase):
    """Distance from a query to one polygon face, with the closest point."""
    nx = normals[f, 0]
    ny = normals[f, 1]
    nz = normals[f, 2]
    # projection onto the face plane
    px = qx - slack * nx
    py = qy - slack * ny
    pz = qz - slack * nz
    cnt = face_cnt[f]
    on_face = True
    for k in range(cnt):
        ia = vbase + face_idx[f, k]
        kb = k + 1
        if kb == cnt:
            kb = 0
        ib = vbase + face_idx[f, kb]
        ex = verts[ib, 0] - verts[ia, 0]
        ey = verts[ib, 1] - verts[ia, 1]
        ez = verts[ib, 2] - verts[ia, 2]
        wx = px - verts[ia, 0]
        wy = py - verts[ia, 1]
        wz = pz - verts[ia, 2]
        # (edge x w) . n  < 0 means the projection is outside this edge
        cx = ey * wz - ez * wy
        cy = ez * wx - ex * wz
        cz = ex * wy - ey * wx
        if cx * nx + cy * ny + cz * nz < -1e-12:
            on_face = False
            break
    if on_face:
        return abs(slack), px, py, pz
    # closest point lies on the ring boundary
    best = 1e300
    bx = px
    by = py
    bz = pz
    for k in range(cnt):
        ia = vbase + face_idx[f, k]
        kb = k + 1
        if kb == cnt:
            kb = 0
        ib = vbase + face_idx[f, kb]
        ax = verts[ia, 0]
        ay = verts[ia, 1]
        az = verts[ia, 2]
        ex = verts[ib, 0] - ax
        ey = verts[ib, 1] - ay
        ez = verts[ib, 2] - az
        ee = ex * ex + ey * ey + ez * ez
        t = 0.0
        if ee > 0.0:
            t = ((qx - ax) * ex + (qy - ay) * ey + (qz - az) * ez) / ee
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
        sx = ax + t * ex
        sy = ay + t * ey
        sz = az + t * ez
        dx = qx - sx
        dy = qy - sy
        dz = qz - sz
        d2 = dx * dx + dy * dy + dz * dz
        if d2 < best:
            best = d2
            bx = sx
            by = sy
            bz = sz
    return np.sqrt(best), bx, by, bz


@njit(cache=True)
def _hull_closest(qx, qy, qz, verts, normals, offsets, face_idx, face_cnt,
                  f0, f1, vbase, facing_only):
    """Closest point on one hull (faces f0..f1, vertex base vbase).

    Returns ``(distance, face, px, py, pz, inside)``.  With ``facing_only``
    the search is restricted to faces whose planes face the origin (offset
    < 0); interior queries then report their distance to that visible subset
    instead of zero.
    """
    max_slack = -1e300
    max_face = -1
    for f in range(f0, f1):
        s = normals[f, 0] * qx + normals[f, 1] * qy + normals[f, 2] * qz - offsets[f]
        if s > max_slack:
            max_slack = s
            max_face = f
    inside = max_slack <= 0.0

    if not facing_only and inside:
        nx = normals[max_face, 0]
        ny = normals[max_face, 1]
        nz = normals[max_face, 2]
        return 0.0, max_face, qx - max_slack * nx, qy - max_slack * ny, qz - max_slack * nz, True

    any_candidate = False
    if facing_only:
        for f in range(f0, f1):
            if offsets[f] < 0.0:
                any_candidate = True
                break

    best = 1e300
    best_face = -1
    bx = qx
    by = qy
    bz = qz
    for f in range(f0, f1):
        s = normals[f, 0] * qx + normals[f, 1] * qy + normals[f, 2] * qz - offsets[f]
        if facing_only:
            if any_candidate and offsets[f] >= 0.0:
                continue
        elif s <= 0.0:
            continue
        d, px, py, pz = _face_distance(qx, qy, qz, s, f, verts, normals, face_idx, face_cnt, vbase)
        if d < best:
            best = d
            best_face = f
            bx = px
            by = py
            bz = pz
    return best, best_face, bx, by, bz, inside


@njit(cache=True)
def closest_points_on_hull(queries, verts, normals, offsets, face_idx, face_cnt, facing_only):
    """Batch closest-point query against a single hull."""
    nq = queries.shape[0]
    nf = normals.shape[0]
    out_p = np.empty((nq, 3))
    out_f = np.empty(nq, dtype=np.int64)
    out_d = np.empty(nq)
    out_in = np.empty(nq, dtype=np.uint8)
    for i in range(nq):
        d, fi, px, py, pz, inside = _hull_closest(
            queries[i, 0], queries[i, 1], queries[i, 2],
            verts, normals, offsets, face_idx, face_cnt, 0, nf, 0, facing_only,
        )
        out_d[i] = d
        out_f[i] = fi
        out_p[i, 0] = px
        out_p[i, 1] = py
        out_p[i, 2] = pz
        out_in[i] = 1 if inside else 0
    return out_p, out_f, out_d, out_in


@njit(cache=True)
def assign_points(queries, verts_all, normals_all, offsets_all, face_idx, face_cnt,
                  verts_start, faces_start, bound_center, bound_radius, facing_only):
    """Nearest body for each query across a packed multi-hull scene.

    Bodies are pruned with a bounding-sphere lower bound; ties go to the
    lowest body index.  Returns per query: body index, closest surface point,
    distance, global face index, interior flag.
    """
    nq = queries.shape[0]
    nb = bound_radius.shape[0]
    out_b = np.full(nq, -1, dtype=np.int64)
    out_p = np.zeros((nq, 3))
    out_d = np.full(nq, np.inf)
    out_f = np.full(nq, -1, dtype=np.int64)
    out_in = np.zeros(nq, dtype=np.uint8)
    lbs = np.empty(nb)
    order = np.empty(nb, dtype=np.int64)
    for i in range(nq):
        qx = queries[i, 0]
        qy = queries[i, 1]
        qz = queries[i, 2]
        # visit bodies by ascending distance lower bound (sphere test, index
        # breaks ties) so the running best tightens early; once a bound
        # exceeds the best exact distance no later body can win or tie, and
        # equal exact distances still resolve to the lowest body index
        for b in range(nb):
            dx = qx - bound_center[b, 0]
            dy = qy - bound_center[b, 1]
            dz = qz - bound_center[b, 2]
            lbs[b] = np.sqrt(dx * dx + dy * dy + dz * dz) - bound_radius[b]
            order[b] = b
        for s in range(1, nb):
            cur = order[s]
            key = lbs[cur]
            t = s - 1
            while t >= 0 and (lbs[order[t]] > key or
                              (lbs[order[t]] == key and order[t] > cur)):
                order[t + 1] = order[t]
                t -= 1
            order[t + 1] = cur
        best = 1e300
        for s in range(nb):
            b = order[s]
            if lbs[b] > best:
                break
            d, fi, px, py, pz, inside = _hull_closest(
                qx, qy, qz, verts_all, normals_all, offsets_all, face_idx, face_cnt,
                faces_start[b], faces_start[b + 1], verts_start[b], facing_only,
            )
            if d < best or (d == best and (out_b[i] == -1 or b < out_b[i])):
                best = d
                out_b[i] = b
                out_d[i] = d
                out_f[i] = fi
                out_p[i, 0] = px
                out_p[i, 1] = py
                out_p[i, 2] = pz
                out_in[i] = 1 if inside else 0
    return out_b, out_p, out_d, out_f, out_in


@njit(cache=True)
def collide_pairs(pair_a, pair_b, verts_all, normals_all, offsets_all,
                  verts_start, faces_start, bound_center, bound_radius, margin):
    """Vertex-in-hull contact detection for candidate body pairs.

    For each pair, in both directions: every vertex of body a whose deepest
    face slack inside body b is below ``margin`` marks that face; each marked
    face emits one (a, global_face_of_b) entry.  Pairs are pruned with a
    bounding-sphere test first.  Output order is: pairs in input order, the
    (a in b) direction before (b in a), faces ascending, matching the python
    reference implementation row for row.
    """
    npairs = pair_a.shape[0]
    nb = bound_radius.shape[0]
    maxf = 0
    for b in range(nb):
        c = faces_start[b + 1] - faces_start[b]
        if c > maxf:
            maxf = c
    out_body = np.empty(2 * npairs * maxf, dtype=np.int64)
    out_face = np.empty(2 * npairs * maxf, dtype=np.int64)
    flags = np.zeros(maxf, dtype=np.uint8)
    m = 0
    for p in range(npairs):
        i = pair_a[p]
        j = pair_b[p]
        dx = bound_center[i, 0] - bound_center[j, 0]
        dy = bound_center[i, 1] - bound_center[j, 1]
        dz = bound_center[i, 2] - bound_center[j, 2]
        gap = np.sqrt(dx * dx + dy * dy + dz * dz)
        if gap > bound_radius[i] + bound_radius[j] + margin:
            continue
        for side in range(2):
            if side == 0:
                a = i
                b = j
            else:
                a = j
                b = i
            f0 = faces_start[b]
            f1 = faces_start[b + 1]
            nf = f1 - f0
            for k in range(nf):
                flags[k] = 0
            any_hit = False
            for vi in range(verts_start[a], verts_start[a + 1]):
                vx = verts_all[vi, 0]
                vy = verts_all[vi, 1]
                vz = verts_all[vi, 2]
                best = -1e300
                bf = -1
                for f in range(f0, f1):
                    s = (normals_all[f, 0] * vx + normals_all[f, 1] * vy
                         + normals_all[f, 2] * vz - offsets_all[f])
                    if s > best:
                        best = s
                        bf = f
                if best < margin:
                    flags[bf - f0] = 1
                    any_hit = True
            if any_hit:
                for k in range(nf):
                    if flags[k] == 1:
                        out_body[m] = a
                        out_face[m] = f0 + k
                        m += 1
    return out_body[:m], out_face[:m]


@njit(cache=True)
def solve_rows(vel, omega, inv_mass, inv_inertia, body_a, body_b, jac, bias,
               lo, hi, lam, n_iter):
    """Projected Gauss-Seidel sweep over scalar constraint rows.

    ``jac`` rows hold ``[Ja_lin, Ja_ang, Jb_lin, Jb_ang]``; body index -1
    means the static world.  ``lam`` must be zero on entry and accumulates the
    clamped impulse per row.  ``vel``/``omega``/``lam`` are updated in place.
    """
    nr = body_a.shape[0]
    la = np.zeros((nr, 3))
    ta = np.zeros((nr, 3))
    lb = np.zeros((nr, 3))
    tb = np.zeros((nr, 3))
    inv_eff = np.zeros(nr)
    for r in range(nr):
        k = 0.0
        a = body_a[r]
        if a >= 0:
            im = inv_mass[a]
            for c in range(3):
                la[r, c] = im * jac[r, c]
                k += jac[r, c] * la[r, c]
            for c in range(3):
                t = 0.0
                for cc in range(3):
                    t += inv_inertia[a, c, cc] * jac[r, 3 + cc]
                ta[r, c] = t
            for c in range(3):
                k += jac[r, 3 + c] * ta[r, c]
        b = body_b[r]
        if b >= 0:
            im = inv_mass[b]
            for c in range(3):
                lb[r, c] = im * jac[r, 6 + c]
                k += jac[r, 6 + c] * lb[r, c]
            for c in range(3):
                t = 0.0
                for cc in range(3):
                    t += inv_inertia[b, c, cc] * jac[r, 9 + cc]
                tb[r, c] = t
            for c in range(3):
                k += jac[r, 9 + c] * tb[r, c]
        if k > 1e-12:
            inv_eff[r] = 1.0 / k

    for _ in range(n_iter):
        for r in range(nr):
            if inv_eff[r] == 0.0:
                continue
            cdot = bias[r]
            a = body_a[r]
            if a >= 0:
                cdot += (jac[r, 0] * vel[a, 0] + jac[r, 1] * vel[a, 1]
                         + jac[r, 2] * vel[a, 2] + jac[r, 3] * omega[a, 0]
                         + jac[r, 4] * omega[a, 1] + jac[r, 5] * omega[a, 2])
            b = body_b[r]
            if b >= 0:
                cdot += (jac[r, 6] * vel[b, 0] + jac[r, 7] * vel[b, 1]
                         + jac[r, 8] * vel[b, 2] + jac[r, 9] * omega[b, 0]
                         + jac[r, 10] * omega[b, 1] + jac[r, 11] * omega[b, 2])
            nl = lam[r] - cdot * inv_eff[r]
            if nl < lo[r]:
                nl = lo[r]
            elif nl > hi[r]:
                nl = hi[r]
            dl = nl - lam[r]
            lam[r] = nl
            if a >= 0:
                vel[a, 0] += la[r, 0] * dl
                vel[a, 1] += la[r, 1] * dl
                vel[a, 2] += la[r, 2] * dl
                omega[a, 0] += ta[r, 0] * dl
                omega[a, 1] += ta[r, 1] * dl
                omega[a, 2] += ta[r, 2] * dl
            if b >= 0:
                vel[b, 0] += lb[r, 0] * dl
                vel[b, 1] += lb[r, 1] * dl
                vel[b, 2] += lb[r, 2] * dl
                omega[b, 0] += tb[r, 0] * dl
                omega[b, 1] += tb[r, 1] * dl
                omega[b, 2] += tb[r, 2] * dl


@njit(cache=True)
def ball_rows(qa, ta, qb, tb, ca, cb, anchor_a, anchor_b, beta, dt):
    """Jacobian rows and bias for ball joints, three rows per joint.

    Row r = 3j + k constrains axis k of joint j: identity linear blocks and
    lever-arm cross matrices about each body's mass center, bias pulling the
    anchor gap closed at the stabilization rate.
    """
    n = qa.shape[0]
    jac = np.zeros((3 * n, 12))
    bias = np.empty(3 * n)
    sc = beta / dt
    for j in range(n):
        w = qa[j, 0]
        x = qa[j, 1]
        y = qa[j, 2]
        z = qa[j, 3]
        vx = anchor_a[j, 0]
        vy = anchor_a[j, 1]
        vz = anchor_a[j, 2]
        tx = 2.0 * (y * vz - z * vy)
        ty = 2.0 * (z * vx - x * vz)
        tz = 2.0 * (x * vy - y * vx)
        pax = vx + w * tx + (y * tz - z * ty) + ta[j, 0]
        pay = vy + w * ty + (z * tx - x * tz) + ta[j, 1]
        paz = vz + w * tz + (x * ty - y * tx) + ta[j, 2]
        w = qb[j, 0]
        x = qb[j, 1]
        y = qb[j, 2]
        z = qb[j, 3]
        vx = anchor_b[j, 0]
        vy = anchor_b[j, 1]
        vz = anchor_b[j, 2]
        tx = 2.0 * (y * vz - z * vy)
        ty = 2.0 * (z * vx - x * vz)
        tz = 2.0 * (x * vy - y * vx)
        pcx = vx + w * tx + (y * tz - z * ty) + tb[j, 0]
        pcy = vy + w * ty + (z * tx - x * tz) + tb[j, 1]
        pcz = vz + w * tz + (x * ty - y * tx) + tb[j, 2]
        rax = pax - ca[j, 0]
        ray = pay - ca[j, 1]
        raz = paz - ca[j, 2]
        rcx = pcx - cb[j, 0]
        rcy = pcy - cb[j, 1]
        rcz = pcz - cb[j, 2]
        r = 3 * j
        jac[r, 0] = -1.0
        jac[r + 1, 1] = -1.0
        jac[r + 2, 2] = -1.0
        jac[r, 4] = -raz
        jac[r, 5] = ray
        jac[r + 1, 3] = raz
        jac[r + 1, 5] = -rax
        jac[r + 2, 3] = -ray
        jac[r + 2, 4] = rax
        jac[r, 6] = 1.0
        jac[r + 1, 7] = 1.0
        jac[r + 2, 8] = 1.0
        jac[r, 10] = rcz
        jac[r, 11] = -rcy
        jac[r + 1, 9] = -rcz
        jac[r + 1, 11] = rcx
        jac[r + 2, 9] = rcy
        jac[r + 2, 10] = -rcx
        bias[r] = sc * (pcx - pax)
        bias[r + 1] = sc * (pcy - pay)
        bias[r + 2] = sc * (pcz - paz)
    return jac, bias


@njit(cache=True)
def limit_rows(ia, ib, qp, qc, wp, wc, lim, locked, beta, dt):
    """Angular-limit rows: one-sided hi rows, then lo rows, then locked axes.

    ``qp``/``qc`` carry the joint frame in world coordinates for parent and
    child.  Activation is predictive: a row fires when the angle is past its
    bound now or would be after ``dt`` at the current rate.  Locked axes
    (zero-width bounds) get a two-sided equality row.  Returns the populated
    prefixes of fixed-capacity output arrays.
    """
    n = ia.shape[0]
    angles = np.empty((n, 3))
    axes = np.empty((n, 3, 3))
    pred = np.empty((n, 3))
    for j in range(n):
        # joint rotation in the parent frame, canonicalized to the short way
        aw = qp[j, 0]
        ax = -qp[j, 1]
        ay = -qp[j, 2]
        az = -qp[j, 3]
        bw = qc[j, 0]
        bx = qc[j, 1]
        by = qc[j, 2]
        bz = qc[j, 3]
        w = aw * bw - ax * bx - ay * by - az * bz
        x = aw * bx + ax * bw + ay * bz - az * by
        y = aw * by - ax * bz + ay * bw + az * bx
        z = aw * bz + ax * by - ay * bx + az * bw
        if w < 0.0:
            w = -w
            x = -x
            y = -y
            z = -z
        # twist about local y, then the residual swing
        tn = np.sqrt(w * w + y * y)
        if tn < 1e-12:
            tww = 1.0
            twy = 0.0
        else:
            tww = w / tn
            twy = y / tn
        twist = 2.0 * np.arctan2(twy, tww)
        sww = w * tww + y * twy
        swx = x * tww + z * twy
        swy = y * tww - w * twy
        swz = z * tww - x * twy
        if sww < 0.0:
            sww = -sww
            swx = -swx
            swy = -swy
            swz = -swz
        s = np.sqrt(swx * swx + swy * swy + swz * swz)
        if s < 1e-8:
            kk = 2.0 / (1.0 if sww == 0.0 else sww)
        else:
            kk = (2.0 * np.arctan2(s, sww)) / s
        angles[j, 0] = swx * kk
        angles[j, 1] = swz * kk
        angles[j, 2] = twist
        # world axes: parent frame x and z, child frame y
        w = qp[j, 0]
        x = qp[j, 1]
        y = qp[j, 2]
        z = qp[j, 3]
        axes[j, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
        axes[j, 0, 1] = 2.0 * (x * y + w * z)
        axes[j, 0, 2] = 2.0 * (x * z - w * y)
        axes[j, 1, 0] = 2.0 * (x * z + w * y)
        axes[j, 1, 1] = 2.0 * (y * z - w * x)
        axes[j, 1, 2] = 1.0 - 2.0 * (x * x + y * y)
        w = qc[j, 0]
        x = qc[j, 1]
        y = qc[j, 2]
        z = qc[j, 3]
        axes[j, 2, 0] = 2.0 * (x * y - w * z)
        axes[j, 2, 1] = 1.0 - 2.0 * (x * x + z * z)
        axes[j, 2, 2] = 2.0 * (y * z + w * x)
        dwx = wc[j, 0] - wp[j, 0]
        dwy = wc[j, 1] - wp[j, 1]
        dwz = wc[j, 2] - wp[j, 2]
        for k in range(3):
            rate = axes[j, k, 0] * dwx + axes[j, k, 1] * dwy + axes[j, k, 2] * dwz
            pred[j, k] = angles[j, k] + rate * dt
    cap = 6 * n
    ia_o = np.empty(cap, dtype=np.int64)
    ib_o = np.empty(cap, dtype=np.int64)
    jac = np.zeros((cap, 12))
    bias = np.empty(cap)
    lo_o = np.empty(cap)
    hi_o = np.empty(cap)
    m = 0
    for j in range(n):
        for k in range(3):
            if locked[j, k]:
                continue
            if pred[j, k] > lim[j, k, 1] or angles[j, k] > lim[j, k, 1]:
                for c in range(3):
                    jac[m, 3 + c] = axes[j, k, c]
                    jac[m, 9 + c] = -axes[j, k, c]
                c2 = lim[j, k, 1] - angles[j, k]
                # inside: allow approach up to the limit in one step;
                # violated: recover at the stabilization rate only
                bias[m] = c2 / dt * beta if c2 < 0.0 else c2 / dt
                lo_o[m] = 0.0
                hi_o[m] = INF
                ia_o[m] = ia[j]
                ib_o[m] = ib[j]
                m += 1
    for j in range(n):
        for k in range(3):
            if locked[j, k]:
                continue
            if pred[j, k] < lim[j, k, 0] or angles[j, k] < lim[j, k, 0]:
                for c in range(3):
                    jac[m, 3 + c] = -axes[j, k, c]
                    jac[m, 9 + c] = axes[j, k, c]
                c2 = -(lim[j, k, 0] - angles[j, k])
                bias[m] = c2 / dt * beta if c2 < 0.0 else c2 / dt
                lo_o[m] = 0.0
                hi_o[m] = INF
                ia_o[m] = ia[j]
                ib_o[m] = ib[j]
                m += 1
    for j in range(n):
        for k in range(3):
            if not locked[j, k]:
                continue
            for c in range(3):
                jac[m, 3 + c] = axes[j, k, c]
                jac[m, 9 + c] = -axes[j, k, c]
            bias[m] = beta * (lim[j, k, 0] - angles[j, k]) / dt
            lo_o[m] = -INF
            hi_o[m] = INF
            ia_o[m] = ia[j]
            ib_o[m] = ib[j]
            m += 1
    return ia_o[:m], ib_o[:m], jac[:m], bias[:m], lo_o[:m], hi_o[:m]


@njit(cache=True)
def project_balls(t, ra, rc, ia, ib, movable, changed):
    """Tree-ordered translational gap closure for ball joints.

    ``t`` holds per-body translations and is updated in place; ``ra``/``rc``
    are the world-rotated parent/child anchors.  Joints run in list order, so
    later ones see earlier corrections.  ``changed`` marks moved bodies.
    """
    for j in range(ia.shape[0]):
        a = ia[j]
        b = ib[j]
        ex = (ra[j, 0] + t[a, 0]) - (rc[j, 0] + t[b, 0])
        ey = (ra[j, 1] + t[a, 1]) - (rc[j, 1] + t[b, 1])
        ez = (ra[j, 2] + t[a, 2]) - (rc[j, 2] + t[b, 2])
        if ex * ex + ey * ey + ez * ez == 0.0:
            continue
        if movable[b]:
            t[b, 0] += ex
            t[b, 1] += ey
            t[b, 2] += ez
            changed[b] = True
        elif movable[a]:
            t[a, 0] -= ex
            t[a, 1] -= ey
            t[a, 2] -= ez
            changed[a] = True


@njit(cache=True)
def two_means(pts):
    """Two-cluster Lloyd iterations seeded at the extreme-x points.

    Returns the membership mask (True = cluster 1) and the two centroids.
    Equal distances keep a point in cluster 0; iteration stops when the
    membership repeats or after 20 rounds.  An emptied cluster keeps its
    previous centroid.
    """
    n = pts.shape[0]
    lo = 0
    hi = 0
    for i in range(1, n):
        if pts[i, 0] < pts[lo, 0]:
            lo = i
        if pts[i, 0] > pts[hi, 0]:
            hi = i
    c = np.empty((2, 3))
    for k in range(3):
        c[0, k] = pts[lo, k]
        c[1, k] = pts[hi, k]
    member = np.zeros(n, dtype=np.bool_)
    for it in range(20):
        changed = it == 0
        n1 = 0
        for i in range(n):
            dx0 = pts[i, 0] - c[0, 0]
            dy0 = pts[i, 1] - c[0, 1]
            dz0 = pts[i, 2] - c[0, 2]
            dx1 = pts[i, 0] - c[1, 0]
            dy1 = pts[i, 1] - c[1, 1]
            dz1 = pts[i, 2] - c[1, 2]
            m = (dx1 * dx1 + dy1 * dy1 + dz1 * dz1
                 < dx0 * dx0 + dy0 * dy0 + dz0 * dz0)
            if m != member[i]:
                changed = True
            member[i] = m
            if m:
                n1 += 1
        if not changed:
            break
        s0x = s0y = s0z = 0.0
        s1x = s1y = s1z = 0.0
        for i in range(n):
            if member[i]:
                s1x += pts[i, 0]
                s1y += pts[i, 1]
                s1z += pts[i, 2]
            else:
                s0x += pts[i, 0]
                s0y += pts[i, 1]
                s0z += pts[i, 2]
        if n1 < n:
            c[0, 0] = s0x / (n - n1)
            c[0, 1] = s0y / (n - n1)
            c[0, 2] = s0z / (n - n1)
        if n1 > 0:
            c[1, 0] = s1x / n1
            c[1, 1] = s1y / n1
            c[1, 2] = s1z / n1
    return member, c
