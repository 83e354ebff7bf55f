"""Jitted inner loops for the per-episode hot path.

Everything here is a pure array-in/array-out kernel with fixed iteration
order (fastmath off), so results are deterministic and IEEE-faithful; the
surrounding diffcore ops define the semantics and the tests verify the
gradients against finite differences.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, fastmath=False)
def ln_fwd(x, gain, bias):
    n, d = x.shape
    out = np.empty((n, d))
    xhat = np.empty((n, d))
    inv = np.empty(n)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        iv = 1.0 / np.sqrt(var + 1e-5)
        inv[i] = iv
        for j in range(d):
            xh = (x[i, j] - mu) * iv
            xhat[i, j] = xh
            out[i, j] = xh * gain[j] + bias[j]
    return out, xhat, inv


@njit(cache=True, fastmath=False)
def ln_bwd(go, gain, xhat, inv):
    n, d = go.shape
    dx = np.empty((n, d))
    dg = np.zeros(d)
    db = np.zeros(d)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            dxh = go[i, j] * gain[j]
            m1 += dxh
            m2 += dxh * xhat[i, j]
            dg[j] += go[i, j] * xhat[i, j]
            db[j] += go[i, j]
        m1 /= d
        m2 /= d
        iv = inv[i]
        for j in range(d):
            dx[i, j] = iv * (go[i, j] * gain[j] - m1 - xhat[i, j] * m2)
    return dx, dg, db


@njit(cache=True, fastmath=False)
def softmax_bwd_3d(da, a, scale):
    """In-place: da <- a * (da - rowdot(da, a)) * scale."""
    h, tq, tk = a.shape
    for m in range(h):
        for i in range(tq):
            dot = 0.0
            for j in range(tk):
                dot += da[m, i, j] * a[m, i, j]
            for j in range(tk):
                da[m, i, j] = a[m, i, j] * (da[m, i, j] - dot) * scale


@njit(cache=True, fastmath=False)
def focal_fwd(s, labels, alpha, gamma):
    total = 0.0
    for i in range(s.shape[0]):
        x = s[i]
        if x < 1e-12:
            x = 1e-12
        elif x > 1.0 - 1e-12:
            x = 1.0 - 1e-12
        if labels[i] != 0.0:
            total += -alpha * (1.0 - x) ** gamma * np.log(x)
        else:
            total += -(1.0 - alpha) * x**gamma * np.log(1.0 - x)
    return total


@njit(cache=True, fastmath=False)
def focal_bwd(s_raw, labels, alpha, gamma, go):
    n = s_raw.shape[0]
    ds = np.empty(n)
    for i in range(n):
        x = s_raw[i]
        if x <= 1e-12 or x >= 1.0 - 1e-12:
            ds[i] = 0.0
            continue
        om = 1.0 - x
        if labels[i] != 0.0:
            if gamma > 0.0:
                d = alpha * (gamma * om ** (gamma - 1.0) * np.log(x) - om**gamma / x)
            else:
                d = -alpha / x
        else:
            if gamma > 0.0:
                d = (1.0 - alpha) * (x**gamma / om - gamma * x ** (gamma - 1.0) * np.log(om))
            else:
                d = (1.0 - alpha) / om
        ds[i] = d * go
    return ds


@njit(cache=True, fastmath=False)
def _giou_terms(px0, py0, px1, py1, gx0, gy0, gx1, gy1):
    iw = min(px1, gx1) - max(px0, gx0)
    if iw < 0.0:
        iw = 0.0
    ih = min(py1, gy1) - max(py0, gy0)
    if ih < 0.0:
        ih = 0.0
    inter = iw * ih
    union = (px1 - px0) * (py1 - py0) + (gx1 - gx0) * (gy1 - gy0) - inter
    ew = max(px1, gx1) - min(px0, gx0)
    eh = max(py1, gy1) - min(py0, gy0)
    enclosure = ew * eh
    return iw, ih, inter, union, ew, eh, enclosure


@njit(cache=True, fastmath=False)
def giou_loss_fwd(p, g):
    """Sum of 1 - giou over (P, 4) cxcywh box pairs."""
    total = 0.0
    for i in range(p.shape[0]):
        px0 = p[i, 0] - 0.5 * p[i, 2]
        px1 = p[i, 0] + 0.5 * p[i, 2]
        py0 = p[i, 1] - 0.5 * p[i, 3]
        py1 = p[i, 1] + 0.5 * p[i, 3]
        gx0 = g[i, 0] - 0.5 * g[i, 2]
        gx1 = g[i, 0] + 0.5 * g[i, 2]
        gy0 = g[i, 1] - 0.5 * g[i, 3]
        gy1 = g[i, 1] + 0.5 * g[i, 3]
        iw, ih, inter, union, ew, eh, enclosure = _giou_terms(
            px0, py0, px1, py1, gx0, gy0, gx1, gy1
        )
        if union > 0.0 and enclosure > 0.0:
            total += 1.0 - (inter / union - (enclosure - union) / enclosure)
        else:
            total += 1.0
    return total


@njit(cache=True, fastmath=False)
def giou_loss_bwd(p, g, go):
    n = p.shape[0]
    dp = np.zeros((n, 4))
    for i in range(n):
        px0 = p[i, 0] - 0.5 * p[i, 2]
        px1 = p[i, 0] + 0.5 * p[i, 2]
        py0 = p[i, 1] - 0.5 * p[i, 3]
        py1 = p[i, 1] + 0.5 * p[i, 3]
        gx0 = g[i, 0] - 0.5 * g[i, 2]
        gx1 = g[i, 0] + 0.5 * g[i, 2]
        gy0 = g[i, 1] - 0.5 * g[i, 3]
        gy1 = g[i, 1] + 0.5 * g[i, 3]
        iw, ih, inter, union, ew, eh, enclosure = _giou_terms(
            px0, py0, px1, py1, gx0, gy0, gx1, gy1
        )
        if union <= 0.0 or enclosure <= 0.0:
            continue
        active = iw > 0.0 and ih > 0.0
        u2 = union * union
        e2 = enclosure * enclosure
        ph = py1 - py0
        pw = px1 - px0
        # corner partials of inter, pred area, enclosure
        di = np.zeros(4)
        if active:
            if px0 >= gx0:
                di[0] = -ih
            if px1 <= gx1:
                di[1] = ih
            if py0 >= gy0:
                di[2] = -iw
            if py1 <= gy1:
                di[3] = iw
        da0, da1, da2, da3 = -ph, ph, -pw, pw
        de = np.zeros(4)
        if px0 <= gx0:
            de[0] = -eh
        if px1 >= gx1:
            de[1] = eh
        if py0 <= gy0:
            de[2] = -ew
        if py1 >= gy1:
            de[3] = ew
        gx0_ = gx1_ = gy0_ = gy1_ = 0.0
        das = (da0, da1, da2, da3)
        for c in range(4):
            du = das[c] - di[c]
            d_iou = (di[c] * union - inter * du) / u2
            d_ue = (du * enclosure - union * de[c]) / e2
            val = -(d_iou + d_ue) * go
            if c == 0:
                gx0_ = val
            elif c == 1:
                gx1_ = val
            elif c == 2:
                gy0_ = val
            else:
                gy1_ = val
        dp[i, 0] = gx0_ + gx1_
        dp[i, 1] = gy0_ + gy1_
        dp[i, 2] = 0.5 * (gx1_ - gx0_)
        dp[i, 3] = 0.5 * (gy1_ - gy0_)
    return dp


@njit(cache=True, fastmath=False)
def matching_cost_fill(scores, boxes, delta, real, gt_boxes, w_cls, w_l1, w_giou, alpha, gamma):
    """Cost matrix: rows are targets (padding rows all zero), columns are
    predictions; positive rows add the weighted geometry terms."""
    k = scores.shape[0]
    cost = np.zeros((k, k))
    pos_cls = np.empty(k)
    neg_cls = np.empty(k)
    for j in range(k):
        x = scores[j]
        if x < 1e-12:
            x = 1e-12
        elif x > 1.0 - 1e-12:
            x = 1.0 - 1e-12
        pos_cls[j] = -alpha * (1.0 - x) ** gamma * np.log(x)
        neg_cls[j] = -(1.0 - alpha) * x**gamma * np.log(1.0 - x)
    for i in range(k):
        if not real[i]:
            continue
        if delta[i] == 0.0:
            for j in range(k):
                cost[i, j] = w_cls * neg_cls[j]
            continue
        gx0 = gt_boxes[i, 0] - 0.5 * gt_boxes[i, 2]
        gx1 = gt_boxes[i, 0] + 0.5 * gt_boxes[i, 2]
        gy0 = gt_boxes[i, 1] - 0.5 * gt_boxes[i, 3]
        gy1 = gt_boxes[i, 1] + 0.5 * gt_boxes[i, 3]
        for j in range(k):
            l1 = (
                abs(gt_boxes[i, 0] - boxes[j, 0])
                + abs(gt_boxes[i, 1] - boxes[j, 1])
                + abs(gt_boxes[i, 2] - boxes[j, 2])
                + abs(gt_boxes[i, 3] - boxes[j, 3])
            )
            px0 = boxes[j, 0] - 0.5 * boxes[j, 2]
            px1 = boxes[j, 0] + 0.5 * boxes[j, 2]
            py0 = boxes[j, 1] - 0.5 * boxes[j, 3]
            py1 = boxes[j, 1] + 0.5 * boxes[j, 3]
            iw, ih, inter, union, ew, eh, enclosure = _giou_terms(
                px0, py0, px1, py1, gx0, gy0, gx1, gy1
            )
            if union > 0.0 and enclosure > 0.0:
                giou = inter / union - (enclosure - union) / enclosure
            else:
                giou = 0.0
            cost[i, j] = w_cls * pos_cls[j] + w_l1 * l1 + w_giou * (1.0 - giou)
    return cost


@njit(cache=True, fastmath=False)
def canonical_lex(m, perm, tol):
    """Lexicographically smallest optimal matching on the tight-edge graph.

    Recovers dual potentials by relaxation, sorts columns within groups of
    identical rows, and finishes with a row-by-row augmenting-path pass
    when ties cross group boundaries.
    """
    k = m.shape[0]
    out = perm.copy()
    if k == 1:
        return out
    # dual recovery (Gauss-Seidel relaxation; deterministic order)
    matched = np.empty(k)
    for i in range(k):
        matched[i] = m[i, perm[i]]
    v = np.zeros(k)
    for _ in range(k):
        changed = False
        for i in range(k):
            base = v[perm[i]] - matched[i]
            for j in range(k):
                c = m[i, j] + base
                if c < v[j]:
                    v[j] = c
                    changed = True
        if not changed:
            break
    # group identical rows
    gid = np.full(k, -1, np.int64)
    ng = 0
    for i in range(k):
        if gid[i] >= 0:
            continue
        gid[i] = ng
        for i2 in range(i + 1, k):
            if gid[i2] >= 0:
                continue
            same = True
            for j in range(k):
                if m[i, j] != m[i2, j]:
                    same = False
                    break
            if same:
                gid[i2] = ng
        ng += 1
    # sort assigned columns ascending within each group
    for g in range(ng):
        cnt = 0
        for i in range(k):
            if gid[i] == g:
                cnt += 1
        if cnt < 2:
            continue
        cols = np.empty(cnt, np.int64)
        t = 0
        for i in range(k):
            if gid[i] == g:
                cols[t] = out[i]
                t += 1
        cols.sort()
        t = 0
        for i in range(k):
            if gid[i] == g:
                out[i] = cols[t]
                t += 1
    if ng == 1:
        return out
    # tight graph in CSR form
    tight = np.zeros((k, k), np.bool_)
    degree = np.zeros(k, np.int64)
    for i in range(k):
        u_i = matched[i] - v[perm[i]]
        for j in range(k):
            if m[i, j] - u_i - v[j] <= tol:
                tight[i, j] = True
                degree[i] += 1
    col_gid = np.empty(k, np.int64)
    for i in range(k):
        col_gid[out[i]] = gid[i]
    cross = False
    for i in range(k):
        for j in range(k):
            if tight[i, j] and col_gid[j] != gid[i]:
                cross = True
                break
        if cross:
            break
    if not cross:
        return out
    # row-by-row lexicographic improvement with iterative augmenting search
    col_owner = np.empty(k, np.int64)
    for i in range(k):
        col_owner[out[i]] = i
    fixed = np.zeros(k, np.bool_)
    visited = np.zeros(k, np.int64)
    stamp = 0
    path_row = np.empty(k + 1, np.int64)
    link_col = np.empty(k + 1, np.int64)
    ptr = np.empty(k + 1, np.int64)
    for i in range(k):
        for j in range(k):
            if j >= out[i]:
                break
            if not tight[i, j] or fixed[j]:
                continue
            displaced = col_owner[j]
            if degree[displaced] == 1:
                continue
            old = out[i]
            out[i] = j
            col_owner[j] = i
            col_owner[old] = -1
            stamp += 1
            visited[j] = stamp
            # augment from `displaced` over tight, unfixed, unvisited columns
            depth = 0
            path_row[0] = displaced
            ptr[0] = 0
            success = False
            while depth >= 0:
                r = path_row[depth]
                advanced = False
                c = ptr[depth]
                while c < k:
                    if tight[r, c] and not fixed[c] and visited[c] != stamp:
                        visited[c] = stamp
                        owner = col_owner[c]
                        if owner < 0:
                            out[r] = c
                            col_owner[c] = r
                            for d in range(depth - 1, -1, -1):
                                rr = path_row[d]
                                cc = link_col[d]
                                out[rr] = cc
                                col_owner[cc] = rr
                            success = True
                            break
                        link_col[depth] = c
                        ptr[depth] = c + 1
                        depth += 1
                        path_row[depth] = owner
                        ptr[depth] = 0
                        advanced = True
                        break
                    c += 1
                if success:
                    break
                if advanced:
                    continue
                depth -= 1
            if success:
                break
            out[i] = old
            col_owner[old] = i
            col_owner[j] = displaced
        fixed[out[i]] = True
    return out
