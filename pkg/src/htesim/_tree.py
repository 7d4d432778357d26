"""Low-level numba kernels for axis-aligned tree ensembles.

Shared by the generic regression forest and the treatment-effect forest.
Covariates are passed transposed (p x n, C order) so a variable's values
are contiguous. Split search walks per-variable presorted index lists that
are maintained through node partitions, so no sorting happens inside the
tree growth. All kernels are deterministic given the seeds they receive:
every tree reseeds numba's thread-local RNG, so results do not depend on
scheduling.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# Split search evaluates all midpoints between consecutive distinct sorted
# values when there are at most this many, else this many rank-quantile
# candidates (bounds cost on large nodes).
MAX_SPLIT_CANDIDATES = 64


@njit(cache=True, fastmath=True)
def _draw_subsample_flags(n, n_sub, flag):
    """Mark n_sub uniformly drawn rows (without replacement) in flag."""
    idx = np.arange(n)
    for i in range(n_sub):
        j = i + np.random.randint(0, n - i)
        t = idx[i]
        idx[i] = idx[j]
        idx[j] = t
    for i in range(n):
        flag[i] = 0
    for i in range(n_sub):
        flag[idx[i]] = 1


@njit(cache=True, fastmath=True)
def _draw_split_vars(p, rate, out):
    """Sample min(p, 1 + Poisson(rate)) distinct variables, ascending."""
    m = 1
    if rate > 0.0:
        m = 1 + np.random.poisson(rate)
    if m > p:
        m = p
    idx = np.arange(p)
    for i in range(m):
        j = i + np.random.randint(0, p - i)
        t = idx[i]
        idx[i] = idx[j]
        idx[j] = t
    sel = np.sort(idx[:m])
    for i in range(m):
        out[i] = sel[i]
    return m


@njit(cache=True, fastmath=True)
def _select_candidates(vsorted, n, bpos, sel):
    """Candidate boundary positions for a sorted value array.

    A boundary at position j means a split between vsorted[j] and
    vsorted[j+1]. Returns the number of selected boundaries; positions are
    written to sel. When there are more than MAX_SPLIT_CANDIDATES
    boundaries, candidates are snapped to rank quantiles.
    """
    nb = 0
    for j in range(n - 1):
        if vsorted[j] != vsorted[j + 1]:
            bpos[nb] = j
            nb += 1
    if nb <= MAX_SPLIT_CANDIDATES:
        for i in range(nb):
            sel[i] = bpos[i]
        return nb
    ns = 0
    prev = -1
    bi = 0
    for i in range(MAX_SPLIT_CANDIDATES):
        desired = (i + 1) * n // (MAX_SPLIT_CANDIDATES + 1)
        while bi + 1 < nb and bpos[bi + 1] <= desired:
            bi += 1
        pos = bpos[bi]
        if pos != prev:
            sel[ns] = pos
            ns += 1
            prev = pos
    return ns


@njit(cache=True, fastmath=True)
def _filter_sorted(order_global, flag, sorted_idx, n, n_sub, p):
    """Per-variable sorted lists restricted to the flagged subsample."""
    for v in range(p):
        k = 0
        for i in range(n):
            r = order_global[v, i]
            if flag[r] == 1:
                sorted_idx[v, k] = r
                k += 1


@njit(cache=True, fastmath=True)
def _partition_sorted(sorted_idx, p, lo, hi, side, tmp):
    """Stable-partition every variable's segment by the side flags.

    Returns the size of the left block.
    """
    n_left = 0
    for v in range(p):
        nl = 0
        nr = 0
        for q in range(lo, hi):
            r = sorted_idx[v, q]
            if side[r] == 1:
                sorted_idx[v, lo + nl] = r
                nl += 1
            else:
                tmp[nr] = r
                nr += 1
        for q in range(nr):
            sorted_idx[v, lo + nl + q] = tmp[q]
        n_left = nl
    return n_left


# ---------------------------------------------------------------------------
# Regression forest (multi-target leaf means; class frequencies are the
# one-hot special case)
# ---------------------------------------------------------------------------


@njit(cache=True, fastmath=True)
def build_reg_forest(XT, order_global, Y, n_trees, subsample_frac, min_leaf,
                     mtry_rate, seeds):
    p, n = XT.shape
    T = Y.shape[1]
    n_sub = int(round(subsample_frac * n))
    if n_sub < 1:
        n_sub = 1
    if n_sub > n:
        n_sub = n
    cap = 2 * (n_sub // max(min_leaf, 1)) + 3
    total_cap = n_trees * cap
    feature = np.full(total_cap, -1, np.int32)
    threshold = np.zeros(total_cap, np.float64)
    left = np.full(total_cap, -1, np.int32)
    right = np.full(total_cap, -1, np.int32)
    values = np.zeros((total_cap, T), np.float64)
    tree_off = np.zeros(n_trees + 1, np.int64)

    flag = np.zeros(n, np.uint8)
    side = np.zeros(n, np.uint8)
    sorted_idx = np.zeros((p, n_sub), np.int32)
    tmp = np.zeros(n_sub, np.int32)
    stack_node = np.zeros(cap, np.int64)
    stack_lo = np.zeros(cap, np.int64)
    stack_hi = np.zeros(cap, np.int64)
    vbuf = np.zeros(n_sub, np.float64)
    bpos = np.zeros(max(n_sub - 1, 1), np.int64)
    sel = np.zeros(max(n_sub - 1, 1), np.int64)
    vars_buf = np.zeros(p, np.int64)
    sTot = np.zeros(T, np.float64)
    sL = np.zeros(T, np.float64)

    for b in range(n_trees):
        np.random.seed(seeds[b])
        base = tree_off[b]
        _draw_subsample_flags(n, n_sub, flag)
        _filter_sorted(order_global, flag, sorted_idx, n, n_sub, p)
        n_nodes = 1
        top = 0
        stack_node[0] = 0
        stack_lo[0] = 0
        stack_hi[0] = n_sub
        while top >= 0:
            node = stack_node[top]
            lo = stack_lo[top]
            hi = stack_hi[top]
            top -= 1
            nn = hi - lo
            for t in range(T):
                sTot[t] = 0.0
            for q in range(lo, hi):
                u = sorted_idx[0, q]
                for t in range(T):
                    sTot[t] += Y[u, t]
            for t in range(T):
                values[base + node, t] = sTot[t] / nn
            if nn < 2 * min_leaf:
                continue
            parent_score = 0.0
            for t in range(T):
                parent_score += sTot[t] * sTot[t] / nn
            m = _draw_split_vars(p, mtry_rate, vars_buf)
            best_score = parent_score
            best_var = -1
            best_thr = 0.0
            for vi in range(m):
                var = vars_buf[vi]
                for q in range(nn):
                    vbuf[q] = XT[var, sorted_idx[var, lo + q]]
                ns = _select_candidates(vbuf, nn, bpos, sel)
                if ns == 0:
                    continue
                for t in range(T):
                    sL[t] = 0.0
                ci = 0
                for j in range(nn - 1):
                    u = sorted_idx[var, lo + j]
                    for t in range(T):
                        sL[t] += Y[u, t]
                    if ci < ns and sel[ci] == j:
                        ci += 1
                        nl = j + 1
                        nr = nn - nl
                        if nl < min_leaf or nr < min_leaf:
                            continue
                        score = 0.0
                        for t in range(T):
                            score += sL[t] * sL[t] / nl
                            sr = sTot[t] - sL[t]
                            score += sr * sr / nr
                        if score > best_score:
                            best_score = score
                            best_var = var
                            best_thr = 0.5 * (vbuf[j] + vbuf[j + 1])
            if best_var < 0:
                continue
            for q in range(lo, hi):
                r = sorted_idx[0, q]
                side[r] = 1 if XT[best_var, r] <= best_thr else 0
            n_left = _partition_sorted(sorted_idx, p, lo, hi, side, tmp)
            mid = lo + n_left
            nl_id = n_nodes
            nr_id = n_nodes + 1
            n_nodes += 2
            feature[base + node] = np.int32(best_var)
            threshold[base + node] = best_thr
            left[base + node] = np.int32(nl_id)
            right[base + node] = np.int32(nr_id)
            top += 1
            stack_node[top] = nl_id
            stack_lo[top] = lo
            stack_hi[top] = mid
            top += 1
            stack_node[top] = nr_id
            stack_lo[top] = mid
            stack_hi[top] = hi
        tree_off[b + 1] = base + n_nodes
    total = tree_off[n_trees]
    return (
        feature[:total].copy(),
        threshold[:total].copy(),
        left[:total].copy(),
        right[:total].copy(),
        values[:total].copy(),
        tree_off,
    )


@njit(cache=True, fastmath=True)
def predict_reg_forest(XT_new, feature, threshold, left, right, values, tree_off):
    n = XT_new.shape[1]
    T = values.shape[1]
    B = tree_off.shape[0] - 1
    out = np.zeros((n, T), np.float64)
    for b in range(B):
        base = tree_off[b]
        for i in range(n):
            node = 0
            while feature[base + node] >= 0:
                if XT_new[feature[base + node], i] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            for t in range(T):
                out[i, t] += values[base + node, t]
    for i in range(n):
        for t in range(T):
            out[i, t] /= B
    return out


@njit(cache=True, fastmath=True)
def route_forest(XT_new, feature, threshold, left, right, tree_off):
    """Local leaf id per (tree, row)."""
    n = XT_new.shape[1]
    B = tree_off.shape[0] - 1
    out = np.zeros((B, n), np.int32)
    for b in range(B):
        base = tree_off[b]
        for i in range(n):
            node = 0
            while feature[base + node] >= 0:
                if XT_new[feature[base + node], i] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            out[b, i] = node
    return out


# ---------------------------------------------------------------------------
# Treatment-effect forest
# ---------------------------------------------------------------------------


@njit(cache=True, fastmath=True, inline="always")
def _pair_index(m, l):
    return m * (m - 1) // 2 + l


@njit(cache=True, fastmath=True, inline="always")
def _node_objective(cnt, sy, sy2, sYt, sP, M):
    """Sum over treatment pairs of MSE(m) + MSE(l) - 2 MCE(m, l).

    Returns np.inf when a treatment arm is empty (split disallowed).
    """
    for d in range(M):
        if cnt[d] == 0:
            return np.inf
    obj = 0.0
    for m in range(1, M):
        nm = cnt[m]
        ym = sy[m] / nm
        mse_m = sy2[m] / nm - ym * ym
        for l in range(m):
            nl = cnt[l]
            yl = sy[l] / nl
            mse_l = sy2[l] / nl - yl * yl
            nml = nm + nl
            pidx = _pair_index(m, l)
            s_m = sYt[m, m] + sYt[l, m]
            s_l = sYt[m, l] + sYt[l, l]
            s_ml = sP[m, pidx] + sP[l, pidx]
            mce = (nml * ym * yl - ym * s_l - yl * s_m + s_ml) / nml
            obj += mse_m + mse_l - 2.0 * mce
    return obj


@njit(cache=True, fastmath=True)
def build_mcf_forest(XT, order_global, y, d, ytil, M, n_trees, subsample_frac,
                     nu, lam, mtry_rate, seeds):
    """Greedy recursive partitioning on the penalized pairwise objective.

    Admissible splits keep at least nu subsample units per arm on both
    sides. The best admissible split (objective(left) + objective(right)
    + penalty) is accepted when strictly below the parent objective + lam;
    ties break to the lowest variable index then lowest threshold.
    Returns node arrays plus per-node subsample arm counts.
    """
    p, n = XT.shape
    n_pairs = M * (M - 1) // 2
    n_sub = int(round(subsample_frac * n))
    if n_sub < 1:
        n_sub = 1
    if n_sub > n:
        n_sub = n
    cap = 2 * (n_sub // max(nu * M, 1)) + 3
    total_cap = n_trees * cap
    feature = np.full(total_cap, -1, np.int32)
    threshold = np.zeros(total_cap, np.float64)
    left = np.full(total_cap, -1, np.int32)
    right = np.full(total_cap, -1, np.int32)
    train_cnt = np.zeros((total_cap, M), np.int32)
    tree_off = np.zeros(n_trees + 1, np.int64)

    flag = np.zeros(n, np.uint8)
    side = np.zeros(n, np.uint8)
    sorted_idx = np.zeros((p, n_sub), np.int32)
    tmp = np.zeros(n_sub, np.int32)
    stack_node = np.zeros(cap, np.int64)
    stack_lo = np.zeros(cap, np.int64)
    stack_hi = np.zeros(cap, np.int64)
    vbuf = np.zeros(n_sub, np.float64)
    bpos = np.zeros(max(n_sub - 1, 1), np.int64)
    sel = np.zeros(max(n_sub - 1, 1), np.int64)
    vars_buf = np.zeros(p, np.int64)

    cntN = np.zeros(M, np.int64)
    syN = np.zeros(M, np.float64)
    sy2N = np.zeros(M, np.float64)
    sYtN = np.zeros((M, M), np.float64)
    sPN = np.zeros((M, n_pairs), np.float64)
    cntL = np.zeros(M, np.int64)
    syL = np.zeros(M, np.float64)
    sy2L = np.zeros(M, np.float64)
    sYtL = np.zeros((M, M), np.float64)
    sPL = np.zeros((M, n_pairs), np.float64)
    cntR = np.zeros(M, np.int64)
    syR = np.zeros(M, np.float64)
    sy2R = np.zeros(M, np.float64)
    sYtR = np.zeros((M, M), np.float64)
    sPR = np.zeros((M, n_pairs), np.float64)

    for b in range(n_trees):
        np.random.seed(seeds[b])
        base = tree_off[b]
        _draw_subsample_flags(n, n_sub, flag)
        _filter_sorted(order_global, flag, sorted_idx, n, n_sub, p)
        n_nodes = 1
        top = 0
        stack_node[0] = 0
        stack_lo[0] = 0
        stack_hi[0] = n_sub
        while top >= 0:
            node = stack_node[top]
            lo = stack_lo[top]
            hi = stack_hi[top]
            top -= 1
            nn = hi - lo
            for a in range(M):
                cntN[a] = 0
                syN[a] = 0.0
                sy2N[a] = 0.0
                for c in range(M):
                    sYtN[a, c] = 0.0
                for c in range(n_pairs):
                    sPN[a, c] = 0.0
            for q in range(lo, hi):
                u = sorted_idx[0, q]
                a = d[u]
                cntN[a] += 1
                syN[a] += y[u]
                sy2N[a] += y[u] * y[u]
                for c in range(M):
                    sYtN[a, c] += ytil[u, c]
                for m in range(1, M):
                    for l in range(m):
                        sPN[a, _pair_index(m, l)] += ytil[u, m] * ytil[u, l]
            for a in range(M):
                train_cnt[base + node, a] = np.int32(cntN[a])
            splittable = True
            for a in range(M):
                if cntN[a] < 2 * nu:
                    splittable = False
            if not splittable:
                continue
            parent_obj = _node_objective(cntN, syN, sy2N, sYtN, sPN, M)
            if not np.isfinite(parent_obj):
                continue
            n_try = _draw_split_vars(p, mtry_rate, vars_buf)
            best_crit = parent_obj + lam
            best_var = -1
            best_thr = 0.0
            for vi in range(n_try):
                var = vars_buf[vi]
                for q in range(nn):
                    vbuf[q] = XT[var, sorted_idx[var, lo + q]]
                ns = _select_candidates(vbuf, nn, bpos, sel)
                if ns == 0:
                    continue
                for a in range(M):
                    cntL[a] = 0
                    syL[a] = 0.0
                    sy2L[a] = 0.0
                    for c in range(M):
                        sYtL[a, c] = 0.0
                    for c in range(n_pairs):
                        sPL[a, c] = 0.0
                ci = 0
                for j in range(nn - 1):
                    u = sorted_idx[var, lo + j]
                    a = d[u]
                    cntL[a] += 1
                    syL[a] += y[u]
                    sy2L[a] += y[u] * y[u]
                    for c in range(M):
                        sYtL[a, c] += ytil[u, c]
                    for m in range(1, M):
                        for l in range(m):
                            sPL[a, _pair_index(m, l)] += ytil[u, m] * ytil[u, l]
                    if ci < ns and sel[ci] == j:
                        ci += 1
                        admissible = True
                        for a2 in range(M):
                            if cntL[a2] < nu or cntN[a2] - cntL[a2] < nu:
                                admissible = False
                        if not admissible:
                            continue
                        for a2 in range(M):
                            cntR[a2] = cntN[a2] - cntL[a2]
                            syR[a2] = syN[a2] - syL[a2]
                            sy2R[a2] = sy2N[a2] - sy2L[a2]
                            for c in range(M):
                                sYtR[a2, c] = sYtN[a2, c] - sYtL[a2, c]
                            for c in range(n_pairs):
                                sPR[a2, c] = sPN[a2, c] - sPL[a2, c]
                        obj_l = _node_objective(cntL, syL, sy2L, sYtL, sPL, M)
                        obj_r = _node_objective(cntR, syR, sy2R, sYtR, sPR, M)
                        nl_tot = j + 1
                        nr_tot = nn - nl_tot
                        sq = 0.0
                        for a2 in range(M):
                            dp = cntL[a2] / nl_tot - cntR[a2] / nr_tot
                            sq += dp * dp
                        pen = lam * (1.0 - sq / M)
                        crit = obj_l + obj_r + pen
                        if crit < best_crit:
                            best_crit = crit
                            best_var = var
                            best_thr = 0.5 * (vbuf[j] + vbuf[j + 1])
            if best_var < 0:
                continue
            for q in range(lo, hi):
                r = sorted_idx[0, q]
                side[r] = 1 if XT[best_var, r] <= best_thr else 0
            n_left = _partition_sorted(sorted_idx, p, lo, hi, side, tmp)
            mid = lo + n_left
            nl_id = n_nodes
            nr_id = n_nodes + 1
            n_nodes += 2
            feature[base + node] = np.int32(best_var)
            threshold[base + node] = best_thr
            left[base + node] = np.int32(nl_id)
            right[base + node] = np.int32(nr_id)
            top += 1
            stack_node[top] = nl_id
            stack_lo[top] = lo
            stack_hi[top] = mid
            top += 1
            stack_node[top] = nr_id
            stack_lo[top] = mid
            stack_hi[top] = hi
        tree_off[b + 1] = base + n_nodes
    total = tree_off[n_trees]
    return (
        feature[:total].copy(),
        threshold[:total].copy(),
        left[:total].copy(),
        right[:total].copy(),
        train_cnt[:total].copy(),
        tree_off,
    )


@njit(cache=True, fastmath=True)
def leaf_membership(leaf_of, tree_off, y, d, M):
    """Per-node arm counts / outcome sums plus CSR membership lists.

    leaf_of is the (B x n) routing of the leaf-populating rows.
    """
    B, n = leaf_of.shape
    total = tree_off[B]
    cnt = np.zeros((total, M), np.int32)
    ysum = np.zeros((total, M), np.float64)
    ptr = np.zeros(total + 1, np.int64)
    for b in range(B):
        base = tree_off[b]
        for i in range(n):
            g = base + leaf_of[b, i]
            cnt[g, d[i]] += 1
            ysum[g, d[i]] += y[i]
            ptr[g + 1] += 1
    for t in range(total):
        ptr[t + 1] += ptr[t]
    order = np.zeros(B * n, np.int64)
    cursor = ptr[:-1].copy()
    for b in range(B):
        base = tree_off[b]
        for i in range(n):
            g = base + leaf_of[b, i]
            order[cursor[g]] = i
            cursor[g] += 1
    return cnt, ysum, ptr, order


@njit(cache=True, fastmath=True)
def weight_matrix(qleaf, tree_off, cnt, ptr, order, d_est, n_est, m, l):
    """Forest weights over leaf-populating units for every query row.

    Trees whose leaf lacks arm m or arm l contribute nothing; the average
    renormalizes over contributing trees. Returns the dense weight matrix
    and the per-query contributing-tree count (0 marks a failed query).
    """
    B, nq = qleaf.shape
    qleafT = np.ascontiguousarray(qleaf.T)
    W = np.zeros((nq, n_est), np.float64)
    contrib = np.zeros(nq, np.int64)
    signed = np.zeros(n_est, np.float64)
    for i in range(n_est):
        if d_est[i] == m:
            signed[i] = 1.0
        elif d_est[i] == l:
            signed[i] = -1.0
    for q in range(nq):
        nc = 0
        for b in range(B):
            g = tree_off[b] + qleafT[q, b]
            cm = cnt[g, m]
            cl = cnt[g, l]
            if cm == 0 or cl == 0:
                continue
            nc += 1
            wm = 1.0 / cm
            wl = 1.0 / cl
            for t in range(ptr[g], ptr[g + 1]):
                i = order[t]
                if signed[i] > 0.0:
                    W[q, i] += wm
                elif signed[i] < 0.0:
                    W[q, i] -= wl
        contrib[q] = nc
        if nc > 0:
            inv = 1.0 / nc
            for i in range(n_est):
                W[q, i] *= inv
    return W, contrib


@njit(cache=True, fastmath=True)
def point_estimates(qleaf, tree_off, cnt, ysum, m, l):
    """Per-query mean difference of leaf arm means, averaged over trees."""
    B, nq = qleaf.shape
    out = np.zeros(nq, np.float64)
    contrib = np.zeros(nq, np.int64)
    for b in range(B):
        base = tree_off[b]
        for q in range(nq):
            g = base + qleaf[b, q]
            cm = cnt[g, m]
            cl = cnt[g, l]
            if cm == 0 or cl == 0:
                continue
            contrib[q] += 1
            out[q] += ysum[g, m] / cm - ysum[g, l] / cl
    for q in range(nq):
        if contrib[q] > 0:
            out[q] /= contrib[q]
        else:
            out[q] = np.nan
    return out, contrib


# ---------------------------------------------------------------------------
# Weights-based variance (sliding k-NN window in 1-D weight space)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _sort_fpairs(keys, vals, n):
    """Iterative quicksort of keys[:n] carrying vals along (unstable)."""
    stack = np.empty(128, np.int64)
    stack[0] = 0
    stack[1] = n - 1
    top = 2
    while top > 0:
        r = stack[top - 1]
        l = stack[top - 2]
        top -= 2
        while r - l > 12:
            mid = (l + r) >> 1
            if keys[mid] < keys[l]:
                keys[mid], keys[l] = keys[l], keys[mid]
                vals[mid], vals[l] = vals[l], vals[mid]
            if keys[r] < keys[l]:
                keys[r], keys[l] = keys[l], keys[r]
                vals[r], vals[l] = vals[l], vals[r]
            if keys[r] < keys[mid]:
                keys[r], keys[mid] = keys[mid], keys[r]
                vals[r], vals[mid] = vals[mid], vals[r]
            pivot = keys[mid]
            i = l
            j = r
            while i <= j:
                while keys[i] < pivot:
                    i += 1
                while keys[j] > pivot:
                    j -= 1
                if i <= j:
                    keys[i], keys[j] = keys[j], keys[i]
                    vals[i], vals[j] = vals[j], vals[i]
                    i += 1
                    j -= 1
            # push the smaller side, iterate on the larger: O(log n) stack
            if j - l < r - i:
                if l < j:
                    stack[top] = l
                    stack[top + 1] = j
                    top += 2
                l = i
            else:
                if i < r:
                    stack[top] = i
                    stack[top + 1] = r
                    top += 2
                r = j
        for i in range(l + 1, r + 1):
            v = keys[i]
            w = vals[i]
            j = i - 1
            while j >= l and keys[j] > v:
                keys[j + 1] = keys[j]
                vals[j + 1] = vals[j]
                j -= 1
            keys[j + 1] = v
            vals[j + 1] = w


@njit(cache=True)
def _sorted_part_variance(Ws, ys, cy, cy2, n, k):
    """The variance display over a weight-sorted part (weights sum to n)."""
    if k > n:
        k = n
    if k < 2:
        k = 2
    for i in range(n):
        cy[i + 1] = cy[i] + ys[i]
        cy2[i + 1] = cy2[i] + ys[i] * ys[i]
    t1 = 0.0
    tsum = 0.0
    lo = 0
    for i in range(n):
        if lo < i - k + 1:
            lo = i - k + 1
        while lo + k < n and lo < i and (Ws[lo + k] - Ws[i]) < (Ws[i] - Ws[lo]):
            lo += 1
        mu = (cy[lo + k] - cy[lo]) / k
        q = cy2[lo + k] - cy2[lo]
        v = (q - k * mu * mu) / (k - 1)
        if v < 0.0:
            v = 0.0
        t1 += Ws[i] * Ws[i] * v
        cy2[i] = Ws[i] * mu  # reuse buffer for the mu terms
        tsum += cy2[i]
    tbar = tsum / n
    t2 = 0.0
    for i in range(n):
        dv = cy2[i] - tbar
        t2 += dv * dv
    return t1 / (n * n) + t2 / (n * (n - 1.0))


@njit(cache=True)
def part_variance(w, yv, k):
    """Variance of a weighted mean whose weights sum to one.

    Internally rescales weights to sum to the part size n, estimates the
    conditional outcome moments with a k-nearest window in weight space,
    and evaluates

        (1/n^2) sum W_i^2 sigma2_i + (1/(n(n-1))) sum (W_i mu_i - mean)^2.
    """
    n = w.shape[0]
    if n < 2:
        return np.nan
    s = 0.0
    for i in range(n):
        s += w[i]
    if s == 0.0:
        return np.nan
    if k > n:
        k = n
    if k < 2:
        k = 2
    scale = n / s
    order = np.argsort(w)
    Ws = np.empty(n, np.float64)
    ys = np.empty(n, np.float64)
    for i in range(n):
        Ws[i] = w[order[i]] * scale
        ys[i] = yv[order[i]]
    cy = np.zeros(n + 1, np.float64)
    cy2 = np.zeros(n + 1, np.float64)
    for i in range(n):
        cy[i + 1] = cy[i] + ys[i]
        cy2[i + 1] = cy2[i] + ys[i] * ys[i]
    t1 = 0.0
    tvals = np.empty(n, np.float64)
    lo = 0
    for i in range(n):
        if lo > i:
            lo = i
        if lo < i - k + 1:
            lo = i - k + 1
        while lo + k < n and lo < i and (Ws[lo + k] - Ws[i]) < (Ws[i] - Ws[lo]):
            lo += 1
        mu = (cy[lo + k] - cy[lo]) / k
        q = cy2[lo + k] - cy2[lo]
        v = (q - k * mu * mu) / (k - 1)
        if v < 0.0:
            v = 0.0
        t1 += Ws[i] * Ws[i] * v
        tvals[i] = Ws[i] * mu
    tbar = 0.0
    for i in range(n):
        tbar += tvals[i]
    tbar /= n
    t2 = 0.0
    for i in range(n):
        dv = tvals[i] - tbar
        t2 += dv * dv
    return t1 / (n * n) + t2 / (n * (n - 1.0))


@njit(cache=True)
def batch_contrast_variance(W, yv, d_est, m, l, k):
    """Summed part variances of the (m, l) contrast for every weight row.

    Each signed part runs over its own arm's non-zero-weight units.
    """
    nq, n_est = W.shape
    out = np.empty(nq, np.float64)
    wp = np.empty(n_est, np.float64)
    yp = np.empty(n_est, np.float64)
    for q in range(nq):
        var = 0.0
        ok = True
        for part in range(2):
            arm = m if part == 0 else l
            np_ = 0
            for i in range(n_est):
                if d_est[i] == arm and W[q, i] != 0.0:
                    wp[np_] = W[q, i] if part == 0 else -W[q, i]
                    yp[np_] = yv[i]
                    np_ += 1
            if np_ < 2:
                ok = False
                break
            var += part_variance(wp[:np_].copy(), yp[:np_].copy(), k)
        out[q] = var if ok else np.nan
    return out
