"""Numba kernels for bagged CART growth and Meinshausen weight readout.

Trees are grown depth-first on a bootstrap multiset. Splits maximize
variance reduction with strict-improvement comparisons, scanning
features in ascending index order and thresholds in ascending value
order, so exact ties resolve to the lowest feature index and lowest
threshold. Each tree reseeds the global numba RNG with its own seed, so
serial and (potential) parallel builds produce identical trees.
"""
from __future__ import annotations

import numpy as np
from numba import njit

NO_FEATURE = -1


@njit(cache=True)
def _node_is_left(x_val, is_cat_f, threshold, mask):
    if is_cat_f:
        code = np.int64(x_val)
        if code < 0 or code > 63:
            return False
        return (mask >> np.uint64(code)) & np.uint64(1) == np.uint64(1)
    return x_val <= threshold


@njit(cache=True)
def grow_tree(X, y, is_cat, tree_seed, mtry, min_node, max_depth,
              feature, threshold, cat_mask, left, right):
    """Grow one tree in place; returns (n_nodes, inbag row indices)."""
    n, p = X.shape
    np.random.seed(tree_seed)
    inbag = np.empty(n, np.int32)
    for i in range(n):
        inbag[i] = np.random.randint(0, n)
    work = inbag.copy()

    max_nodes = feature.shape[0]
    start = np.empty(max_nodes, np.int64)
    end_ = np.empty(max_nodes, np.int64)
    depth = np.empty(max_nodes, np.int64)
    stack = np.empty(max_nodes, np.int64)
    start[0] = 0
    end_[0] = n
    depth[0] = 0
    stack[0] = 0
    top = 1
    n_nodes = 1

    feat_buf = np.empty(p, np.int64)
    lv_cnt = np.empty(64, np.int64)
    lv_sum = np.empty(64, np.float64)
    present = np.empty(64, np.int64)
    lv_mean = np.empty(64, np.float64)

    while top > 0:
        top -= 1
        node = stack[top]
        s, e, d = start[node], end_[node], depth[node]
        feature[node] = NO_FEATURE
        threshold[node] = 0.0
        cat_mask[node] = np.uint64(0)
        left[node] = -1
        right[node] = -1
        m = e - s
        if m < 2 * min_node or (max_depth >= 0 and d >= max_depth):
            continue
        y0 = y[work[s]]
        const = True
        for i in range(s + 1, e):
            if y[work[i]] != y0:
                const = False
                break
        if const:
            continue

        # mtry features without replacement, examined in ascending order
        for j in range(p):
            feat_buf[j] = j
        mt = mtry if mtry < p else p
        for j in range(mt):
            k = j + np.random.randint(0, p - j)
            tmp = feat_buf[j]
            feat_buf[j] = feat_buf[k]
            feat_buf[k] = tmp
        chosen = np.sort(feat_buf[:mt])

        tot = 0.0
        for i in range(s, e):
            tot += y[work[i]]

        best_gain = -1.0
        best_f = -1
        best_thr = 0.0
        best_mask = np.uint64(0)
        best_is_cat = False

        for ci in range(mt):
            f = chosen[ci]
            if is_cat[f]:
                for l in range(64):
                    lv_cnt[l] = 0
                    lv_sum[l] = 0.0
                for i in range(s, e):
                    c = np.int64(X[work[i], f])
                    lv_cnt[c] += 1
                    lv_sum[c] += y[work[i]]
                L = 0
                for l in range(64):
                    if lv_cnt[l] > 0:
                        present[L] = l
                        L += 1
                if L < 2:
                    continue
                if L <= 5:
                    # exhaustive proper binary partitions, level present[0] fixed left
                    n_splits = (1 << (L - 1)) - 1
                    for mnum in range(n_splits):
                        mask = np.uint64(1) << np.uint64(present[0])
                        nl = lv_cnt[present[0]]
                        sl = lv_sum[present[0]]
                        for b in range(L - 1):
                            if (mnum >> b) & 1 == 1:
                                lev = present[b + 1]
                                mask |= np.uint64(1) << np.uint64(lev)
                                nl += lv_cnt[lev]
                                sl += lv_sum[lev]
                        nr = m - nl
                        if nl < min_node or nr < min_node:
                            continue
                        sr = tot - sl
                        gain = sl * sl / nl + sr * sr / nr
                        if gain > best_gain:
                            best_gain = gain
                            best_f = f
                            best_mask = mask
                            best_is_cat = True
                else:
                    # order levels by in-node mean, scan ordered prefixes
                    for l in range(L):
                        lv_mean[l] = lv_sum[present[l]] / lv_cnt[present[l]]
                    order = np.argsort(lv_mean[:L], kind="mergesort")
                    mask = np.uint64(0)
                    nl = 0
                    sl = 0.0
                    for kk in range(L - 1):
                        lev = present[order[kk]]
                        mask |= np.uint64(1) << np.uint64(lev)
                        nl += lv_cnt[lev]
                        sl += lv_sum[lev]
                        nr = m - nl
                        if nl < min_node or nr < min_node:
                            continue
                        sr = tot - sl
                        gain = sl * sl / nl + sr * sr / nr
                        if gain > best_gain:
                            best_gain = gain
                            best_f = f
                            best_mask = mask
                            best_is_cat = True
            else:
                vals = np.empty(m, np.float64)
                for i in range(m):
                    vals[i] = X[work[s + i], f]
                order = np.argsort(vals, kind="mergesort")
                run = 0.0
                for i in range(m - 1):
                    run += y[work[s + order[i]]]
                    v_here = vals[order[i]]
                    v_next = vals[order[i + 1]]
                    if v_next <= v_here:
                        continue
                    nl = i + 1
                    nr = m - nl
                    if nl < min_node or nr < min_node:
                        continue
                    sr = tot - run
                    gain = run * run / nl + sr * sr / nr
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        best_thr = 0.5 * (v_here + v_next)
                        best_is_cat = False
                        best_mask = np.uint64(0)

        if best_f < 0:
            continue

        # stable partition of work[s:e]
        tmp_buf = np.empty(m, np.int32)
        nl = 0
        nr = 0
        for i in range(s, e):
            r = work[i]
            if _node_is_left(X[r, best_f], best_is_cat, best_thr, best_mask):
                tmp_buf[nl] = r
                nl += 1
            else:
                nr += 1
                tmp_buf[m - nr] = r
        for i in range(nl):
            work[s + i] = tmp_buf[i]
        for i in range(m - nl):
            work[s + nl + i] = tmp_buf[m - 1 - i]

        feature[node] = best_f
        threshold[node] = best_thr if not best_is_cat else np.nan
        cat_mask[node] = best_mask
        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        left[node] = lid
        right[node] = rid
        start[lid] = s
        end_[lid] = s + nl
        depth[lid] = d + 1
        start[rid] = s + nl
        end_[rid] = e
        depth[rid] = d + 1
        stack[top] = lid
        top += 1
        stack[top] = rid
        top += 1

    return n_nodes, inbag


@njit(cache=True)
def forest_apply(X, node_off, feature, threshold, cat_mask, left, right, is_cat):
    """Leaf (local node id) per tree per row: shape (T, n)."""
    T = node_off.shape[0] - 1
    n = X.shape[0]
    out = np.empty((T, n), np.int32)
    for t in range(T):
        o = node_off[t]
        for i in range(n):
            node = 0
            while feature[o + node] != NO_FEATURE:
                f = feature[o + node]
                if _node_is_left(X[i, f], is_cat[f] == 1, threshold[o + node], cat_mask[o + node]):
                    node = left[o + node]
                else:
                    node = right[o + node]
            out[t, i] = node
    return out


@njit(cache=True)
def predict_mean_kernel(leaves, node_off, leaf_value):
    T, n = leaves.shape
    out = np.zeros(n)
    for t in range(T):
        o = node_off[t]
        for i in range(n):
            out[i] += leaf_value[o + leaves[t, i]]
    return out / T


@njit(cache=True)
def meinshausen_weights(leaves, node_off, rows_start, rows_count, rows_all, n_train):
    """Per-query normalized training-row weights, shape (n_query, n_train)."""
    T, nq = leaves.shape
    W = np.zeros((nq, n_train))
    for i in range(nq):
        for t in range(T):
            g = node_off[t] + leaves[t, i]
            c = rows_count[g]
            wi = 1.0 / (T * c)
            st = rows_start[g]
            for rpos in range(st, st + c):
                W[i, rows_all[rpos]] += wi
    return W


@njit(cache=True)
def weighted_quantiles(W, y_order, y_sorted, qs):
    """inf{y : sum_i w_i 1{Y_i <= y} >= q} per query and level."""
    nq, n_train = W.shape
    out = np.empty((qs.shape[0], nq))
    for i in range(nq):
        for k in range(qs.shape[0]):
            cum = 0.0
            val = y_sorted[n_train - 1]
            for j in range(n_train):
                cum += W[i, y_order[j]]
                if cum >= qs[k] - 1e-12:
                    val = y_sorted[j]
                    break
            out[k, i] = val
    return out
