"""Hot inner loops, with numba and pure-numpy implementations.

The numba path is used when numba imports and ``SPARE_LAB_NUMBA`` is not
``"0"``.  Both paths expose the same signatures; ``numpy_kernels`` and
``numba_kernels`` are importable directly for benchmarking and
cross-checking.
"""
import math
import os
import types

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


# --------------------------------------------------------------------------
# pure numpy
# --------------------------------------------------------------------------

def _adam_update_np(param, grad, m, v, lr, beta1, beta2, eps, t):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    lr_t = lr * math.sqrt(1.0 - beta2 ** t) / (1.0 - beta1 ** t)
    param -= lr_t * m / (np.sqrt(v) + eps)


def _mixture_logpdf_np(obs, cur, mu, var, member, vdef):
    # obs, cur: (U, P); mu, var: (S, P); member: (S, U) uint8; vdef: (P,)
    n_obj, n_prop = obs.shape
    counts = member.sum(axis=0)
    out = -0.5 * (LOG_2PI + np.log(vdef)[None, :] + (obs - cur) ** 2 / vdef[None, :])
    hit = np.nonzero(counts)[0]
    if hit.size == 0 or mu.shape[0] == 0:
        return out
    # component log-densities, shape (S, U_hit, P)
    diff = obs[hit][None, :, :] - mu[:, None, :]
    comp = -0.5 * (LOG_2PI + np.log(var)[:, None, :] + diff ** 2 / var[:, None, :])
    mask = member[:, hit].astype(bool)[:, :, None]
    comp = np.where(mask, comp, -np.inf)
    top = comp.max(axis=0)
    lse = top + np.log(np.exp(comp - top[None]).sum(axis=0))
    out[hit] = lse - np.log(counts[hit].astype(np.float64))[:, None]
    return out


def _kmeans_assign_np(points, centers):
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1).astype(np.int64), d2


def _support_matrix_np(xyz, dims, tol):
    # sup[i, j] is True when object j rests directly on top of object i.
    top = xyz[:, 2] + dims[:, 2]
    dz = np.abs(xyz[None, :, 2] - top[:, None])
    dx = np.abs(xyz[None, :, 0] - xyz[:, None, 0])
    dy = np.abs(xyz[None, :, 1] - xyz[:, None, 1])
    sup = (dz < tol) & (dx <= 0.5 * dims[:, None, 0]) & (dy <= 0.5 * dims[:, None, 1])
    np.fill_diagonal(sup, False)
    return sup


def _pairwise_sqdist_np(xyz):
    diff = xyz[:, None, :] - xyz[None, :, :]
    return (diff * diff).sum(axis=2)


def _softplus_np(r):
    return np.maximum(r, 0.0) + np.log1p(np.exp(-np.abs(r)))


def _sigmoid_np(r):
    return 0.5 * (1.0 + np.tanh(0.5 * r))


def _act_np(z, act):
    if act == 0:
        return np.maximum(z, 0.0)
    if act == 1:
        return np.tanh(z)
    return _softplus_np(z)


def _dact_np(z, a, act):
    if act == 0:
        return (z > 0.0).astype(np.float64)
    if act == 1:
        return 1.0 - a * a
    return _sigmoid_np(z)


def _run_epochs_np(params, grad, m, v, t, sizes, act, xs, target, aux, w, perms, batch,
                   phase, lr, beta1, beta2, eps, floor_std):
    """Minibatch Adam epochs for one MLP stored flat in ``params``.

    phase 0 fits the mean against ``target`` with inverse variances ``aux``;
    phase 1 fits the variance head against squared residuals ``target``.
    Returns the updated Adam step counter.
    """
    n_layers = sizes.shape[0] - 1
    offs = [0]
    for i in range(n_layers):
        offs.append(offs[-1] + sizes[i] * sizes[i + 1] + sizes[i + 1])
    W = [params[offs[i]:offs[i] + sizes[i] * sizes[i + 1]].reshape(sizes[i], sizes[i + 1]) for i in range(n_layers)]
    B = [params[offs[i] + sizes[i] * sizes[i + 1]:offs[i + 1]] for i in range(n_layers)]
    gW = [grad[offs[i]:offs[i] + sizes[i] * sizes[i + 1]].reshape(sizes[i], sizes[i + 1]) for i in range(n_layers)]
    gB = [grad[offs[i] + sizes[i] * sizes[i + 1]:offs[i + 1]] for i in range(n_layers)]
    n = xs.shape[0]
    for e in range(perms.shape[0]):
        perm = perms[e]
        for start in range(0, n, batch):
            idx = perm[start:start + batch]
            nb = idx.shape[0]
            zs, acts = [], [xs[idx]]
            for i in range(n_layers):
                z = acts[-1] @ W[i] + B[i]
                zs.append(z)
                acts.append(z if i == n_layers - 1 else _act_np(z, act))
            out = acts[-1]
            wb = (w[idx] / nb)[:, None]
            if phase == 0:
                g = -2.0 * (target[idx] - out) * aux[idx] * wb
            else:
                var = _softplus_np(out) + floor_std
                g = (1.0 / var - target[idx] / (var * var)) * _sigmoid_np(out) * wb
            for i in range(n_layers - 1, -1, -1):
                np.matmul(acts[i].T, g, out=gW[i])
                gB[i][:] = g.sum(axis=0)
                if i > 0:
                    g = (g @ W[i].T) * _dact_np(zs[i - 1], acts[i], act)
            t += 1
            _adam_update_np(params, grad, m, v, lr, beta1, beta2, eps, t)
    return t


numpy_kernels = types.SimpleNamespace(
    adam_update=_adam_update_np,
    mixture_logpdf=_mixture_logpdf_np,
    kmeans_assign=_kmeans_assign_np,
    support_matrix=_support_matrix_np,
    pairwise_sqdist=_pairwise_sqdist_np,
    run_epochs=_run_epochs_np,
    backend="numpy",
)


# --------------------------------------------------------------------------
# numba
# --------------------------------------------------------------------------

def _build_numba():
    from numba import njit

    # fastmath lets the sqrt/divide loop vectorise; it dominates a training step
    @njit(cache=True, fastmath=True)
    def adam_update(param, grad, m, v, lr, beta1, beta2, eps, t):
        lr_t = lr * math.sqrt(1.0 - beta2 ** t) / (1.0 - beta1 ** t)
        p = param.reshape(-1)
        g = grad.reshape(-1)
        mm = m.reshape(-1)
        vv = v.reshape(-1)
        for k in range(p.size):
            gk = g[k]
            mk = beta1 * mm[k] + (1.0 - beta1) * gk
            vk = beta2 * vv[k] + (1.0 - beta2) * gk * gk
            mm[k] = mk
            vv[k] = vk
            p[k] -= lr_t * mk / (math.sqrt(vk) + eps)

    @njit(cache=True)
    def mixture_logpdf(obs, cur, mu, var, member, vdef):
        n_obj, n_prop = obs.shape
        n_slot = mu.shape[0]
        out = np.empty((n_obj, n_prop))
        for o in range(n_obj):
            cnt = 0
            for s in range(n_slot):
                cnt += member[s, o]
            for p in range(n_prop):
                if cnt == 0:
                    d = obs[o, p] - cur[o, p]
                    out[o, p] = -0.5 * (LOG_2PI + math.log(vdef[p]) + d * d / vdef[p])
                    continue
                top = -np.inf
                for s in range(n_slot):
                    if member[s, o]:
                        d = obs[o, p] - mu[s, p]
                        c = -0.5 * (LOG_2PI + math.log(var[s, p]) + d * d / var[s, p])
                        if c > top:
                            top = c
                acc = 0.0
                for s in range(n_slot):
                    if member[s, o]:
                        d = obs[o, p] - mu[s, p]
                        c = -0.5 * (LOG_2PI + math.log(var[s, p]) + d * d / var[s, p])
                        acc += math.exp(c - top)
                out[o, p] = top + math.log(acc) - math.log(cnt)
        return out

    @njit(cache=True)
    def kmeans_assign(points, centers):
        n, dim = points.shape
        k = centers.shape[0]
        labels = np.empty(n, dtype=np.int64)
        d2 = np.empty((n, k))
        for i in range(n):
            best = np.inf
            arg = 0
            for j in range(k):
                acc = 0.0
                for f in range(dim):
                    diff = points[i, f] - centers[j, f]
                    acc += diff * diff
                d2[i, j] = acc
                if acc < best:
                    best = acc
                    arg = j
            labels[i] = arg
        return labels, d2

    @njit(cache=True)
    def support_matrix(xyz, dims, tol):
        n = xyz.shape[0]
        sup = np.zeros((n, n), dtype=np.bool_)
        for i in range(n):
            top = xyz[i, 2] + dims[i, 2]
            for j in range(n):
                if i == j:
                    continue
                if (abs(xyz[j, 2] - top) < tol
                        and abs(xyz[j, 0] - xyz[i, 0]) <= 0.5 * dims[i, 0]
                        and abs(xyz[j, 1] - xyz[i, 1]) <= 0.5 * dims[i, 1]):
                    sup[i, j] = True
        return sup

    @njit(cache=True)
    def pairwise_sqdist(xyz):
        n, dim = xyz.shape
        out = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                acc = 0.0
                for f in range(dim):
                    d = xyz[i, f] - xyz[j, f]
                    acc += d * d
                out[i, j] = acc
                out[j, i] = acc
        return out

    @njit(cache=True)
    def _softplus(r):
        return max(r, 0.0) + math.log1p(math.exp(-abs(r)))

    @njit(cache=True)
    def _sigmoid(r):
        return 0.5 * (1.0 + math.tanh(0.5 * r))

    @njit(cache=True)
    def run_epochs(params, grad, m, v, t, sizes, act, xs, target, aux, w, perms, batch,
                   phase, lr, beta1, beta2, eps, floor_std):
        n_layers = sizes.shape[0] - 1
        offs = np.zeros(n_layers + 1, dtype=np.int64)
        for i in range(n_layers):
            offs[i + 1] = offs[i] + sizes[i] * sizes[i + 1] + sizes[i + 1]
        n = xs.shape[0]
        d_out = sizes[n_layers]
        for e in range(perms.shape[0]):
            for start in range(0, n, batch):
                stop = min(start + batch, n)
                nb = stop - start
                a_prev = np.empty((nb, sizes[0]))
                for r in range(nb):
                    a_prev[r, :] = xs[perms[e, start + r]]
                zs = []
                acts = [a_prev]
                for i in range(n_layers):
                    wi = params[offs[i]:offs[i] + sizes[i] * sizes[i + 1]].reshape((sizes[i], sizes[i + 1]))
                    bi = params[offs[i] + sizes[i] * sizes[i + 1]:offs[i + 1]]
                    z = np.dot(acts[i], wi)
                    for r in range(nb):
                        for c in range(sizes[i + 1]):
                            z[r, c] += bi[c]
                    zs.append(z)
                    if i == n_layers - 1:
                        acts.append(z)
                    else:
                        a = np.empty_like(z)
                        for r in range(nb):
                            for c in range(sizes[i + 1]):
                                zz = z[r, c]
                                if act == 0:
                                    a[r, c] = zz if zz > 0.0 else 0.0
                                elif act == 1:
                                    a[r, c] = math.tanh(zz)
                                else:
                                    a[r, c] = _softplus(zz)
                        acts.append(a)
                out = acts[n_layers]
                g = np.empty((nb, d_out))
                for r in range(nb):
                    k = perms[e, start + r]
                    wb = w[k] / nb
                    for c in range(d_out):
                        if phase == 0:
                            g[r, c] = -2.0 * (target[k, c] - out[r, c]) * aux[k, c] * wb
                        else:
                            var = _softplus(out[r, c]) + floor_std[c]
                            g[r, c] = (1.0 / var - target[k, c] / (var * var)) * _sigmoid(out[r, c]) * wb
                for i in range(n_layers - 1, -1, -1):
                    gw = np.dot(acts[i].T, g)
                    base = offs[i]
                    cols = sizes[i + 1]
                    for r in range(sizes[i]):
                        for c in range(cols):
                            grad[base + r * cols + c] = gw[r, c]
                    bb = base + sizes[i] * cols
                    for c in range(cols):
                        acc = 0.0
                        for r in range(nb):
                            acc += g[r, c]
                        grad[bb + c] = acc
                    if i > 0:
                        wi = params[offs[i]:offs[i] + sizes[i] * sizes[i + 1]].reshape((sizes[i], sizes[i + 1]))
                        gp = np.dot(g, wi.T)
                        z = zs[i - 1]
                        a = acts[i]
                        for r in range(nb):
                            for c in range(sizes[i]):
                                if act == 0:
                                    d = 1.0 if z[r, c] > 0.0 else 0.0
                                elif act == 1:
                                    d = 1.0 - a[r, c] * a[r, c]
                                else:
                                    d = _sigmoid(z[r, c])
                                gp[r, c] *= d
                        g = gp
                t += 1
                adam_update(params, grad, m, v, lr, beta1, beta2, eps, t)
        return t

    return types.SimpleNamespace(
        adam_update=adam_update,
        mixture_logpdf=mixture_logpdf,
        kmeans_assign=kmeans_assign,
        support_matrix=support_matrix,
        pairwise_sqdist=pairwise_sqdist,
        run_epochs=run_epochs,
        backend="numba",
    )


try:
    numba_kernels = _build_numba()
except ImportError:  # pragma: no cover - numba is an optional accelerator
    numba_kernels = None

if numba_kernels is not None and os.environ.get("SPARE_LAB_NUMBA", "1") != "0":
    active = numba_kernels
else:
    active = numpy_kernels

BACKEND = active.backend
adam_update = active.adam_update
mixture_logpdf = active.mixture_logpdf
kmeans_assign = active.kmeans_assign
support_matrix = active.support_matrix
pairwise_sqdist = active.pairwise_sqdist
run_epochs = active.run_epochs
