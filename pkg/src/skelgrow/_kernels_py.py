"""Pure numpy implementations of the hot kernels.

Same signatures and semantics as the compiled ``_kernels`` extension; used
when the extension is unavailable or ``SKELGROW_PURE_PYTHON=1``.
"""
import numpy as np

NN_CHUNK = 256


def _stack(R, t):
    """(N,K,3,3),(N,K,3) -> (K, N*12) affine blocks."""
    N, K = R.shape[:2]
    M = np.concatenate([R, t[..., None]], axis=-1)
    return M.transpose(1, 0, 2, 3).reshape(K, N * 12)


def lbs_forward(x, w, R, t):
    """x (P,3), w (P,K), R (N,K,3,3), t (N,K,3) -> (N,P,3)."""
    N, P = R.shape[0], x.shape[0]
    B = (w @ _stack(R, t)).reshape(P, N, 3, 4)
    out = np.einsum("pnij,pj->npi", B[..., :3], x) + B[..., 3].transpose(1, 0, 2)
    return np.ascontiguousarray(out)


def lbs_backward(x, w, R, t, g):
    """Adjoint of :func:`lbs_forward` for upstream gradient ``g`` (N,P,3).

    Returns ``(grad_x, grad_w, grad_R, grad_t)``.
    """
    N, K = R.shape[:2]
    P = x.shape[0]
    Ms = _stack(R, t)
    xh = np.concatenate([x, np.ones((P, 1))], axis=1)
    gp = g.transpose(1, 0, 2)  # (P, N, 3)
    gM = (gp[..., None] * xh[:, None, None, :]).reshape(P, N * 12)
    grad_w = gM @ Ms.T
    GM = (w.T @ gM).reshape(K, N, 3, 4).transpose(1, 0, 2, 3)
    grad_R = np.ascontiguousarray(GM[..., :3])
    grad_t = np.ascontiguousarray(GM[..., 3])
    Rr = R.transpose(0, 2, 1, 3).reshape(N * 3, K * 3)
    A = (gp.reshape(P, N * 3) @ Rr).reshape(P, K, 3)
    grad_x = np.einsum("pk,pkj->pj", w, A)
    return grad_x, grad_w, grad_R, grad_t


def motion_kernels(point_traj, joint_traj):
    """Per point-joint variance of distance over frames, (N,P,3),(N,K,3) -> (P,K)."""
    d = np.linalg.norm(point_traj[:, :, None, :] - joint_traj[:, None, :, :], axis=-1)
    mu = d.mean(axis=0)
    return ((d - mu) ** 2).mean(axis=0)


def nearest_neighbors(a, b):
    """Brute-force nearest neighbour in ``b`` for each row of ``a``; first index wins ties."""
    m = a.shape[0]
    idx = np.empty(m, dtype=np.int64)
    d2 = np.empty(m)
    for s in range(0, m, NN_CHUNK):
        chunk = a[s : s + NN_CHUNK]
        diff = chunk[:, None, :] - b[None, :, :]
        dist = np.einsum("mqi,mqi->mq", diff, diff)
        j = np.argmin(dist, axis=1)
        idx[s : s + NN_CHUNK] = j
        d2[s : s + NN_CHUNK] = dist[np.arange(chunk.shape[0]), j]
    return idx, d2
