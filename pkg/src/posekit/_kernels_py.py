"""Pure numpy convolution kernels.

Reference backend used when the compiled extension is unavailable. All three
kernels loop over kernel taps and contract channels with einsum, one tap at a
time, so memory stays at the size of the input. Dense 1x1 stride-1
convolutions skip the tap loop and go straight to a batched matmul.
"""
import numpy as np

NAME = "python"


def _grouped(a, groups):
    n, c, h, w = a.shape
    return a.reshape(n, groups, c // groups, h, w)


def _dense_1x1(kh, kw, stride, padding, groups):
    return groups == 1 and kh == kw == 1 and stride == 1 and padding == 0


def conv2d_forward(x, w, stride, padding, groups):
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if _dense_1x1(kh, kw, stride, padding, groups):
        return np.matmul(w.reshape(cout, cin), x.reshape(n, cin, h * wd)).reshape(n, cout, h, wd)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xg = _grouped(xp, groups)
    wg = w.reshape(groups, cout // groups, cin_g, kh, kw)
    out = np.zeros((n, groups, cout // groups, ho, wo))
    for i in range(kh):
        for j in range(kw):
            win = xg[:, :, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            out += np.einsum("ngchw,goc->ngohw", win, wg[:, :, :, i, j], optimize=True)
    return out.reshape(n, cout, ho, wo)


def conv2d_grad_input(gy, w, in_h, in_w, stride, padding, groups):
    n, cout, ho, wo = gy.shape
    _, cin_g, kh, kw = w.shape
    if _dense_1x1(kh, kw, stride, padding, groups):
        return np.matmul(w.reshape(cout, cin_g).T, gy.reshape(n, cout, ho * wo)).reshape(n, cin_g, in_h, in_w)
    gxp = np.zeros((n, groups, cin_g, in_h + 2 * padding, in_w + 2 * padding))
    gyg = _grouped(gy, groups)
    wg = w.reshape(groups, cout // groups, cin_g, kh, kw)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += np.einsum(
                "ngohw,goc->ngchw", gyg, wg[:, :, :, i, j], optimize=True
            )
    gx = gxp[:, :, :, padding:padding + in_h, padding:padding + in_w]
    return np.ascontiguousarray(gx.reshape(n, groups * cin_g, in_h, in_w))


def conv2d_grad_weight(x, gy, kh, kw, stride, padding, groups):
    n, cin, h, wd = x.shape
    _, cout, ho, wo = gy.shape
    if _dense_1x1(kh, kw, stride, padding, groups):
        gw = np.matmul(gy.reshape(n, cout, ho * wo), x.reshape(n, cin, h * wd).transpose(0, 2, 1)).sum(axis=0)
        return gw.reshape(cout, cin, 1, 1)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xg = _grouped(xp, groups)
    gyg = _grouped(gy, groups)
    gw = np.zeros((groups, cout // groups, cin // groups, kh, kw))
    for i in range(kh):
        for j in range(kw):
            win = xg[:, :, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            gw[:, :, :, i, j] = np.einsum("ngchw,ngohw->goc", win, gyg, optimize=True)
    return gw.reshape(cout, cin // groups, kh, kw)
