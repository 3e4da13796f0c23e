# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled direct-loop convolution kernels.

Same signatures and semantics as ``posekit._kernels_py``. Loops run without the
GIL; the innermost loop walks the contiguous width axis with its valid range
precomputed so there is no per-element bounds test.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

NAME = "cython"


cdef inline Py_ssize_t _ceil_div(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    # b > 0; works for negative a
    if a >= 0:
        return (a + b - 1) // b
    return -((-a) // b)


cdef inline void _valid_range(Py_ssize_t k, Py_ssize_t stride, Py_ssize_t padding,
                              Py_ssize_t size_in, Py_ssize_t size_out,
                              Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output positions o with 0 <= o*stride - padding + k < size_in
    cdef Py_ssize_t a = _ceil_div(padding - k, stride)
    cdef Py_ssize_t b = (size_in - 1 + padding - k)
    if a < 0:
        a = 0
    if b < 0:
        b = -1
    else:
        b = b // stride
    b += 1
    if b > size_out:
        b = size_out
    lo[0] = a
    hi[0] = b


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                   Py_ssize_t stride, Py_ssize_t padding, Py_ssize_t groups):
    cdef Py_ssize_t n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cout = w.shape[0], cin_g = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * padding - kw) // stride + 1
    cdef Py_ssize_t cout_g = cout // groups
    out_arr = np.zeros((n, cout, ho, wo))
    cdef double[:, :, :, ::1] y = out_arr
    cdef Py_ssize_t b, co, ic, ci, i, j, oh, ow, ih, oh_lo, oh_hi, ow_lo, ow_hi, off
    cdef double wv
    cdef double* yrow
    cdef double* xrow
    with nogil:
        for b in range(n):
            for co in range(cout):
                for ic in range(cin_g):
                    ci = (co // cout_g) * cin_g + ic
                    for i in range(kh):
                        _valid_range(i, stride, padding, h, ho, &oh_lo, &oh_hi)
                        for j in range(kw):
                            _valid_range(j, stride, padding, wd, wo, &ow_lo, &ow_hi)
                            wv = w[co, ic, i, j]
                            off = j - padding
                            for oh in range(oh_lo, oh_hi):
                                ih = oh * stride - padding + i
                                yrow = &y[b, co, oh, 0]
                                xrow = &x[b, ci, ih, 0]
                                if stride == 1:
                                    for ow in range(ow_lo, ow_hi):
                                        yrow[ow] += wv * xrow[ow + off]
                                else:
                                    for ow in range(ow_lo, ow_hi):
                                        yrow[ow] += wv * xrow[ow * stride + off]
    return out_arr


def conv2d_grad_input(double[:, :, :, ::1] gy, double[:, :, :, ::1] w,
                      Py_ssize_t in_h, Py_ssize_t in_w,
                      Py_ssize_t stride, Py_ssize_t padding, Py_ssize_t groups):
    cdef Py_ssize_t n = gy.shape[0], cout = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t cin_g = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t cout_g = cout // groups
    out_arr = np.zeros((n, cin_g * groups, in_h, in_w))
    cdef double[:, :, :, ::1] gx = out_arr
    cdef Py_ssize_t b, co, ic, ci, i, j, oh, ow, ih, oh_lo, oh_hi, ow_lo, ow_hi, off
    cdef double wv
    cdef double* grow
    cdef double* xrow
    with nogil:
        for b in range(n):
            for co in range(cout):
                for ic in range(cin_g):
                    ci = (co // cout_g) * cin_g + ic
                    for i in range(kh):
                        _valid_range(i, stride, padding, in_h, ho, &oh_lo, &oh_hi)
                        for j in range(kw):
                            _valid_range(j, stride, padding, in_w, wo, &ow_lo, &ow_hi)
                            wv = w[co, ic, i, j]
                            off = j - padding
                            for oh in range(oh_lo, oh_hi):
                                ih = oh * stride - padding + i
                                grow = &gy[b, co, oh, 0]
                                xrow = &gx[b, ci, ih, 0]
                                if stride == 1:
                                    for ow in range(ow_lo, ow_hi):
                                        xrow[ow + off] += wv * grow[ow]
                                else:
                                    for ow in range(ow_lo, ow_hi):
                                        xrow[ow * stride + off] += wv * grow[ow]
    return out_arr


def conv2d_grad_weight(double[:, :, :, ::1] x, double[:, :, :, ::1] gy,
                       Py_ssize_t kh, Py_ssize_t kw,
                       Py_ssize_t stride, Py_ssize_t padding, Py_ssize_t groups):
    cdef Py_ssize_t n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cout = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t cin_g = cin // groups, cout_g = cout // groups
    out_arr = np.zeros((cout, cin_g, kh, kw))
    cdef double[:, :, :, ::1] gw = out_arr
    cdef Py_ssize_t b, co, ic, ci, i, j, oh, ow, ih, oh_lo, oh_hi, ow_lo, ow_hi, off
    cdef double acc
    cdef double* grow
    cdef double* xrow
    with nogil:
        for co in range(cout):
            for ic in range(cin_g):
                ci = (co // cout_g) * cin_g + ic
                for i in range(kh):
                    _valid_range(i, stride, padding, h, ho, &oh_lo, &oh_hi)
                    for j in range(kw):
                        _valid_range(j, stride, padding, wd, wo, &ow_lo, &ow_hi)
                        off = j - padding
                        acc = 0.0
                        for b in range(n):
                            for oh in range(oh_lo, oh_hi):
                                ih = oh * stride - padding + i
                                grow = &gy[b, co, oh, 0]
                                xrow = &x[b, ci, ih, 0]
                                if stride == 1:
                                    for ow in range(ow_lo, ow_hi):
                                        acc += grow[ow] * xrow[ow + off]
                                else:
                                    for ow in range(ow_lo, ow_hi):
                                        acc += grow[ow] * xrow[ow * stride + off]
                        gw[co, ic, i, j] = acc
    return out_arr
