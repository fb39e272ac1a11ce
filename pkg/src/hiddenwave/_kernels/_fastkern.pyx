# Compiled hot kernels: elementwise sin/cos (the dominant cost of
# sine-activated networks on CPUs without SIMD libm in NumPy) and the
# 3x3 valid cross-correlation used by the wave stencil.
#
# This translation unit is compiled with -ffast-math so gcc vectorizes the
# sin/cos loops through libmvec. Accuracy versus the scalar libm is a few
# ulp; the parity tests pin the tolerance.

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef extern from *:
    """
    #include <math.h>

    static void hw_sin_loop(const double* restrict x, double* restrict out, long n) {
        #pragma omp simd
        for (long i = 0; i < n; i++) out[i] = sin(x[i]);
    }

    static void hw_cos_loop(const double* restrict x, double* restrict out, long n) {
        #pragma omp simd
        for (long i = 0; i < n; i++) out[i] = cos(x[i]);
    }

    static void hw_corr3x3(const double* restrict f, const double* restrict k,
                           double* restrict out, long ny, long nx) {
        const double k00 = k[0], k01 = k[1], k02 = k[2];
        const double k10 = k[3], k11 = k[4], k12 = k[5];
        const double k20 = k[6], k21 = k[7], k22 = k[8];
        for (long i = 0; i < ny - 2; i++) {
            const double* r0 = f + i * nx;
            const double* r1 = r0 + nx;
            const double* r2 = r1 + nx;
            double* o = out + i * (nx - 2);
            #pragma omp simd
            for (long j = 0; j < nx - 2; j++) {
                o[j] = k00 * r0[j] + k01 * r0[j + 1] + k02 * r0[j + 2]
                     + k10 * r1[j] + k11 * r1[j + 1] + k12 * r1[j + 2]
                     + k20 * r2[j] + k21 * r2[j + 1] + k22 * r2[j + 2];
            }
        }
    }
    """
    void hw_sin_loop(const double* x, double* out, long n) nogil
    void hw_cos_loop(const double* x, double* out, long n) nogil
    void hw_corr3x3(const double* f, const double* k, double* out,
                    long ny, long nx) nogil


def sin_arr(cnp.ndarray x):
    cdef cnp.ndarray xc = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray out = np.empty_like(xc)
    cdef long n = xc.size
    hw_sin_loop(<const double*> cnp.PyArray_DATA(xc),
                <double*> cnp.PyArray_DATA(out), n)
    return out


def cos_arr(cnp.ndarray x):
    cdef cnp.ndarray xc = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray out = np.empty_like(xc)
    cdef long n = xc.size
    hw_cos_loop(<const double*> cnp.PyArray_DATA(xc),
                <double*> cnp.PyArray_DATA(out), n)
    return out


def correlate3x3_valid(cnp.ndarray field, cnp.ndarray kernel):
    """Valid-mode 2D cross-correlation of `field` with a 3x3 kernel."""
    cdef cnp.ndarray f = np.ascontiguousarray(field, dtype=np.float64)
    cdef cnp.ndarray k = np.ascontiguousarray(kernel, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 3 or f.shape[1] < 3:
        raise ValueError(f"field must be at least 3x3, got {np.shape(field)}")
    if k.ndim != 2 or k.shape[0] != 3 or k.shape[1] != 3:
        raise ValueError(f"kernel must be 3x3, got {np.shape(kernel)}")
    cdef long ny = f.shape[0], nx = f.shape[1]
    cdef cnp.ndarray out = np.empty((ny - 2, nx - 2), dtype=np.float64)
    hw_corr3x3(<const double*> cnp.PyArray_DATA(f),
               <const double*> cnp.PyArray_DATA(k),
               <double*> cnp.PyArray_DATA(out), ny, nx)
    return out
