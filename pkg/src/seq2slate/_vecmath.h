#ifndef S2SL_VECMATH_H
#define S2SL_VECMATH_H

#include <math.h>

/* When the build links glibc's libmvec (S2SL_LIBMVEC), declaring tanh as a
   SIMD function lets gcc call the vector variant inside vectorised loops. */
#if defined(S2SL_LIBMVEC) && defined(__GNUC__) && !defined(__clang__) && defined(__x86_64__)
__attribute__((simd("notinbranch"))) extern double tanh(double);
/* one clone per vector width; the loader picks the widest the CPU supports */
#define S2SL_CLONES __attribute__((noinline, target_clones("avx512f", "avx2", "default")))
#elif defined(__GNUC__)
#define S2SL_CLONES __attribute__((noinline))
#else
#define S2SL_CLONES
#endif

/* In-place tanh over a contiguous block. Kept out of line: inlined into a
   large caller the loop may no longer be vectorised. */
S2SL_CLONES
static void s2sl_vtanh(double *x, int n)
{
    for (int k = 0; k < n; k++)
        x[k] = tanh(x[k]);
}

#endif
