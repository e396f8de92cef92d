"""Instruction set of the evaluation tape.

Both kernels (``_ckernel.pyx`` and ``_pykernel.py``) interpret the same
flat int64 code array; the numbers here must match the enum in the
Cython source.

Layouts (all operands are slot indices unless noted)::

    LIN     dst n nterms (src cidx)*       dst[k] = sum c*src[k]
    MULS    dst s src n cidx               dst[k] = c*s*src[k]
    DIVS    dst s src n cidx tag           dst[k] = c*src[k]/s
    MATVEC  dst m src n trans cidx         dst = c*M@src   (M row-major n*n)
    SOLVE   dst m src n trans cidx tag scr M@dst = src, then dst *= c
    EXPR    dst stack plen prog*           stack-machine scalar expression

Expression programs push constants (``X_PUSHC cidx``) and slots
(``X_PUSHS slot``); ``X_DIV``, ``X_SQRT`` and ``X_POW`` carry an error tag.
"""

OP_END = 0
OP_LIN = 1
OP_MULS = 2
OP_DIVS = 3
OP_MATVEC = 4
OP_SOLVE = 5
OP_EXPR = 6

X_PUSHC = 1
X_PUSHS = 2
X_ADD = 3
X_SUB = 4
X_MUL = 5
X_DIV = 6
X_NEG = 7
X_SIN = 8
X_COS = 9
X_EXP = 10
X_SQRT = 11
X_ABS = 12
X_MIN = 13
X_MAX = 14
X_POW = 15

ERR_OK = 0
ERR_SINGULAR = 1
ERR_DIV_ZERO = 2
ERR_SQRT_NEG = 3
ERR_POW_DOMAIN = 4
ERR_NONFINITE = 5

# relative pivot threshold for SOLVE
PIVOT_TOL = 1e-13
