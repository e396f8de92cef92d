# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled tape interpreter and RK4 driver.

Opcode numbers mirror ``_opcodes.py``.
"""

from libc.math cimport sin, cos, exp, sqrt, fabs, pow, isfinite, floor, INFINITY
from libc.errno cimport errno, EDOM, ERANGE
import numpy as np

NAME = "c"

cdef enum:
    OP_END = 0
    OP_LIN = 1
    OP_MULS = 2
    OP_DIVS = 3
    OP_MATVEC = 4
    OP_SOLVE = 5
    OP_EXPR = 6

cdef enum:
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

cdef enum:
    ERR_OK = 0
    ERR_SINGULAR = 1
    ERR_DIV_ZERO = 2
    ERR_SQRT_NEG = 3
    ERR_POW_DOMAIN = 4
    ERR_NONFINITE = 5

cdef double PIVOT_TOL = 1e-13


cdef bint _solve(double[::1] s, Py_ssize_t dst, Py_ssize_t m, Py_ssize_t src, Py_ssize_t n,
                 bint trans, double c, Py_ssize_t scr) nogil:
    cdef Py_ssize_t a = scr, b = scr + n * n, i, j, r, col, piv
    cdef double amax = 0.0, v, best, p, fac, acc, tol
    for i in range(n):
        for j in range(n):
            v = s[m + j * n + i] if trans else s[m + i * n + j]
            s[a + i * n + j] = v
            if fabs(v) > amax:
                amax = fabs(v)
        s[b + i] = s[src + i]
    if not amax > 0.0:
        return False
    tol = PIVOT_TOL * amax
    for col in range(n):
        piv = col
        best = fabs(s[a + col * n + col])
        for r in range(col + 1, n):
            v = fabs(s[a + r * n + col])
            if v > best:
                best = v
                piv = r
        if not best > tol:
            return False
        if piv != col:
            for j in range(n):
                v = s[a + col * n + j]
                s[a + col * n + j] = s[a + piv * n + j]
                s[a + piv * n + j] = v
            v = s[b + col]
            s[b + col] = s[b + piv]
            s[b + piv] = v
        p = s[a + col * n + col]
        for r in range(col + 1, n):
            fac = s[a + r * n + col] / p
            if fac != 0.0:
                for j in range(col, n):
                    s[a + r * n + j] -= fac * s[a + col * n + j]
                s[b + r] -= fac * s[b + col]
    for i in range(n - 1, -1, -1):
        acc = s[b + i]
        for j in range(i + 1, n):
            acc -= s[a + i * n + j] * s[dst + j]
        s[dst + i] = acc / s[a + i * n + i]
    if c != 1.0:
        for i in range(n):
            s[dst + i] *= c
    return True


cdef int _exec(const long long[::1] code, const double[::1] consts, double[::1] s, long long* tag) nogil:
    cdef Py_ssize_t pc = 0, dst, n, nt, k, j, i, src, m, q, end, sp, base
    cdef long long op, x
    cdef double acc, c, d, a, b
    while True:
        op = code[pc]
        if op == OP_LIN:
            dst = code[pc + 1]
            n = code[pc + 2]
            nt = code[pc + 3]
            pc += 4
            for k in range(n):
                acc = 0.0
                for j in range(nt):
                    acc += consts[code[pc + 2 * j + 1]] * s[code[pc + 2 * j] + k]
                s[dst + k] = acc
            pc += 2 * nt
        elif op == OP_MULS:
            dst = code[pc + 1]
            c = consts[code[pc + 5]] * s[code[pc + 2]]
            src = code[pc + 3]
            n = code[pc + 4]
            for k in range(n):
                s[dst + k] = c * s[src + k]
            pc += 6
        elif op == OP_DIVS:
            dst = code[pc + 1]
            d = s[code[pc + 2]]
            src = code[pc + 3]
            n = code[pc + 4]
            c = consts[code[pc + 5]]
            if d == 0.0:
                tag[0] = code[pc + 6]
                return ERR_SINGULAR
            for k in range(n):
                s[dst + k] = c * s[src + k] / d
            pc += 7
        elif op == OP_MATVEC:
            dst = code[pc + 1]
            m = code[pc + 2]
            src = code[pc + 3]
            n = code[pc + 4]
            c = consts[code[pc + 6]]
            if code[pc + 5]:
                for i in range(n):
                    acc = 0.0
                    for j in range(n):
                        acc += s[m + j * n + i] * s[src + j]
                    s[dst + i] = c * acc
            else:
                for i in range(n):
                    acc = 0.0
                    for j in range(n):
                        acc += s[m + i * n + j] * s[src + j]
                    s[dst + i] = c * acc
            pc += 7
        elif op == OP_SOLVE:
            if not _solve(s, code[pc + 1], code[pc + 2], code[pc + 3], code[pc + 4],
                          code[pc + 5] != 0, consts[code[pc + 6]], code[pc + 8]):
                tag[0] = code[pc + 7]
                return ERR_SINGULAR
            pc += 9
        elif op == OP_EXPR:
            dst = code[pc + 1]
            base = code[pc + 2]
            q = pc + 4
            end = q + code[pc + 3]
            sp = base - 1
            while q < end:
                x = code[q]
                if x == X_PUSHS:
                    sp += 1
                    s[sp] = s[code[q + 1]]
                    q += 2
                elif x == X_PUSHC:
                    sp += 1
                    s[sp] = consts[code[q + 1]]
                    q += 2
                elif x == X_ADD:
                    s[sp - 1] = s[sp - 1] + s[sp]
                    sp -= 1
                    q += 1
                elif x == X_SUB:
                    s[sp - 1] = s[sp - 1] - s[sp]
                    sp -= 1
                    q += 1
                elif x == X_MUL:
                    s[sp - 1] = s[sp - 1] * s[sp]
                    sp -= 1
                    q += 1
                elif x == X_DIV:
                    if s[sp] == 0.0:
                        tag[0] = code[q + 1]
                        return ERR_DIV_ZERO
                    s[sp - 1] = s[sp - 1] / s[sp]
                    sp -= 1
                    q += 2
                elif x == X_NEG:
                    s[sp] = -s[sp]
                    q += 1
                elif x == X_SQRT:
                    if s[sp] < 0.0:
                        tag[0] = code[q + 1]
                        return ERR_SQRT_NEG
                    s[sp] = sqrt(s[sp])
                    q += 2
                elif x == X_POW:
                    a = s[sp - 1]
                    b = s[sp]
                    # same domain rules as math.pow
                    if (a == 0.0 and b < 0.0) or (a < 0.0 and isfinite(b) and b != floor(b)):
                        tag[0] = code[q + 1]
                        return ERR_POW_DOMAIN
                    s[sp - 1] = pow(a, b)
                    sp -= 1
                    q += 2
                elif x == X_SIN:
                    s[sp] = sin(s[sp])
                    q += 1
                elif x == X_COS:
                    s[sp] = cos(s[sp])
                    q += 1
                elif x == X_EXP:
                    s[sp] = exp(s[sp])
                    q += 1
                elif x == X_ABS:
                    s[sp] = fabs(s[sp])
                    q += 1
                elif x == X_MIN:
                    if s[sp] < s[sp - 1]:
                        s[sp - 1] = s[sp]
                    sp -= 1
                    q += 1
                elif x == X_MAX:
                    if s[sp] > s[sp - 1]:
                        s[sp - 1] = s[sp]
                    sp -= 1
                    q += 1
                else:
                    return -1
            s[dst] = s[sp]
            pc = end
        elif op == OP_END:
            return ERR_OK
        else:
            return -1


def run(code, consts, double[::1] slots):
    """Evaluate the tape in place on ``slots``.  Returns (status, tag)."""
    cdef const long long[::1] c = np.ascontiguousarray(code, dtype=np.int64)
    cdef const double[::1] k = np.ascontiguousarray(consts, dtype=np.float64)
    cdef long long tag = 0
    cdef int st
    with nogil:
        st = _exec(c, k, slots, &tag)
    if st < 0:
        raise RuntimeError("corrupt tape")
    return st, tag


def integrate(code, consts, double[::1] slots, Py_ssize_t t_slot, Py_ssize_t x_slot,
              Py_ssize_t dx_slot, Py_ssize_t nx, double dt, double t_end,
              Py_ssize_t nsteps, Py_ssize_t record_every, double[:, ::1] out):
    """Classical RK4; same contract as the Python driver."""
    cdef const long long[::1] c = np.ascontiguousarray(code, dtype=np.int64)
    cdef const double[::1] kc = np.ascontiguousarray(consts, dtype=np.float64)
    cdef double[::1] x = np.array(slots[x_slot:x_slot + nx])
    cdef double[:, ::1] k = np.zeros((4, max(nx, 1)))
    cdef double[::1] comp = np.zeros(max(nx, 1))  # compensated summation
    cdef Py_ssize_t step, i, rec = 0, ns = slots.shape[0]
    cdef double t, tn, h, v, y
    cdef long long tag = 0
    cdef int st = 0
    with nogil:
        for step in range(nsteps):
            t = step * dt
            tn = (step + 1) * dt
            if tn > t_end:
                tn = t_end
            h = tn - t
            slots[t_slot] = t
            st = _exec(c, kc, slots, &tag)
            if st:
                break
            for i in range(nx):
                k[0, i] = slots[dx_slot + i]
            if step % record_every == 0:
                out[rec, :] = slots
                rec += 1
            slots[t_slot] = t + 0.5 * h
            for i in range(nx):
                slots[x_slot + i] = x[i] + 0.5 * h * k[0, i]
            st = _exec(c, kc, slots, &tag)
            if st:
                break
            for i in range(nx):
                k[1, i] = slots[dx_slot + i]
                slots[x_slot + i] = x[i] + 0.5 * h * k[1, i]
            st = _exec(c, kc, slots, &tag)
            if st:
                break
            slots[t_slot] = tn
            for i in range(nx):
                k[2, i] = slots[dx_slot + i]
                slots[x_slot + i] = x[i] + h * k[2, i]
            st = _exec(c, kc, slots, &tag)
            if st:
                break
            for i in range(nx):
                k[3, i] = slots[dx_slot + i]
            for i in range(nx):
                y = h / 6.0 * (k[0, i] + 2.0 * k[1, i] + 2.0 * k[2, i] + k[3, i]) - comp[i]
                v = x[i] + y
                if not isfinite(v):
                    st = ERR_NONFINITE
                    tag = i
                    break
                comp[i] = (v - x[i]) - y
                x[i] = v
                slots[x_slot + i] = v
            if st:
                step += 1
                break
        else:
            step = nsteps
            if nsteps:
                slots[t_slot] = t_end
            st = _exec(c, kc, slots, &tag)
            if not st:
                out[rec, :] = slots
    if st < 0:
        raise RuntimeError("corrupt tape")
    return st, tag, step
