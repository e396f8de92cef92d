"""Pure-Python tape interpreter and RK4 driver (fallback backend)."""

from __future__ import annotations

import math

from ._opcodes import (
    ERR_DIV_ZERO,
    ERR_NONFINITE,
    ERR_OK,
    ERR_POW_DOMAIN,
    ERR_SINGULAR,
    ERR_SQRT_NEG,
    OP_DIVS,
    OP_END,
    OP_EXPR,
    OP_LIN,
    OP_MATVEC,
    OP_MULS,
    OP_SOLVE,
    PIVOT_TOL,
    X_ABS,
    X_ADD,
    X_COS,
    X_DIV,
    X_EXP,
    X_MAX,
    X_MIN,
    X_MUL,
    X_NEG,
    X_POW,
    X_PUSHC,
    X_PUSHS,
    X_SIN,
    X_SQRT,
    X_SUB,
)

NAME = "python"


def _solve(s, dst, m, src, n, trans, c, scr):
    # Gaussian elimination with partial pivoting on a copy in s[scr:]
    a = scr
    b = scr + n * n
    amax = 0.0
    for i in range(n):
        for j in range(n):
            v = s[m + j * n + i] if trans else s[m + i * n + j]
            s[a + i * n + j] = v
            if abs(v) > amax:
                amax = abs(v)
        s[b + i] = s[src + i]
    if not amax > 0.0:
        return False
    tol = PIVOT_TOL * amax
    for col in range(n):
        piv = col
        best = abs(s[a + col * n + col])
        for r in range(col + 1, n):
            v = abs(s[a + r * n + col])
            if v > best:
                best, piv = v, r
        if not best > tol:
            return False
        if piv != col:
            for j in range(n):
                s[a + col * n + j], s[a + piv * n + j] = s[a + piv * n + j], s[a + col * n + j]
            s[b + col], s[b + piv] = s[b + piv], s[b + col]
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


def _exec(code, consts, s):
    """Run the tape once over the slot list ``s``.  Returns (status, tag)."""
    pc = 0
    while True:
        op = code[pc]
        if op == OP_LIN:
            dst, n, nt = code[pc + 1], code[pc + 2], code[pc + 3]
            pc += 4
            if nt == 0:
                for k in range(n):
                    s[dst + k] = 0.0
            elif nt == 1:
                src, c = code[pc], consts[code[pc + 1]]
                for k in range(n):
                    s[dst + k] = c * s[src + k]
            else:
                terms = [(code[pc + 2 * j], consts[code[pc + 2 * j + 1]]) for j in range(nt)]
                for k in range(n):
                    acc = 0.0
                    for src, c in terms:
                        acc += c * s[src + k]
                    s[dst + k] = acc
            pc += 2 * nt
        elif op == OP_MULS:
            dst, sl, src, n, c = code[pc + 1 : pc + 6]
            f = consts[c] * s[sl]
            for k in range(n):
                s[dst + k] = f * s[src + k]
            pc += 6
        elif op == OP_DIVS:
            dst, sl, src, n, c, tag = code[pc + 1 : pc + 7]
            d = s[sl]
            if d == 0.0:
                return ERR_SINGULAR, tag
            c = consts[c]
            for k in range(n):
                s[dst + k] = c * s[src + k] / d
            pc += 7
        elif op == OP_MATVEC:
            dst, m, src, n, trans, c = code[pc + 1 : pc + 7]
            c = consts[c]
            for i in range(n):
                acc = 0.0
                if trans:
                    for j in range(n):
                        acc += s[m + j * n + i] * s[src + j]
                else:
                    row = m + i * n
                    for j in range(n):
                        acc += s[row + j] * s[src + j]
                s[dst + i] = c * acc
            pc += 7
        elif op == OP_SOLVE:
            dst, m, src, n, trans, c, tag, scr = code[pc + 1 : pc + 9]
            if not _solve(s, dst, m, src, n, trans, consts[c], scr):
                return ERR_SINGULAR, tag
            pc += 9
        elif op == OP_EXPR:
            dst, plen = code[pc + 1], code[pc + 3]
            q = pc + 4
            end = q + plen
            st = []
            while q < end:
                x = code[q]
                if x == X_PUSHS:
                    st.append(s[code[q + 1]])
                    q += 2
                elif x == X_PUSHC:
                    st.append(consts[code[q + 1]])
                    q += 2
                elif x == X_ADD:
                    b = st.pop()
                    st[-1] += b
                    q += 1
                elif x == X_SUB:
                    b = st.pop()
                    st[-1] -= b
                    q += 1
                elif x == X_MUL:
                    b = st.pop()
                    st[-1] *= b
                    q += 1
                elif x == X_DIV:
                    b = st.pop()
                    if b == 0.0:
                        return ERR_DIV_ZERO, code[q + 1]
                    st[-1] /= b
                    q += 2
                elif x == X_NEG:
                    st[-1] = -st[-1]
                    q += 1
                elif x == X_SQRT:
                    a = st[-1]
                    if a < 0.0:
                        return ERR_SQRT_NEG, code[q + 1]
                    st[-1] = math.sqrt(a)
                    q += 2
                elif x == X_POW:
                    b = st.pop()
                    a = st[-1]
                    try:
                        st[-1] = math.pow(a, b)
                    except OverflowError:
                        st[-1] = math.inf
                    except (ValueError, ZeroDivisionError):
                        return ERR_POW_DOMAIN, code[q + 1]
                    q += 2
                elif x == X_SIN:
                    st[-1] = math.sin(st[-1])
                    q += 1
                elif x == X_COS:
                    st[-1] = math.cos(st[-1])
                    q += 1
                elif x == X_EXP:
                    try:
                        st[-1] = math.exp(st[-1])
                    except OverflowError:
                        st[-1] = math.inf
                    q += 1
                elif x == X_ABS:
                    st[-1] = abs(st[-1])
                    q += 1
                elif x == X_MIN:
                    b = st.pop()
                    st[-1] = min(st[-1], b)
                    q += 1
                elif x == X_MAX:
                    b = st.pop()
                    st[-1] = max(st[-1], b)
                    q += 1
                else:
                    raise RuntimeError(f"bad expression opcode {x}")
            s[dst] = st[-1]
            pc = end
        elif op == OP_END:
            return ERR_OK, 0
        else:
            raise RuntimeError(f"bad opcode {op} at {pc}")


def run(code, consts, slots):
    """Evaluate the tape in place on ``slots`` (a float64 array)."""
    s = slots.tolist()
    status, tag = _exec(code.tolist(), consts.tolist(), s)
    slots[:] = s
    return status, tag


def integrate(code, consts, slots, t_slot, x_slot, dx_slot, nx, dt, t_end, nsteps, record_every, out):
    """Classical RK4 from the state currently in ``slots``.

    Records the full slot vector at steps 0, r, 2r, ... and at the final
    time into consecutive rows of ``out``.  Returns (status, tag, step).
    """
    code = code.tolist()
    consts = consts.tolist()
    s = slots.tolist()
    x = s[x_slot : x_slot + nx]
    comp = [0.0] * nx  # compensated summation of the state update
    rec = 0
    rng = range(nx)
    for step in range(nsteps):
        t = step * dt
        tn = (step + 1) * dt
        if tn > t_end:
            tn = t_end
        h = tn - t
        s[t_slot] = t
        st, tag = _exec(code, consts, s)
        if st:
            return st, tag, step
        k1 = s[dx_slot : dx_slot + nx]
        if step % record_every == 0:
            out[rec] = s
            rec += 1
        s[t_slot] = t + 0.5 * h
        for i in rng:
            s[x_slot + i] = x[i] + 0.5 * h * k1[i]
        st, tag = _exec(code, consts, s)
        if st:
            return st, tag, step
        k2 = s[dx_slot : dx_slot + nx]
        for i in rng:
            s[x_slot + i] = x[i] + 0.5 * h * k2[i]
        st, tag = _exec(code, consts, s)
        if st:
            return st, tag, step
        k3 = s[dx_slot : dx_slot + nx]
        s[t_slot] = tn
        for i in rng:
            s[x_slot + i] = x[i] + h * k3[i]
        st, tag = _exec(code, consts, s)
        if st:
            return st, tag, step
        k4 = s[dx_slot : dx_slot + nx]
        h6 = h / 6.0
        for i in rng:
            y = h6 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) - comp[i]
            v = x[i] + y
            if not math.isfinite(v):
                return ERR_NONFINITE, i, step + 1
            comp[i] = (v - x[i]) - y
            x[i] = v
            s[x_slot + i] = v
    s[t_slot] = t_end if nsteps else s[t_slot]
    st, tag = _exec(code, consts, s)
    if st:
        return st, tag, nsteps
    out[rec] = s
    slots[:] = s
    return ERR_OK, 0, nsteps
