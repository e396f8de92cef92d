import numpy as np
import pytest

from bondsim import _backend, compile_graph, parse
from bondsim.core import GraphBuilder

BACKENDS = sorted(_backend.available())


@pytest.fixture(params=BACKENDS)
def backend(request):
    """Run the test once per importable kernel."""
    previous = _backend.kernel
    _backend.use(request.param)
    yield request.param
    _backend.kernel = previous


def lc_graph(L=1.0, C=1.0, p0=1.0, q0=0.0):
    b = GraphBuilder("lc")
    b.element("1", "j")
    b.element("I", "L", L, initial=p0)
    b.element("C", "C", C, initial=q0)
    b.bond("b1", "j", "L")
    b.bond("b2", "j", "C")
    return b.build()


def rl_graph(E=1.0, R=1.0, L=1.0):
    b = GraphBuilder("rl")
    b.element("SE", "src", E)
    b.element("1", "j")
    b.element("R", "R", R)
    b.element("I", "L", L)
    b.bond("b1", "src", "j")
    b.bond("b2", "j", "R")
    b.bond("b3", "j", "L")
    return b.build()


def filter_text(R_f=1.0, L_F=1.0, C_F=1.0, m_ch="0", i_out="0", u_in=1.0):
    R_f, L_F, C_F, u_in = map(float, (R_f, L_F, C_F, u_in))
    return f"""model filter
element SE u_in {{ value = {u_in!r} }}
element 1 mesh
element R R_f {{ k = {R_f!r} }}
element I L_F {{ k = {L_F!r} }}
element 0 node
element C C_F {{ k = {C_F!r} }}
element MTF chopper {{ k = {m_ch} }}
element 1 out
element MSF load {{ value = {i_out} }}
bond b1 u_in -> mesh
bond b2 mesh -> R_f
bond b3 mesh -> L_F
bond b4 mesh -> node
bond b5 node -> C_F
bond b6 node -> chopper.2
bond b7 chopper.1 -> out
bond b8 out -> load
probe C_F displacement
"""


def compile_text(text):
    return compile_graph(parse(text))


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)
