import numpy as np
import pytest

from bigcf import diffcore as dc


def central_diff(f, arrays: dict, h: float = 1e-5) -> dict:
    """Central finite differences of scalar f(arrays) w.r.t. every entry."""
    out = {}
    for name, a in arrays.items():
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = {k: v.copy() for k, v in arrays.items()}
            minus = {k: v.copy() for k, v in arrays.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            g[idx] = (f(plus) - f(minus)) / (2 * h)
        out[name] = g
    return out


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def tape_grad(build, arrays: dict):
    """(value, grads) of build(tape, leaves) -> scalar Var, in float64."""
    t = dc.Tape(np.float64)
    leaves = {k: t.leaf(v, k) for k, v in arrays.items()}
    loss = build(t, leaves)
    return loss.item(), t.backward(loss)


def tape_value(build):
    def f(arrays):
        t = dc.Tape(np.float64)
        leaves = {k: t.leaf(v, k) for k, v in arrays.items()}
        return build(t, leaves).item()
    return f


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: dict[int, tuple[str, bool | None, str]] = {}


def record_acceptance(num: int, title: str, ok: bool | None, detail: str) -> None:
    _ACCEPTANCE[num] = (title, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[num]
        tag = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        terminalreporter.write_line(f"{tag} criterion {num:2d} {title}: {detail}")
