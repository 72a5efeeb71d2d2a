"""Minimal reverse-mode autodiff over dense 2-D float64 arrays.

Just enough machinery to train the referent pipeline at toy scale and to
verify every analytic gradient against central finite differences. Ops
execute eagerly on numpy and, when a :class:`Tape` is active, append their
backward rule to it; ``Tape.backward`` then replays the records in exact
reverse execution order, which keeps gradient accumulation bitwise
deterministic. There is no broadcasting beyond row-vector bias addition and
no shape polymorphism: every tensor is a (rows, cols) float64 matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NumericError",
    "GradCheckReport",
    "matmul",
    "add",
    "sub",
    "scale",
    "neg",
    "absval",
    "relu",
    "softmax_rows",
    "transpose",
    "concat_cols",
    "gather_rows",
    "max_pool_groups",
    "mean",
    "l2_norm_rows",
    "grad_check",
]


class NumericError(RuntimeError):
    """A forward op produced a non-finite value; carries the op name."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite value in op '{op}'"
        super().__init__(msg + (f": {detail}" if detail else ""))


class Tensor:
    """A (rows, cols) float64 matrix with an optional accumulated gradient."""

    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"Tensor must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor values must be finite")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() requires a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed ops; backward replays it in reverse."""

    def __init__(self):
        # each record: (output tensor, backward fn taking the output gradient)
        self._records: list[tuple[Tensor, callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self
        return False

    def record(self, out: Tensor, backward):
        self._records.append((out, backward))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(tensor) into ``.grad`` of every tensor reached."""
        if loss.values.size != 1:
            raise ValueError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
        _accumulate(loss, np.ones((1, 1)))
        for out, backward_fn in reversed(self._records):
            if out.grad is None:
                continue
            backward_fn(out.grad)


def _tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _make(op: str, values: np.ndarray, backward) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise NumericError(op)
    out = Tensor(values)
    tape = _tape()
    if tape is not None:
        tape.record(out, backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        _accumulate(a, g @ bv.T)
        _accumulate(b, av.T @ g)

    return _make("matmul", av @ bv, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; ``b`` may also be a (1, cols) row bias."""
    broadcast = b.shape == (1, a.cols) and a.rows != 1
    if not broadcast and a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g.sum(axis=0, keepdims=True) if broadcast else g)

    return _make("add", a.values + b.values, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} - {b.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make("sub", a.values - b.values, backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        _accumulate(a, g * s)

    return _make("scale", a.values * s, backward)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def absval(a: Tensor) -> Tensor:
    sign = np.sign(a.values)

    def backward(g):
        _accumulate(a, g * sign)

    return _make("abs", np.abs(a.values), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0

    def backward(g):
        _accumulate(a, g * mask)

    return _make("relu", a.values * mask, backward)


def softmax_rows(a: Tensor) -> Tensor:
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    sm = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * sm).sum(axis=1, keepdims=True)
        _accumulate(a, sm * (g - dot))

    return _make("softmax_rows", sm, backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g.T)

    return _make("transpose", a.values.T.copy(), backward)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != b.rows:
        raise ValueError(f"concat_cols row mismatch: {a.shape} vs {b.shape}")
    split = a.cols

    def backward(g):
        _accumulate(a, g[:, :split])
        _accumulate(b, g[:, split:])

    return _make("concat_cols", np.hstack([a.values, b.values]), backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise ValueError("gather_rows needs at least one index")
    if np.any(idx < 0) or np.any(idx >= a.rows):
        raise ValueError(f"gather_rows index out of range for {a.rows} rows")

    def backward(g):
        buf = np.zeros_like(a.values)
        np.add.at(buf, idx, g)
        _accumulate(a, buf)

    return _make("gather_rows", a.values[idx].copy(), backward)


def max_pool_groups(a: Tensor, groups: list[np.ndarray]) -> Tensor:
    """Per-group columnwise max over member rows of ``a``.

    The gradient is routed only to the argmax member of each group per
    column; ties go to the member listed first in the group.
    """
    if not groups:
        raise ValueError("max_pool_groups needs at least one group")
    idx_groups = []
    for grp in groups:
        idx = np.asarray(grp, dtype=np.int64).reshape(-1)
        if idx.size == 0:
            raise ValueError("max_pool_groups groups must be non-empty")
        if np.any(idx < 0) or np.any(idx >= a.rows):
            raise ValueError(f"group index out of range for {a.rows} rows")
        idx_groups.append(idx)

    values = np.empty((len(idx_groups), a.cols))
    argmax = []
    for gi, idx in enumerate(idx_groups):
        block = a.values[idx]
        pos = np.argmax(block, axis=0)  # first max = earliest member wins ties
        values[gi] = block[pos, np.arange(a.cols)]
        argmax.append(idx[pos])

    def backward(g):
        buf = np.zeros_like(a.values)
        cols = np.arange(a.cols)
        for gi, rows in enumerate(argmax):
            np.add.at(buf, (rows, cols), g[gi])
        _accumulate(a, buf)

    return _make("max_pool_groups", values, backward)


def mean(a: Tensor) -> Tensor:
    n = a.values.size

    def backward(g):
        _accumulate(a, np.full_like(a.values, g[0, 0] / n))

    return _make("mean", np.array([[a.values.mean()]]), backward)


def l2_norm_rows(a: Tensor) -> Tensor:
    """Euclidean norm of each row, as an (rows, 1) tensor.

    Rows with zero norm get zero gradient (the subgradient choice at the
    kink).
    """
    norms = np.sqrt((a.values**2).sum(axis=1, keepdims=True))

    def backward(g):
        safe = np.where(norms > 0, norms, 1.0)
        _accumulate(a, g * np.where(norms > 0, a.values / safe, 0.0))

    return _make("l2_norm_rows", norms, backward)


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients with central differences."""

    max_rel_error: float
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self):
        lines = [
            f"{name}: max_rel_error={err:.3e}" for name, err in self.per_param.items()
        ]
        lines.append(
            f"overall: max_rel_error={self.max_rel_error:.3e} "
            f"tol={self.tol:.1e} -> {'PASS' if self.passed else 'FAIL'}"
        )
        return "\n".join(lines)


def grad_check(
    f,
    params: dict[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    denom_floor: float = 1e-4,
) -> GradCheckReport:
    """Verify d(f)/d(param) against central finite differences.

    ``f`` must rebuild its computation from the current parameter values on
    every call and return a scalar (1x1) tensor. Relative error per
    coordinate is |a - n| / max(|a|, |n|, denom_floor); the floor keeps
    finite-difference rounding noise on (near-)zero gradients from reading
    as a failure while still flagging genuinely wrong gradients.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")

    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        out = f()
        if out.values.size != 1:
            raise ValueError(f"grad_check needs a scalar-valued f, got {out.shape}")
        tape.backward(out)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
        for name, p in params.items()
    }

    per_param: dict[str, float] = {}
    for name, p in params.items():
        flat = p.values.reshape(-1)
        ana = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(ana[i]), abs(fd), denom_floor)
            worst = max(worst, abs(ana[i] - fd) / denom)
        per_param[name] = worst

    overall = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(max_rel_error=overall, tol=tol, per_param=per_param)
