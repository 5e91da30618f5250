"""Independent reference implementations used to check the main code path.

Everything here works on plain Python floats with explicit loops and never
touches the tensor engine, so agreement with the main path is evidence
rather than a tautology.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import ContractError, NumericError


@dataclass(frozen=True)
class ToleranceSpec:
    atol: float = 1e-10
    rtol: float = 1e-4
    step: float = 1e-5

    def __post_init__(self):
        if min(self.atol, self.rtol, self.step) <= 0:
            raise ValueError("tolerances and step must be positive")


def reference_matmul(a, b) -> list:
    a, b = np.asarray(a).tolist(), np.asarray(b).tolist()
    m, k, n = len(a), len(b), len(b[0])
    if len(a[0]) != k:
        raise ValueError("inner dimensions differ")
    return [[sum(a[i][p] * b[p][j] for p in range(k)) for j in range(n)] for i in range(m)]


def reference_softmax(row: Sequence[float], allowed: Sequence[bool] | None = None) -> list:
    """Softmax restricted to ``allowed`` entries; the rest get exactly 0."""
    if allowed is None:
        allowed = [True] * len(row)
    idx = [j for j, ok in enumerate(allowed) if ok]
    if not idx:
        raise ContractError("softmax row has no allowed entries")
    top = max(row[j] for j in idx)
    exps = {j: math.exp(row[j] - top) for j in idx}
    total = sum(exps.values())
    return [exps[j] / total if j in exps else 0.0 for j in range(len(row))]


def reference_attention(q, k, v, allow, d_emb: int, heads: int):
    """Scalar-loop masked attention.

    ``q``, ``k``, ``v`` are ``[B, H, N, dh]``; ``allow`` is ``[B, N, N]`` or a
    single ``[N, N]``. Returns ``(output, weights)`` as nested lists.
    """
    q, k, v = (np.asarray(x, dtype=float).tolist() for x in (q, k, v))
    allow = np.asarray(allow, dtype=bool)
    batch, h = len(q), len(q[0])
    n_q, n_k = len(q[0][0]), len(k[0][0])
    if n_q > 8 or n_k > 8 or h > 2:
        raise ValueError("reference attention is for N <= 8 and H <= 2 only")
    if h != heads:
        raise ValueError(f"got {h} heads, expected {heads}")
    if allow.ndim == 2:
        allow = np.broadcast_to(allow, (batch, n_q, n_k))
    allow = allow.tolist()
    scale = math.sqrt(d_emb / heads)
    out, weights = [], []
    for b in range(batch):
        out_b, w_b = [], []
        for hh in range(h):
            out_h, w_h = [], []
            for i in range(n_q):
                scores = [
                    sum(qi * kj for qi, kj in zip(q[b][hh][i], k[b][hh][j])) / scale
                    for j in range(n_k)
                ]
                w = reference_softmax(scores, allow[b][i])
                dh = len(v[b][hh][0])
                out_h.append([sum(w[j] * v[b][hh][j][c] for j in range(n_k)) for c in range(dh)])
                w_h.append(w)
            out_b.append(out_h)
            w_b.append(w_h)
        out.append(out_b)
        weights.append(w_b)
    return out, weights


def reference_allow(strategy: str, masked, attn_m, causal: bool) -> list:
    """Allow matrix from the connection rules, written entry by entry."""
    n = len(attn_m)
    masked = set(masked)
    rows = []
    for i in range(n):
        row = []
        for j in range(n):
            ok = attn_m[j] == 1 and (not causal or j <= i)
            if strategy == "siblings" and (i in masked or j in masked) and i != j:
                ok = False
            if strategy == "self" and j in masked:
                ok = False
            row.append(ok)
        rows.append(row)
    for i in range(n):
        if not any(rows[i]):
            rows[i][i] = True
    return rows


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``; ``x`` is restored afterwards."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        g[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Norm-wise ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def check_param_grads(loss_fn: Callable[[], float], params: dict, analytic: dict,
                      step: float = 1e-5) -> dict:
    """Relative error per named parameter between ``analytic`` grads and finite differences.

    ``loss_fn`` must be deterministic and read the parameters' ``.data`` in
    place; each array is perturbed in place and restored.
    """
    errors = {}
    for name, p in params.items():
        numeric = finite_diff_grad(lambda _x: loss_fn(), p.data, step)
        a = analytic.get(name)
        a = np.zeros_like(p.data) if a is None else a
        errors[name] = relative_error(a, numeric)
    return errors


def binomial_band(p: float, n: int, z: float = 4.0) -> tuple[float, float]:
    """``p +/- z`` standard errors of a mean of ``n`` Bernoulli(p) draws."""
    se = math.sqrt(p * (1 - p) / n)
    return p - z * se, p + z * se


def empirical_rate(draw: Callable[[], float], trials: int) -> float:
    return sum(draw() for _ in range(trials)) / trials


class CountingGenerator:
    """Wraps a ``numpy.random.Generator`` and counts calls per method.

    Draws are delegated unchanged, so a wrapped stream produces exactly the
    numbers the bare one would.
    """

    def __init__(self, rng: np.random.Generator):
        self._rng = rng
        self.calls: dict[str, int] = {}
        self.sizes: list = []

    def __getattr__(self, name):
        target = getattr(self._rng, name)
        if not callable(target):
            return target

        def counted(*args, **kwargs):
            self.calls[name] = self.calls.get(name, 0) + 1
            if name == "random":
                self.sizes.append(args[0] if args else kwargs.get("size"))
            return target(*args, **kwargs)

        return counted

    def count(self, name: str = "random") -> int:
        return self.calls.get(name, 0)

    def reset(self) -> None:
        self.calls.clear()
        self.sizes.clear()
