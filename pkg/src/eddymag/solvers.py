"""Solvers for the symmetric systems of both steps.

Step 1 is symmetric positive definite and is factorized directly.  Step 2 is
only semi-definite (gradients living in the insulator are invisible to it), so
it goes through conjugate gradients started from zero with a compatible load.
"""
from __future__ import annotations

import glob
import os
import sys
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


def _load_pardiso():
    if "PYPARDISO_MKL_RT" not in os.environ:
        for root in (sys.prefix, "/usr/local", "/usr"):
            hits = sorted(glob.glob(os.path.join(root, "lib", "libmkl_rt.so*")))
            if hits:
                os.environ["PYPARDISO_MKL_RT"] = hits[0]
                break
    try:
        import pypardiso
    except (ImportError, OSError):
        return None
    return pypardiso


_pardiso = _load_pardiso()


class SolverError(RuntimeError):
    def __init__(self, message: str, report: "SolveReport | None" = None):
        super().__init__(message)
        self.report = report


@dataclass
class SolveReport:
    iterations: int
    residual: float  # final relative residual
    wall_time: float
    method: str
    converged: bool = True
    history: list | None = None


def check_symmetric(a: sp.spmatrix, rtol: float = 0.0) -> bool:
    a = sp.csr_matrix(a)
    diff = abs(a - a.T)
    if diff.nnz == 0:
        return True
    return diff.max() <= rtol * abs(a).max()


def _jacobi(a):
    d = np.asarray(a.diagonal(), dtype=float).copy()
    d[d == 0] = 1.0
    inv = 1.0 / d
    return lambda r: inv * r


def _ssor(a, omega: float = 1.0):
    a = sp.csr_matrix(a)
    d = a.diagonal().copy()
    d[d == 0] = 1.0
    lower = sp.tril(a, k=-1, format="csr") + sp.diags(d / omega)
    upper = sp.triu(a, k=1, format="csr") + sp.diags(d / omega)
    lower, upper = lower.tocsr(), upper.tocsr()
    scale = (2 - omega) / omega * d

    def apply(r):
        y = spla.spsolve_triangular(lower, r, lower=True)
        return spla.spsolve_triangular(upper, scale * y, lower=False)

    return apply


def make_preconditioner(a, kind) -> Callable[[np.ndarray], np.ndarray] | None:
    if kind is None or kind == "none":
        return None
    if callable(kind):
        return kind
    if kind == "diagonal":
        return _jacobi(a)
    if kind == "symmetric-sweep":
        return _ssor(a)
    raise ValueError(f"unknown preconditioner {kind!r}")


def cg_solve(
    a,
    b: np.ndarray,
    x0: np.ndarray | None = None,
    tol: float = 1e-10,
    precond="diagonal",
    max_iter: int | None = None,
    keep_history: bool = False,
    callback: Callable[[np.ndarray], None] | None = None,
):
    """Preconditioned conjugate gradients; relative residual ``||b - Ax|| / ||b||``.

    ``precond`` is ``"none"``, ``"diagonal"``, ``"symmetric-sweep"`` or a callable
    applying an SPD approximate inverse; ``callback(x)`` sees every iterate.  Raises :class:`SolverError` on
    breakdown (non-positive curvature) or when ``max_iter`` is exhausted.
    """
    t0 = time.perf_counter()
    b = np.asarray(b, dtype=float)
    n = len(b)
    max_iter = max_iter or 10 * n + 10
    apply_m = make_preconditioner(a, precond)
    tag = f"cg/{precond if isinstance(precond, str) else 'custom'}"
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros(n), SolveReport(0, 0.0, time.perf_counter() - t0, tag, history=[0.0] if keep_history else None)
    r = b - a @ x
    res = np.linalg.norm(r) / bnorm
    hist = [res] if keep_history else None
    if res <= tol:
        return x, SolveReport(0, res, time.perf_counter() - t0, tag, history=hist)
    z = apply_m(r) if apply_m else r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        ap = a @ p
        curv = p @ ap
        if curv <= 0:
            rep = SolveReport(it, res, time.perf_counter() - t0, tag, False, hist)
            raise SolverError(f"non-positive curvature {curv:.3e} at iteration {it}", rep)
        alpha = rz / curv
        x += alpha * p
        r -= alpha * ap
        res = np.linalg.norm(r) / bnorm
        if callback is not None:
            callback(x)
        if keep_history:
            hist.append(res)
        if res <= tol:
            return x, SolveReport(it, res, time.perf_counter() - t0, tag, history=hist)
        z = apply_m(r) if apply_m else r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    rep = SolveReport(max_iter, res, time.perf_counter() - t0, tag, False, hist)
    raise SolverError(f"CG did not reach {tol:g} in {max_iter} iterations (residual {res:.3e})", rep)


class SPDFactor:
    """Sparse Cholesky (PARDISO) or symmetric-mode LU (SuperLU) of an SPD matrix.

    Usable directly as a solver or as the ``precond`` of :func:`cg_solve`.
    """

    def __init__(self, a, backend: str | None = None):
        a = sp.csr_matrix(a)
        self.n = a.shape[0]
        if backend is None:
            backend = "pardiso" if _pardiso is not None else "superlu"
        self.backend = backend
        if backend == "pardiso":
            if _pardiso is None:
                raise SolverError("PARDISO backend is not available")
            self._upper = sp.triu(a, format="csr")
            self._upper.sort_indices()
            self._ps = _pardiso.PyPardisoSolver(mtype=2)
            self._ps.set_statistical_info_off()
            try:
                self._ps.factorize(self._upper)
            except _pardiso.pardiso_wrapper.PyPardisoError as exc:
                raise SolverError(f"non-positive pivot: matrix is not SPD ({exc})") from exc
        elif backend == "superlu":
            lu = spla.splu(
                a.tocsc(),
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
            if np.any(lu.U.diagonal() <= 0):
                raise SolverError("non-positive pivot: matrix is not SPD")
            self._lu = lu
        else:
            raise ValueError(f"unknown backend {backend!r}")

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self.backend == "pardiso":
            return self._ps.solve(self._upper, b)
        return self._lu.solve(b)

    __call__ = solve

    def __del__(self):
        # MKL keeps the factor until phase -1, independent of Python refcounts
        ps = getattr(self, "_ps", None)
        if ps is not None:
            try:
                ps.free_memory(everything=True)
            except Exception:
                pass


def regularized_factor(a, eps: float = 1e-10, backend: str | None = None) -> SPDFactor:
    """Factor ``a + eps * max(diag a) * I``: an SPD preconditioner for a semi-definite ``a``."""
    a = sp.csr_matrix(a)
    shift = eps * float(a.diagonal().max())
    return SPDFactor(a + sp.identity(a.shape[0], format="csr") * shift, backend)


class KernelProjector:
    """Euclidean projection onto the orthogonal complement of ``range(K)``.

    For a symmetric semi-definite matrix with null space ``range(K)`` this is
    the projection onto its range; wrapping a preconditioner as ``P M P``
    keeps CG from amplifying round-off components along the null space.
    """

    def __init__(self, kernel):
        self.kernel = sp.csr_matrix(kernel)
        self.dim = self.kernel.shape[1]
        self._gram = SPDFactor(self.kernel.T @ self.kernel) if self.dim else None

    def __call__(self, r: np.ndarray) -> np.ndarray:
        if not self.dim:
            return r
        k = self.kernel
        return r - k @ self._gram.solve(k.T @ r)

    def wrap(self, precond, a=None, commuting: bool = False):
        """``P M P``; with ``commuting`` (``M`` a function of ``a``, e.g. a shifted
        factor) the single projection ``P M`` is the same operator."""
        inner = make_preconditioner(a, precond)
        if inner is None:
            return self
        if commuting:
            return lambda r: self(inner(r))
        return lambda r: self(inner(self(r)))


def direct_spd_solve(a, b: np.ndarray, report: bool = False):
    t0 = time.perf_counter()
    a_sp = sp.csr_matrix(a)
    b = np.asarray(b, dtype=float)
    if a_sp.shape[0] <= 200:
        try:
            x = sla.cho_solve(sla.cho_factor(a_sp.toarray()), b)
        except sla.LinAlgError as exc:
            raise SolverError("non-positive pivot: matrix is not SPD") from exc
    else:
        x = SPDFactor(a_sp).solve(b)
    if not report:
        return x
    bn = np.linalg.norm(b)
    res = np.linalg.norm(b - a_sp @ x) / bn if bn else 0.0
    return x, SolveReport(1, res, time.perf_counter() - t0, "direct")


def write_coo(a, path) -> None:
    """Write ``row col value`` lines (0-based) with full precision."""
    coo = sp.coo_matrix(a)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"% {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for i, j, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{i} {j} {v:.17g}\n")
