"""Dense Lindblad superoperators on a small labelled electron Hilbert space.

Operators are plain ``(d, d)`` complex ndarrays. Superoperators act on
column-stacked operators: ``vec(X) = X.reshape(-1, order="F")``, so the entry
``X[i, j]`` sits at position ``i + d * j`` and ``vec(A X B) = (B.T kron A) vec(X)``.

A jump channel ``i -> f`` with rate ``g`` contributes ``g * D[|f><i|]``. A
dephasing channel on state ``s`` with rate ``g_phi`` uses the Lindblad operator
``sqrt(2 g_phi) |s><s|``, so every coherence between ``s`` and another state
decays at an extra ``g_phi``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

from .errors import (
    DegenerateSteadyState,
    IntegrationError,
    NoDissipation,
    SingularResolvent,
)

MAX_DIM = 64
HERMITIAN_RTOL = 1e-12
DEGENERACY_RTOL = 1e-9


def vec(X):
    return np.asarray(X).reshape(-1, order="F")


def unvec(v, d):
    return np.asarray(v).reshape(d, d, order="F")


def spre(A):
    """Superoperator of ``X -> A X``."""
    d = A.shape[0]
    return np.kron(np.eye(d), A)


def spost(B):
    """Superoperator of ``X -> X B``."""
    d = B.shape[0]
    return np.kron(B.T, np.eye(d))


def commutator_super(H):
    """Superoperator of ``X -> -i [H, X]``."""
    return -1j * (spre(H) - spost(H))


def anticommutator_super(K):
    """Superoperator of ``X -> -i {X, K} / 2``."""
    return -0.5j * (spre(K) + spost(K))


def dissipator_super(L):
    """Superoperator of ``D[L] X = L X L^+ - {L^+ L, X} / 2``."""
    LdL = L.conj().T @ L
    return np.kron(L.conj(), L) - 0.5 * spre(LdL) - 0.5 * spost(LdL)


def is_hermitian(A, rtol=HERMITIAN_RTOL):
    A = np.asarray(A)
    scale = max(np.abs(A).max(initial=0.0), 1.0)
    return np.abs(A - A.conj().T).max(initial=0.0) <= rtol * scale


def projector(d, i, j=None):
    """``|i><j|`` (``|i><i|`` when ``j`` is omitted)."""
    P = np.zeros((d, d), dtype=complex)
    P[i, i if j is None else j] = 1.0
    return P


@dataclass(frozen=True)
class ElectronBasis:
    labels: tuple

    def __post_init__(self):
        labels = tuple(str(s) for s in self.labels)
        object.__setattr__(self, "labels", labels)
        if not labels:
            raise ValueError("basis needs at least one state")
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate basis labels in {labels}")
        if len(labels) > MAX_DIM:
            raise ValueError(f"basis dimension {len(labels)} exceeds {MAX_DIM}")

    @property
    def dim(self):
        return len(self.labels)

    def index(self, label):
        return self.labels.index(label)


@dataclass(frozen=True)
class JumpChannel:
    """Incoherent transfer ``source -> target`` at ``rate`` (1/us)."""

    source: int
    target: int
    rate: float

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError(f"negative jump rate {self.rate}")
        if self.source == self.target:
            raise ValueError("jump channel must connect two different states")


@dataclass(frozen=True)
class DephasingChannel:
    state: int
    rate: float

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError(f"negative dephasing rate {self.rate}")


@dataclass(frozen=True, eq=False)
class ElectronModel:
    """Hamiltonian plus damping channels on a labelled basis.

    ``closed=True`` marks a model that deliberately has no channels; such a
    model can still be evolved but has no unique steady state.
    """

    basis: ElectronBasis
    hamiltonian: np.ndarray
    jumps: tuple = ()
    dephasings: tuple = ()
    closed: bool = False

    def __post_init__(self):
        H = np.array(self.hamiltonian, dtype=complex)
        d = self.basis.dim
        if H.shape != (d, d):
            raise ValueError(f"Hamiltonian shape {H.shape} does not match basis dim {d}")
        if not is_hermitian(H):
            raise ValueError("Hamiltonian is not Hermitian")
        H.setflags(write=False)
        object.__setattr__(self, "hamiltonian", H)
        object.__setattr__(self, "jumps", tuple(self.jumps))
        object.__setattr__(self, "dephasings", tuple(self.dephasings))
        for ch in self.jumps:
            if not (0 <= ch.source < d and 0 <= ch.target < d):
                raise ValueError(f"jump channel {ch} outside basis")
        for ch in self.dephasings:
            if not 0 <= ch.state < d:
                raise ValueError(f"dephasing channel {ch} outside basis")
        if not self.closed and not self.has_dissipation:
            raise ValueError("model has no damping channel; pass closed=True for a closed system")

    @property
    def dim(self):
        return self.basis.dim

    @property
    def has_dissipation(self):
        return any(c.rate > 0 for c in self.jumps) or any(c.rate > 0 for c in self.dephasings)

    def out_rates(self):
        """Total jump rate out of each state, ``sum_f gamma_fi``."""
        out = np.zeros(self.dim)
        for ch in self.jumps:
            out[ch.source] += ch.rate
        return out

    def dephasing_rates(self):
        g = np.zeros(self.dim)
        for ch in self.dephasings:
            g[ch.state] += ch.rate
        return g

    def replace(self, **changes):
        kw = dict(basis=self.basis, hamiltonian=self.hamiltonian, jumps=self.jumps,
                  dephasings=self.dephasings, closed=self.closed)
        kw.update(changes)
        return ElectronModel(**kw)


@dataclass(frozen=True, eq=False)
class Superoperator:
    """A ``d^2 x d^2`` matrix acting on column-stacked ``d x d`` operators."""

    matrix: np.ndarray
    labels: tuple
    dissipative: bool = True
    trace_preserving: bool = True
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=complex)
        d = len(self.labels)
        if M.shape != (d * d, d * d):
            raise ValueError(f"superoperator shape {M.shape} does not match dim {d}")
        M.setflags(write=False)
        object.__setattr__(self, "matrix", M)

    @property
    def dim(self):
        return len(self.labels)

    @property
    def norm(self):
        if "norm" not in self._cache:
            self._cache["norm"] = float(np.linalg.norm(self.matrix))
        return self._cache["norm"]

    def eigenvalues(self):
        if "eig" not in self._cache:
            self._cache["eig"] = np.linalg.eigvals(self.matrix)
        return self._cache["eig"]

    def apply(self, X):
        return unvec(self.matrix @ vec(X), self.dim)

    def __add__(self, other):
        if self.labels != other.labels:
            raise ValueError("basis mismatch")
        return Superoperator(self.matrix + other.matrix, self.labels,
                             self.dissipative or other.dissipative,
                             self.trace_preserving and other.trace_preserving)

    def __sub__(self, other):
        if self.labels != other.labels:
            raise ValueError("basis mismatch")
        return Superoperator(self.matrix - other.matrix, self.labels,
                             self.dissipative or other.dissipative,
                             self.trace_preserving and other.trace_preserving)


def _check_extra(model, extra):
    if extra is None:
        return np.zeros((model.dim, model.dim), dtype=complex)
    extra = np.asarray(extra, dtype=complex)
    if extra.shape != (model.dim, model.dim):
        raise ValueError(f"extra Hamiltonian shape {extra.shape} does not match basis dim {model.dim}")
    if not is_hermitian(extra):
        raise ValueError("extra Hamiltonian is not Hermitian")
    return extra


def build_liouvillian(model: ElectronModel, extra_hamiltonian=None) -> Superoperator:
    """Matrix of ``-i[H + extra, .] + sum_fi g_fi D[|f><i|] + sum_s 2 g_phi D[|s><s|]``."""
    d = model.dim
    H = model.hamiltonian + _check_extra(model, extra_hamiltonian)
    M = commutator_super(H)
    for ch in model.jumps:
        if ch.rate > 0:
            M = M + ch.rate * dissipator_super(projector(d, ch.target, ch.source))
    for ch in model.dephasings:
        if ch.rate > 0:
            M = M + 2.0 * ch.rate * dissipator_super(projector(d, ch.state))
    return Superoperator(M, model.basis.labels, dissipative=model.has_dissipation)


def trace_row(d):
    """Row vector ``t`` with ``t @ vec(X) = Tr X``."""
    t = np.zeros(d * d, dtype=complex)
    t[np.arange(d) * (d + 1)] = 1.0
    return t


def check_density_matrix(P, tol_trace=1e-10, tol_herm=1e-10, tol_eig=-1e-8):
    P = np.asarray(P)
    tr = np.trace(P)
    if abs(tr - 1.0) > tol_trace:
        raise ValueError(f"trace {tr} differs from 1")
    if np.abs(P - P.conj().T).max() > tol_herm:
        raise ValueError("density matrix not Hermitian")
    lo = np.linalg.eigvalsh(0.5 * (P + P.conj().T)).min()
    if lo < tol_eig:
        raise ValueError(f"density matrix has negative eigenvalue {lo}")
    return P


def steady_state(L: Superoperator, check_degeneracy=True) -> np.ndarray:
    """Unique trace-one null vector of ``L``.

    One row of ``L`` belonging to a diagonal element is replaced by the trace
    functional and the dense system is solved by LU; the residual is checked
    against the unmodified matrix.
    """
    if not L.dissipative:
        raise NoDissipation("closed system has no unique steady state")
    d = L.dim
    scale = L.norm
    if check_degeneracy:
        mags = np.sort(np.abs(L.eigenvalues()))
        if len(mags) > 1 and mags[1] < DEGENERACY_RTOL * scale:
            n0 = int(np.sum(mags < DEGENERACY_RTOL * scale))
            raise DegenerateSteadyState(f"null space dimension {n0} > 1")
    A = np.array(L.matrix)
    A[0, :] = trace_row(d)
    b = np.zeros(d * d, dtype=complex)
    b[0] = 1.0
    try:
        x = scipy.linalg.solve(A, b, check_finite=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise DegenerateSteadyState(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise DegenerateSteadyState("steady-state solve produced non-finite values")
    resid = np.linalg.norm(L.matrix @ x)
    if resid > 1e-10 * max(scale, 1.0) * max(np.linalg.norm(x), 1.0):
        raise DegenerateSteadyState(f"steady-state residual {resid:.3e} too large")
    P = unvec(x, d)
    P = 0.5 * (P + P.conj().T)
    P = P / np.trace(P).real
    return check_density_matrix(P)


def evolve(L: Superoperator, rho0, t_grid: Sequence[float]) -> list:
    """Density matrices at the times in ``t_grid`` by exact propagator steps."""
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or len(t) == 0:
        raise ValueError("t_grid must be a non-empty 1-D sequence")
    if t[0] < 0 or np.any(np.diff(t) < 0):
        raise ValueError("t_grid must be non-negative and increasing")
    d = L.dim
    x = vec(np.asarray(rho0, dtype=complex)).copy()
    tr0 = np.trace(np.asarray(rho0))
    props = {}
    out = []
    t_prev = 0.0
    for tk in t:
        dt = tk - t_prev
        if dt > 0:
            key = round(dt, 12)
            if key not in props:
                props[key] = scipy.linalg.expm(L.matrix * dt)
            x = props[key] @ x
        rho = unvec(x, d).copy()
        herm = np.abs(rho - rho.conj().T).max()
        if herm > 1e-8:
            raise IntegrationError(f"Hermiticity violated by {herm:.2e} at t={tk}")
        if L.trace_preserving and abs(np.trace(rho) - tr0) > 1e-9 * max(1.0, tk):
            raise IntegrationError(f"trace drifted at t={tk}")
        out.append(rho)
        t_prev = tk
    return out


def _smallest_singular_ratio(A):
    s = np.linalg.svd(A, compute_uv=False)
    return s[-1] / s[0] if s[0] > 0 else 0.0


def liouvillian_integral(L: Superoperator, omega: float, X) -> np.ndarray:
    """``Y = int_0^inf exp(i omega t) exp(L t) X dt``, i.e. ``(L + i omega) Y = -X``."""
    d = L.dim
    A = L.matrix + 1j * omega * np.eye(d * d)
    if _smallest_singular_ratio(A) < 1e-13:
        raise SingularResolvent(f"L + i*omega is singular at omega={omega}")
    rhs = -vec(np.asarray(X, dtype=complex))
    y = scipy.linalg.solve(A, rhs, check_finite=False)
    resid = np.linalg.norm(A @ y - rhs)
    if resid > 1e-10 * max(np.linalg.norm(rhs), 1e-300):
        raise SingularResolvent(f"resolvent residual {resid:.3e}")
    return unvec(y, d)


def projected_integral(L: Superoperator, P, X) -> np.ndarray:
    """``int_0^inf exp(L t) Q X dt`` with ``Q X = X - P Tr X`` removing the steady component.

    Solved through the bordered matrix ``L + vec(P) t^T``, which is regular when
    the steady state is unique and maps the traceless subspace onto itself.
    """
    d = L.dim
    t = trace_row(d)
    X = np.asarray(X, dtype=complex)
    QX = X - P * np.trace(X)
    A = L.matrix + np.outer(vec(P), t)
    y = scipy.linalg.solve(A, -vec(QX), check_finite=False)
    return unvec(y, d)


def split_diag_offdiag(model: ElectronModel, extra_hamiltonian=None):
    """Split the Liouvillian into its superoperator-diagonal part and the rest.

    ``L_diag = -i[H_d, .] - {Gamma, .}/2 + sum_s 2 g_phi |s><s| . |s><s|`` with
    ``Gamma_i`` the total jump rate out of ``i`` plus ``2 g_phi_i``. The last
    term only touches the population of a dephased state; it is diagonal in the
    ``|j'><j|`` basis and so belongs with the unperturbed part. ``L_offdiag``
    holds ``-i[H_nd, .]`` and the jump refill terms.
    """
    M = build_liouvillian(model, extra_hamiltonian).matrix
    # Every term of L_diag is superoperator-diagonal and every term of
    # L_offdiag has a zero diagonal, so the split is read off the full matrix;
    # this keeps L_diag + L_offdiag == L bit for bit.
    Md = np.diag(np.diag(M))
    Mnd = M - Md
    labels = model.basis.labels
    return (Superoperator(Md, labels, dissipative=True, trace_preserving=False),
            Superoperator(Mnd, labels, dissipative=False, trace_preserving=False))


def gamma_total(model: ElectronModel):
    """``Gamma_i``: out-rate of state ``i`` including the dephasing self-energy."""
    return model.out_rates() + 2.0 * model.dephasing_rates()


@dataclass(frozen=True, eq=False)
class DiagonalResolvent:
    """Entrywise action of ``G_d = (L_diag + i omega)^-1``: ``(G_d X)_{j'j} = i X_{j'j} / z_{j'j}``."""

    z: np.ndarray
    omega: float

    def apply(self, X):
        return 1j * np.asarray(X) / self.z


def resolvent_diag(L_diag: Superoperator, omega: float) -> DiagonalResolvent:
    """Closed-form resolvent of a superoperator-diagonal Liouvillian.

    ``z_{j'j} = i (lambda_{j'j} + i omega)`` where ``lambda_{j'j}`` is the
    diagonal entry of ``L_diag``; off the population diagonal this is
    ``eps_j' - eps_j - omega - i (Gamma_j' + Gamma_j) / 2``.
    """
    d = L_diag.dim
    M = L_diag.matrix
    if np.abs(M - np.diag(np.diag(M))).max(initial=0.0) > 0:
        raise ValueError("resolvent_diag needs a superoperator-diagonal Liouvillian")
    lam = unvec(np.diag(M), d)
    z = 1j * (lam + 1j * omega)
    scale = max(np.abs(lam).max(), abs(omega), 1.0)
    if np.any(np.abs(z) <= 1e-15 * scale):
        raise SingularResolvent(f"z_(j',j) vanishes at omega={omega}")
    return DiagonalResolvent(z, omega)


def write_operator_csv(path, A, labels, kind="operator"):
    """Serialize an operator or superoperator as ``row,col,re,im`` lines.

    The header declares the dimension, basis labels and stacking convention.
    """
    A = np.asarray(A)
    with open(path, "w", newline="") as fh:
        fh.write(f"# hfine {kind}\n")
        fh.write(f"# dim={len(labels)} shape={A.shape[0]}x{A.shape[1]}\n")
        fh.write(f"# labels={','.join(labels)}\n")
        fh.write("# stacking=column (vec index = i + d*j for element (i,j))\n")
        fh.write("row,col,re,im\n")
        w = csv.writer(fh, lineterminator="\n")
        for (r, c), v in np.ndenumerate(A):
            if v != 0:
                w.writerow([r, c, repr(float(v.real)), repr(float(v.imag))])


def read_operator_csv(path):
    """Inverse of :func:`write_operator_csv`; returns ``(matrix, labels, kind)``."""
    labels, shape, kind = None, None, "operator"
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("hfine "):
                    kind = body.split(None, 1)[1]
                elif body.startswith("labels="):
                    labels = tuple(body[len("labels="):].split(","))
                elif body.startswith("dim="):
                    shape_s = body.split("shape=")[1]
                    shape = tuple(int(s) for s in shape_s.split("x"))
                continue
            if not line or line.startswith("row"):
                continue
            r, c, re, im = line.split(",")
            rows.append((int(r), int(c), float(re) + 1j * float(im)))
    if labels is None or shape is None:
        raise ValueError(f"{path}: missing header")
    A = np.zeros(shape, dtype=complex)
    for r, c, v in rows:
        A[r, c] = v
    return A, labels, kind


def channels_from_pairs(pairs: Iterable) -> tuple:
    """``[(source, target, rate), ...]`` -> tuple of :class:`JumpChannel`."""
    return tuple(JumpChannel(int(s), int(t), float(r)) for s, t, r in pairs)
