"""Reference computations that share no code with the package solvers.

Everything here works on density matrices directly (row-major flattening,
explicit commutators) rather than on the package's column-stacked
superoperators.
"""

import numpy as np
import scipy.integrate
import scipy.linalg


def lindblad_rhs(H, collapse, rho):
    """``-i[H, rho] + sum_k (C rho C^+ - {C^+ C, rho}/2)``."""
    out = -1j * (H @ rho - rho @ H)
    for C in collapse:
        CdC = C.conj().T @ C
        out += C @ rho @ C.conj().T - 0.5 * (CdC @ rho + rho @ CdC)
    return out


def generator(rhs, d):
    """Matrix of a linear map on d x d matrices in row-major flattening."""
    M = np.zeros((d * d, d * d), dtype=complex)
    for k in range(d * d):
        E = np.zeros(d * d, dtype=complex)
        E[k] = 1.0
        M[:, k] = rhs(E.reshape(d, d)).reshape(-1)
    return M


def rk4(rhs, rho0, t_end, steps):
    rho = np.array(rho0, dtype=complex)
    dt = t_end / steps
    for _ in range(steps):
        k1 = rhs(rho)
        k2 = rhs(rho + 0.5 * dt * k1)
        k3 = rhs(rho + 0.5 * dt * k2)
        k4 = rhs(rho + dt * k3)
        rho = rho + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return rho


def null_steady_state(M, d):
    """Trace-one density matrix spanning the null space of a row-major generator."""
    ns = scipy.linalg.null_space(M, rcond=1e-12)
    if ns.shape[1] != 1:
        raise AssertionError(f"null space dimension {ns.shape[1]}")
    rho = ns[:, 0].reshape(d, d)
    return rho / np.trace(rho)


def laplace_quadrature(M, omega, x, t_max, points=4001):
    """``int_0^t_max exp(i omega t) exp(M t) x dt`` by composite Simpson on an exact propagator."""
    t = np.linspace(0.0, t_max, points)
    step = scipy.linalg.expm(M * (t[1] - t[0]))
    vals = np.empty((points, len(x)), dtype=complex)
    v = np.array(x, dtype=complex)
    for k in range(points):
        vals[k] = np.exp(1j * omega * t[k]) * v
        v = step @ v
    return scipy.integrate.simpson(vals, x=t, axis=0)


def ket(d, i):
    v = np.zeros(d, dtype=complex)
    v[i] = 1.0
    return v


def op(d, f, i):
    """``|f><i|``."""
    return np.outer(ket(d, f), ket(d, i).conj())


def nv_oracle(omega_A, omega_E, Delta, delta, xi, gamma, gamma_s1, gamma_s2, gamma_ce, gamma_s,
              gamma_E_s, gamma_phi=0.0, a2_path=True):
    """NV Hamiltonian and collapse operators written out from the level scheme.

    Basis order ``0, b, d, Ey, A1, A2, E1, E2, S``.
    """
    d = 9
    i0, ib, idd, iey, ia1, ia2, ie1, ie2, isg = range(9)
    H = np.zeros((d, d), dtype=complex)
    H[idd, idd] = xi
    H[ib, ib] = -xi
    H[ib, idd] = H[idd, ib] = delta
    H[ia2, ia2] = Delta
    g = omega_A / np.sqrt(2)
    H[ia1, ib] = H[ib, ia1] = g
    if a2_path:
        H[ia2, idd] = 1j * g
        H[idd, ia2] = -1j * g
    H[iey, i0] = H[i0, iey] = omega_E / 2
    rates = [(iey, i0, gamma), (iey, ib, gamma_ce), (iey, idd, gamma_ce), (isg, i0, gamma_s)]
    for src, to_s in ((ia1, gamma_s1), (ia2, gamma_s2), (ie1, gamma_E_s), (ie2, gamma_E_s)):
        rates += [(src, ib, gamma / 2), (src, idd, gamma / 2), (src, isg, to_s)]
    collapse = [np.sqrt(r) * op(d, t, s) for s, t, r in rates if r > 0]
    if gamma_phi > 0:
        collapse += [np.sqrt(2 * gamma_phi) * op(d, s, s) for s in (iey, ia1, ia2, ie1, ie2)]
    return H, collapse


def joint_two_level(gamma, rabi, detuning, zeeman, coupling, longitudinal):
    """Driven two-level electron coupled to a spin-1/2 nucleus, solved as one system.

    Returns the row-major generator of the joint Lindblad equation, a product
    initial state (nucleus up, electron in the steady state it sees) and the final nuclear spin-up population.
    """
    sz = np.diag([-0.5, 0.5]).astype(complex)
    raise_e = op(2, 1, 0)
    He = np.array([[0, rabi / 2], [rabi / 2, detuning]], dtype=complex)
    I2 = np.eye(2)
    Iplus = op(2, 1, 0)
    H = (np.kron(He, I2) + zeeman * np.kron(I2, sz) + longitudinal * np.kron(sz, sz)
         + coupling * (np.kron(raise_e, Iplus.T) + np.kron(raise_e.conj().T, Iplus)))
    C = [np.sqrt(gamma) * np.kron(raise_e.conj().T, I2)]
    M = generator(lambda r: lindblad_rhs(H, C, r), 4)
    P = null_steady_state(M, 4)
    p_inf = (P[1, 1] + P[3, 3]).real
    Me = generator(lambda r: lindblad_rhs(He + 0.5 * longitudinal * sz, [np.sqrt(gamma) * raise_e.conj().T], r), 2)
    rho0 = np.kron(null_steady_state(Me, 2), np.diag([0.0, 1.0]))
    return M, rho0, p_inf


def fitted_decay_rate(M, rho0, p_inf, t):
    """Exponential rate of the nuclear spin-up population relaxing to ``p_inf``."""
    x0 = np.asarray(rho0).reshape(-1)
    p = []
    for tk in t:
        r = (scipy.linalg.expm(M * tk) @ x0).reshape(4, 4)
        p.append((r[1, 1] + r[3, 3]).real)
    return -np.polyfit(t, np.log(np.abs(np.array(p) - p_inf)), 1)[0]
