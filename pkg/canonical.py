"""
Canonical form of a pair of pure states across one cut

After a local unitary on the cut party both states share the weights t_i
and every complement overlap <mu_i|nu_i> has phase 0 or pi relative to
<phi|psi>.
"""

import logging
from dataclasses import dataclass, asdict

import numpy as np

from statespace import (
    ZERO_WEIGHT,
    OverlapMatrix,
    PartySpace,
    PureState,
    encode_complex_array,
    from_party_matrix,
    inner_product,
)

logger = logging.getLogger(__name__)

OMEGA_DEGENERACY = 1e-14
THETA_FEASIBILITY = 1e-12
THETA_TIE = 1e-15
DIAGONAL_TOLERANCE = 1e-14
DIAGONAL_WARNING = 1e-12
EQUALIZATION_TOLERANCE = 1e-12
PHASE_TOLERANCE = 1e-8
SIGN_DEAD_ZONE = 1e-12
MIN_OVERLAP = 1e-12


class PreconditionError(ValueError):
    """Inputs violate a solver precondition"""


class CanonicalizationError(RuntimeError):
    """The equalization sweep did not converge"""


def solve_omega(a: complex, b: complex) -> float:
    """Angle w in [0, pi) with Im(a e^{-iw} + b e^{iw}) = 0"""
    a, b = complex(a), complex(b)
    p = a.imag + b.imag
    q = b.real - a.real
    if abs(p) < OMEGA_DEGENERACY and abs(q) < OMEGA_DEGENERACY:
        return 0.0
    omega = float(np.arctan2(-p, q))
    if omega < 0.0:
        omega += np.pi
    if omega >= np.pi:
        omega -= np.pi
    return omega


def omega_residual(a: complex, b: complex, omega: float) -> float:
    return abs((a * np.exp(-1j * omega) + b * np.exp(1j * omega)).imag)


def theta_residual(A: float, B: float, C: float, theta: float) -> float:
    return abs(C + A * np.cos(2.0 * theta) + B * np.sin(2.0 * theta))


def solve_theta(A: float, B: float, C: float) -> float:
    """Angle t with C + A cos 2t + B sin 2t = 0

    Uses A cos x + B sin x = R cos(x - d); both branches
    x = d -/+ arccos(-C/R) are tried and the smaller residual wins, the
    minus branch on ties.
    """
    R = float(np.hypot(A, B))
    if abs(C) > R + THETA_FEASIBILITY:
        raise PreconditionError(f"No angle solves C + A cos2t + B sin2t = 0 for "
                                f"A={A!r}, B={B!r}, C={C!r}")
    if R == 0.0:
        return 0.0
    delta = float(np.arctan2(B, A))
    spread = float(np.arccos(np.clip(-C / R, -1.0, 1.0)))
    minus = 0.5 * (delta - spread)
    plus = 0.5 * (delta + spread)
    if theta_residual(A, B, C, plus) + THETA_TIE < theta_residual(A, B, C, minus):
        return plus
    return minus


@dataclass(frozen=True)
class PairRotation:
    """[[cos t, sin t e^{iw}], [sin t e^{-iw}, -cos t]] on rows i, j"""
    i: int
    j: int
    theta: float
    omega: float

    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.theta), np.sin(self.theta)
        return np.array([[c, s * np.exp(1j * self.omega)],
                         [s * np.exp(-1j * self.omega), -c]], dtype=complex)

    def embed(self, n: int) -> np.ndarray:
        full = np.eye(n, dtype=complex)
        full[np.ix_([self.i, self.j], [self.i, self.j])] = self.matrix()
        return full

    def apply_rows(self, rows: np.ndarray) -> None:
        """Rotate rows i and j of `rows` in place"""
        rows[[self.i, self.j]] = self.matrix() @ rows[[self.i, self.j]]


@dataclass(frozen=True)
class RotationRecord:
    """Solver data behind one equalizing rotation"""
    i: int
    j: int
    theta: float
    omega: float
    x: float
    y: float
    A: float
    B: float
    C: float
    equalization_residual: float
    phase_residual: float


def _segment_vector(z: np.ndarray, u: np.ndarray, v: np.ndarray, kappa: float) -> np.ndarray:
    """Unit y in span{u, v} with y^dagger z y = (1 - kappa) u^dagger z u + kappa v^dagger z v

    u and v are orthonormal and 0 <= kappa <= 1. The 2x2 compression of z
    to span{u, v} has an elliptical numerical range holding the segment
    between the two Rayleigh quotients.
    """
    start = np.vdot(u, z @ u)
    delta = np.vdot(v, z @ v) - start
    if kappa <= 0.0 or delta == 0.0:
        return u
    if kappa >= 1.0:
        return v
    a = np.vdot(u, z @ v) / delta
    b = np.vdot(v, z @ u) / delta
    omega = solve_omega(a, b)
    g = float((a * np.exp(-1j * omega) + b * np.exp(1j * omega)).real)
    # (1 - kappa) s^2 + g s - kappa = 0 always has a root s >= 0
    root = np.sqrt(g * g + 4.0 * kappa * (1.0 - kappa))
    s = 2.0 * kappa / (g + root) if g > 0.0 else (root - g) / (2.0 * (1.0 - kappa))
    y = u + s * np.exp(-1j * omega) * v
    return y / np.linalg.norm(y)


def _zero_quotient_vector(z: np.ndarray, tolerance: float) -> np.ndarray:
    """Unit x with x^dagger z x = 0 for a traceless square z

    The diagonal of z averages to zero, so zero lies on a diagonal entry,
    on a segment between two entries or inside a triangle of three.
    """
    m = z.shape[0]
    eye = np.eye(m, dtype=complex)
    d = np.diagonal(z)
    k = int(np.argmin(np.abs(d)))
    if abs(d[k]) <= tolerance:
        return eye[k]

    best_pair, best_miss = None, np.inf
    for i in range(m):
        for j in range(i + 1, m):
            if (d[i] * np.conj(d[j])).real >= 0.0:
                continue
            kappa = abs(d[i]) / (abs(d[i]) + abs(d[j]))
            miss = abs((1.0 - kappa) * d[i] + kappa * d[j])
            if miss < best_miss:
                best_pair, best_miss = (i, j, kappa), miss
    if best_pair is not None and best_miss <= tolerance:
        i, j, kappa = best_pair
        return _segment_vector(z, eye[i], eye[j], kappa)

    best_triangle, best_margin = None, -np.inf
    for i in range(m):
        for j in range(i + 1, m):
            for k in range(j + 1, m):
                edges = np.array([[d[i].real - d[k].real, d[j].real - d[k].real],
                                  [d[i].imag - d[k].imag, d[j].imag - d[k].imag]])
                scale = max(abs(d[i]), abs(d[j]), abs(d[k]))
                if abs(np.linalg.det(edges)) <= DIAGONAL_TOLERANCE * scale * scale:
                    continue
                li, lj = np.linalg.solve(edges, [-d[k].real, -d[k].imag])
                weights = (li, lj, 1.0 - li - lj)
                if min(weights) > best_margin:
                    best_triangle, best_margin = (i, j, k, weights), min(weights)
    if best_triangle is None or best_margin < -tolerance:
        if best_pair is None:
            raise CanonicalizationError(f"No diagonal combination of {d.tolist()} reaches zero")
        i, j, kappa = best_pair
        return _segment_vector(z, eye[i], eye[j], kappa)

    i, j, k, (li, lj, lk) = best_triangle
    li, lj, lk = max(li, 0.0), max(lj, 0.0), max(lk, 0.0)
    edge = li + lj
    if edge <= 0.0:
        return eye[k]
    # the ray from d_k through zero meets the edge (d_i, d_j) at the quotient of y
    y = _segment_vector(z, eye[i], eye[j], lj / edge)
    return _segment_vector(z, y, eye[k], lk / (lk + edge))


def constant_diagonal_unitary(M: OverlapMatrix | np.ndarray) -> np.ndarray:
    """Unitary W with every diagonal entry of W M W^dagger equal to tr(M)/n

    Row k of W is picked from the orthogonal complement of rows 0..k-1 so
    that its Rayleigh quotient on M is the mean diagonal of the compressed
    block, which the convex numerical range always contains. n - 1 picks
    make the diagonal constant.
    """
    entries = M.entries if isinstance(M, OverlapMatrix) else np.asarray(M)
    work = np.array(entries, dtype=complex)
    n = work.shape[0]
    target = np.trace(work) / n
    tolerance = DIAGONAL_TOLERANCE * max(1.0, float(np.max(np.abs(work), initial=0.0)))

    frame = np.eye(n, dtype=complex)
    rows: list[np.ndarray] = []
    while frame.shape[1] > 1:
        block = frame.conj().T @ work @ frame
        m = block.shape[0]
        z = block - (np.trace(block) / m) * np.eye(m)
        if np.max(np.abs(np.diagonal(z))) <= tolerance:
            break
        x = _zero_quotient_vector(z, tolerance)
        # orthonormal completion with x first
        q, _ = np.linalg.qr(np.column_stack([x, np.eye(m, dtype=complex)]))
        frame = frame @ q
        rows.append(frame[:, 0])
        frame = frame[:, 1:]
    rows.extend(frame.T)
    unitary = np.array(rows).conj()

    spread = float(np.max(np.abs(np.diagonal(unitary @ work @ unitary.conj().T) - target)))
    if spread >= DIAGONAL_WARNING * max(1.0, float(np.max(np.abs(work), initial=0.0))):
        logger.warning(f"Constant-diagonal basis left spread {spread:.3e} (n={n})")
    logger.debug(f"Constant-diagonal basis for n={n} with spread {spread:.3e}")
    return unitary


@dataclass(frozen=True, eq=False)
class CanonicalForm:
    """(U (x) I)|phi> = sum_i sqrt(t_i)|i>|mu_i>, likewise psi with nu_i

    nu carries the true phase of psi; rho_i = Re(e^{-i global_phase}<mu_i|nu_i>).
    Rows of mu / nu are zero for absent (zero-weight) terms.
    """
    space: PartySpace
    cut_party: int
    alice_unitary: np.ndarray
    t: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    rho: np.ndarray
    sign: np.ndarray
    global_phase: float
    overlap: complex
    rotations: tuple[RotationRecord, ...] = ()

    @property
    def n(self) -> int:
        return len(self.t)

    @property
    def present(self) -> np.ndarray:
        return self.t > ZERO_WEIGHT

    @property
    def complement_space(self) -> PartySpace:
        return self.space.complement(self.cut_party)

    def alice_vector(self, i: int) -> np.ndarray:
        """U^dagger|i> in the cut party's original coordinates"""
        return self.alice_unitary[i].conj().copy()

    def term_overlaps(self) -> np.ndarray:
        return np.einsum('ij,ij->i', self.mu.conj(), self.nu)

    def aligned_overlaps(self) -> np.ndarray:
        return np.exp(-1j * self.global_phase) * self.term_overlaps()

    def reconstruct(self, which: str) -> np.ndarray:
        """Amplitudes of sum_i sqrt(t_i) U^dagger|i> (x) mu_i (or nu_i), original frame"""
        rows = self.mu if which == 'phi' else self.nu
        mat = self.alice_unitary.conj().T @ (np.sqrt(self.t)[:, None] * rows)
        return from_party_matrix(mat, self.space.dims, self.cut_party)

    def check_invariants(self, phi: PureState, psi: PureState) -> dict[str, float]:
        """Residual of every canonical-form invariant (smaller is better)"""
        aligned = self.aligned_overlaps()
        weights_phi = np.sum(np.abs(self.alice_unitary @ phi.matrix(self.cut_party)) ** 2, axis=1)
        weights_psi = np.sum(np.abs(self.alice_unitary @ psi.matrix(self.cut_party)) ** 2, axis=1)
        present = self.present
        return {
            'weight_sum': abs(float(np.sum(self.t)) - 1.0),
            'aligned_overlap': abs(float(np.sum(self.t * self.rho)) - abs(self.overlap)),
            'overlap_preservation': abs(complex(np.sum(self.t * self.term_overlaps())) -
                                        inner_product(phi, psi)),
            'phase_alignment': float(np.max(np.abs(aligned.imag[present]), initial=0.0)),
            'unitarity': float(np.max(np.abs(self.alice_unitary.conj().T @ self.alice_unitary -
                                              np.eye(self.n)))),
            'equal_weights': float(np.max(np.abs(weights_phi - weights_psi))),
            'reconstruction_phi': float(np.max(np.abs(self.reconstruct('phi') - phi.amplitudes))),
            'reconstruction_psi': float(np.max(np.abs(self.reconstruct('psi') - psi.amplitudes))),
        }

    def to_dict(self) -> dict:
        return {
            'cut_party': self.cut_party,
            'dims': list(self.space.dims),
            'alice_unitary': encode_complex_array(self.alice_unitary),
            't': [float(v) for v in self.t],
            'mu': encode_complex_array(self.mu),
            'nu': encode_complex_array(self.nu),
            'rho': [float(v) for v in self.rho],
            'sign': [int(v) for v in self.sign],
            'global_phase': float(self.global_phase),
            'overlap': encode_complex_array(self.overlap),
            'rotations': [asdict(r) for r in self.rotations],
        }


def _row_weights(rows: np.ndarray) -> np.ndarray:
    return np.sum(np.abs(rows) ** 2, axis=1)


def _is_canonical(phi_rows: np.ndarray, psi_rows: np.ndarray) -> bool:
    r, s = _row_weights(phi_rows), _row_weights(psi_rows)
    if np.max(np.abs(r - s)) > EQUALIZATION_TOLERANCE:
        return False
    diag = np.einsum('ij,ij->i', phi_rows.conj(), psi_rows)
    return bool(np.all(np.abs(diag.imag) <= EQUALIZATION_TOLERANCE))


def _equalize(phi_rows: np.ndarray, psi_rows: np.ndarray,
              unitary: np.ndarray) -> list[RotationRecord]:
    """Rotate pairs of rows until both states carry equal weights on every row

    Works in place on the three arrays. Each rotation pairs the largest
    surplus r_i > s_i with the largest deficit r_j < s_j and equalizes row i.
    """
    n = phi_rows.shape[0]
    fixed: set[int] = set()
    records: list[RotationRecord] = []
    limit = 10 * n * n
    for _ in range(limit):
        diff = _row_weights(phi_rows) - _row_weights(psi_rows)
        if np.max(np.abs(diff)) <= EQUALIZATION_TOLERANCE:
            return records
        active = [k for k in range(n) if k not in fixed]
        i = max(active, key=lambda k: diff[k])
        j = min(active, key=lambda k: diff[k])
        if not diff[i] > 0.0 > diff[j] or max(diff[i], -diff[j]) <= EQUALIZATION_TOLERANCE:
            # leftover error sits on rows fixed earlier
            fixed.clear()
            continue

        c_ij = np.vdot(phi_rows[j], psi_rows[i])
        c_ji = np.vdot(phi_rows[i], psi_rows[j])
        omega = solve_omega(c_ij, c_ji)
        x = 2.0 * (np.exp(1j * omega) * np.vdot(phi_rows[i], phi_rows[j])).real
        y = 2.0 * (np.exp(1j * omega) * np.vdot(psi_rows[i], psi_rows[j])).real
        A = float(diff[i] - diff[j])
        B = float(x - y)
        C = float(diff[i] + diff[j])
        theta = solve_theta(A, B, C)

        rotation = PairRotation(i, j, theta, omega)
        rotation.apply_rows(phi_rows)
        rotation.apply_rows(psi_rows)
        rotation.apply_rows(unitary)
        fixed.add(i)

        r, s = _row_weights(phi_rows), _row_weights(psi_rows)
        phase_residual = 0.0
        for k in (i, j):
            weight = 0.5 * (r[k] + s[k])
            if weight > ZERO_WEIGHT:
                phase_residual = max(phase_residual,
                                     abs(np.vdot(phi_rows[k], psi_rows[k]).imag) / weight)
        record = RotationRecord(i, j, float(theta), float(omega), float(x), float(y),
                                A, B, C, float(abs(r[i] - s[i])), float(phase_residual))
        if phase_residual > PHASE_TOLERANCE:
            logger.warning(f"Rotation ({i}, {j}) left a phase residual {phase_residual:.3e}")
        logger.debug(f"Equalized row {i} against {j}: theta={theta:.6f} omega={omega:.6f} "
                     f"A={A:.3e} B={B:.3e} C={C:.3e}")
        records.append(record)

    diff = _row_weights(phi_rows) - _row_weights(psi_rows)
    logger.error(f"Equalization sweep did not converge after {limit} steps "
                 f"(max weight gap {np.max(np.abs(diff)):.3e}, n={n})")
    raise CanonicalizationError(f"No convergence after {limit} rotations; "
                                f"weight gaps {diff.tolist()}")


def canonicalize(phi: PureState, psi: PureState, party: int = 0) -> CanonicalForm:
    """Canonical form of (phi, psi) across `party` versus everyone else"""
    if phi.dims != psi.dims:
        raise PreconditionError(f"States live on different spaces: {phi.dims} vs {psi.dims}")
    if not 0 <= party < phi.space.n_parties:
        raise PreconditionError(f"Cut party {party} out of range for dims {phi.dims}")
    overlap = inner_product(phi, psi)
    if abs(overlap) <= MIN_OVERLAP:
        raise PreconditionError(f"|<phi|psi>| = {abs(overlap):.3e} is too small to canonicalize; "
                                "orthogonal pairs need the orthogonal compiler")

    global_phase = float(np.angle(overlap))
    phi_rows = phi.matrix(party).copy()
    psi_rows = np.exp(-1j * global_phase) * psi.matrix(party)
    n = phi.dims[party]
    unitary = np.eye(n, dtype=complex)
    rotations: list[RotationRecord] = []

    if not _is_canonical(phi_rows, psi_rows):
        w = constant_diagonal_unitary(psi_rows @ phi_rows.conj().T)
        phi_rows, psi_rows, unitary = w @ phi_rows, w @ psi_rows, w
        rotations = _equalize(phi_rows, psi_rows, unitary)

    r, s = _row_weights(phi_rows), _row_weights(psi_rows)
    t = 0.5 * (r + s)
    t = t / np.sum(t)
    mu = np.zeros_like(phi_rows)
    nu = np.zeros_like(psi_rows)
    rho = np.zeros(n)
    sign = np.zeros(n, dtype=int)
    for k in range(n):
        if t[k] <= ZERO_WEIGHT:
            t[k] = 0.0
            continue
        if r[k] > ZERO_WEIGHT:
            mu[k] = phi_rows[k] / np.sqrt(r[k])
        if s[k] > ZERO_WEIGHT:
            nu[k] = psi_rows[k] / np.sqrt(s[k])
        rho[k] = float(np.vdot(mu[k], nu[k]).real)
        if rho[k] > SIGN_DEAD_ZONE:
            sign[k] = 1
        elif rho[k] < -SIGN_DEAD_ZONE:
            sign[k] = -1
    nu = np.exp(1j * global_phase) * nu

    form = CanonicalForm(phi.space, party, unitary, t, mu, nu, rho, sign,
                         global_phase, overlap, tuple(rotations))
    logger.debug(f"Canonical form on party {party}: t={np.round(t, 6).tolist()} "
                 f"signs={sign.tolist()} after {len(rotations)} rotations")
    return form
