"""
Exact Born-rule evaluation and seeded shot sampling of protocol trees
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from config import get_config
from models import LeafVerdict, MeasureNode, ProtocolTree, Verdict, depth, tree_to_dict
from statespace import PureState, apply_operator, encode_complex_array, inner_product

logger = logging.getLogger(__name__)

PRUNE_PROBABILITY = 1e-14
SHOT_BLOCK = 1024
BAND_SIGMAS = 5.0


class DimensionMismatchError(ValueError):
    """Tree operators do not fit the state's party dimensions"""


def check_dimensions(tree: ProtocolTree, dims: Sequence[int]) -> None:
    """Raise DimensionMismatchError unless every node fits the dims it will see"""
    _check_dims(tree, tuple(dims), ())


def _check_dims(node: ProtocolTree, dims: tuple[int, ...], path: tuple[str, ...]) -> None:
    if isinstance(node, LeafVerdict):
        return
    where = '/'.join(path) or 'root'
    if not 0 <= node.party < len(dims):
        raise DimensionMismatchError(f"{where}: party {node.party} does not exist in dims {dims}")
    width = dims[node.party]
    if node.isometry is not None:
        if node.isometry.party_dim != width:
            raise DimensionMismatchError(f"{where}: isometry expects dimension "
                                         f"{node.isometry.party_dim}, party {node.party} has {width}")
        width = node.isometry.matrix.shape[0]
    for outcome in node.outcomes:
        if outcome.operator.shape[1] != width:
            raise DimensionMismatchError(f"{where}: operator '{outcome.label}' expects dimension "
                                         f"{outcome.operator.shape[1]}, got {width}")
        child_dims = dims[:node.party] + (outcome.operator.shape[0],) + dims[node.party + 1:]
        _check_dims(outcome.child, child_dims, path + (outcome.label,))


@dataclass
class BranchRow:
    path: tuple[str, ...]
    verdict: str
    p_phi: float
    p_psi: float


@dataclass
class EvaluationReport:
    p_conclusive_phi: float
    p_conclusive_psi: float
    p_error_phi: float
    p_error_psi: float
    p_inconclusive_phi: float
    p_inconclusive_psi: float
    bound: float
    branches: list[BranchRow] = field(default_factory=list)

    @property
    def mean_conclusive(self) -> float:
        return 0.5 * (self.p_conclusive_phi + self.p_conclusive_psi)

    @property
    def optimality_residual(self) -> float:
        return abs(self.mean_conclusive - self.bound)

    @property
    def max_error(self) -> float:
        return max(self.p_error_phi, self.p_error_psi)

    def conservation_residual(self) -> float:
        """Largest |conclusive + error + inconclusive - 1| over both hypotheses"""
        return max(abs(self.p_conclusive_phi + self.p_error_phi + self.p_inconclusive_phi - 1.0),
                   abs(self.p_conclusive_psi + self.p_error_psi + self.p_inconclusive_psi - 1.0))

    def root_branches(self) -> dict[str, tuple[float, float]]:
        """Probability of each root outcome under (phi, psi)"""
        totals: dict[str, list[float]] = {}
        for row in self.branches:
            if row.path:
                entry = totals.setdefault(row.path[0], [0.0, 0.0])
                entry[0] += row.p_phi
                entry[1] += row.p_psi
        return {label: (p[0], p[1]) for label, p in totals.items()}

    def to_dict(self) -> dict:
        return {
            'p_conclusive_phi': self.p_conclusive_phi,
            'p_conclusive_psi': self.p_conclusive_psi,
            'p_error_phi': self.p_error_phi,
            'p_error_psi': self.p_error_psi,
            'p_inconclusive_phi': self.p_inconclusive_phi,
            'p_inconclusive_psi': self.p_inconclusive_psi,
            'bound': self.bound,
            'mean_conclusive': self.mean_conclusive,
            'optimality_residual': self.optimality_residual,
            'branches': [{'path': list(r.path), 'verdict': r.verdict, 'p_phi': r.p_phi, 'p_psi': r.p_psi}
                         for r in self.branches],
        }

    def format_table(self) -> str:
        lines = [
            f"{'':16}{'phi':>14}{'psi':>14}",
            f"{'conclusive':16}{self.p_conclusive_phi:>14.10f}{self.p_conclusive_psi:>14.10f}",
            f"{'error':16}{self.p_error_phi:>14.3e}{self.p_error_psi:>14.3e}",
            f"{'inconclusive':16}{self.p_inconclusive_phi:>14.10f}{self.p_inconclusive_psi:>14.10f}",
            f"bound 1-|<phi|psi>| = {self.bound:.10f}   residual = {self.optimality_residual:.3e}",
            '',
            f"{'branch':32}{'verdict':>14}{'p(phi)':>14}{'p(psi)':>14}",
        ]
        for row in self.branches:
            lines.append(f"{'/'.join(row.path) or '-':32}{row.verdict:>14}"
                         f"{row.p_phi:>14.10f}{row.p_psi:>14.10f}")
        return '\n'.join(lines)


def evaluate_exact(tree: ProtocolTree, phi: PureState, psi: PureState) -> EvaluationReport:
    """Verdict probabilities of `tree` under both hypotheses"""
    if phi.dims != psi.dims:
        raise DimensionMismatchError(f"States live on different spaces: {phi.dims} vs {psi.dims}")
    check_dimensions(tree, phi.dims)

    totals = {(h, v): 0.0 for h in ('phi', 'psi') for v in Verdict}
    rows: list[BranchRow] = []
    stack = [(tree, phi.dims, phi.amplitudes, psi.amplitudes, ())]
    while stack:
        node, dims, a_phi, a_psi, path = stack.pop()
        if isinstance(node, LeafVerdict):
            p_phi = float(np.vdot(a_phi, a_phi).real)
            p_psi = float(np.vdot(a_psi, a_psi).real)
            totals[('phi', node.verdict)] += p_phi
            totals[('psi', node.verdict)] += p_psi
            rows.append(BranchRow(path, node.verdict.value, p_phi, p_psi))
            continue
        if node.isometry is not None:
            _, a_phi = apply_operator(node.isometry.matrix, node.party, dims, a_phi)
            dims, a_psi = apply_operator(node.isometry.matrix, node.party, dims, a_psi)
        for outcome in reversed(node.outcomes):
            child_dims, c_phi = apply_operator(outcome.operator, node.party, dims, a_phi)
            _, c_psi = apply_operator(outcome.operator, node.party, dims, a_psi)
            if max(np.vdot(c_phi, c_phi).real, np.vdot(c_psi, c_psi).real) < PRUNE_PROBABILITY:
                continue
            stack.append((outcome.child, child_dims, c_phi, c_psi, path + (outcome.label,)))

    rows.sort(key=lambda r: r.path)
    report = EvaluationReport(
        p_conclusive_phi=totals[('phi', Verdict.PHI)],
        p_conclusive_psi=totals[('psi', Verdict.PSI)],
        p_error_phi=totals[('phi', Verdict.PSI)],
        p_error_psi=totals[('psi', Verdict.PHI)],
        p_inconclusive_phi=totals[('phi', Verdict.INCONCLUSIVE)],
        p_inconclusive_psi=totals[('psi', Verdict.INCONCLUSIVE)],
        bound=1.0 - abs(inner_product(phi, psi)),
        branches=rows,
    )
    logger.debug(f"Evaluated {len(rows)} leaf branches; mean conclusive {report.mean_conclusive:.12f}")
    return report


@dataclass
class OptimalityVerdict:
    passed: bool
    optimality_residual: float
    max_error: float
    tol: float
    reasons: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {'passed': self.passed, 'optimality_residual': self.optimality_residual,
                'max_error': self.max_error, 'tol': self.tol, 'reasons': self.reasons}


def check_optimality(report: EvaluationReport, tol: float) -> OptimalityVerdict:
    """Pass iff the mean conclusive probability hits the bound and errors stay below tol/10"""
    if not tol > 0:
        raise ValueError(f"Tolerance must be positive, got {tol}")
    reasons = []
    if report.optimality_residual > tol:
        reasons.append(f"conclusive probability misses the bound by {report.optimality_residual:.3e}")
    if report.max_error > tol / 10:
        reasons.append(f"misidentification probability {report.max_error:.3e} exceeds {tol / 10:.1e}")
    return OptimalityVerdict(not reasons, report.optimality_residual, report.max_error, tol, reasons)


# ---------------------------------------------------------------------------
# Shot sampling
# ---------------------------------------------------------------------------

@dataclass
class ShotCounts:
    """Verdict counts for one prepared state; aborted shots hit a zero-norm branch"""
    counts: dict[str, int]
    shots: int
    seed: int
    aborted: int = 0

    def fraction(self, verdict: str) -> float:
        return self.counts.get(verdict, 0) / self.shots

    def merge(self, other: 'ShotCounts') -> 'ShotCounts':
        counts = {v: self.counts.get(v, 0) + other.counts.get(v, 0)
                  for v in sorted(set(self.counts) | set(other.counts))}
        return ShotCounts(counts, self.shots + other.shots, self.seed, self.aborted + other.aborted)

    def to_dict(self) -> dict:
        return {'counts': dict(sorted(self.counts.items())), 'shots': self.shots,
                'seed': self.seed, 'aborted': self.aborted}


def binomial_band(p: float, shots: int, sigmas: float = BAND_SIGMAS) -> float:
    return sigmas * float(np.sqrt(max(p * (1.0 - p), 0.0) / shots))


def shot_uniforms(seed: int, start: int, stop: int, width: int) -> np.ndarray:
    """Uniform draws for shots [start, stop), one row per shot

    Shot k reads row k % SHOT_BLOCK of the block seeded by (seed, k // SHOT_BLOCK),
    so a shot's draws do not depend on how the range is split.
    """
    width = max(width, 1)
    rows = []
    for block in range(start // SHOT_BLOCK, (stop - 1) // SHOT_BLOCK + 1):
        draws = np.random.default_rng([seed, block]).random((SHOT_BLOCK, width))
        base = block * SHOT_BLOCK
        rows.append(draws[max(start, base) - base:min(stop, base + SHOT_BLOCK) - base])
    return np.vstack(rows)


def sample_range(tree: ProtocolTree, prepared: PureState, start: int, stop: int,
                 seed: int) -> ShotCounts:
    """Sample shots [start, stop) in process"""
    uniforms = shot_uniforms(seed, start, stop, depth(tree))
    counts = {v.value: 0 for v in Verdict}
    aborted = 0
    stack = [(tree, prepared.dims, prepared.amplitudes, np.arange(stop - start), 0)]
    while stack:
        node, dims, amps, shots, level = stack.pop()
        if isinstance(node, LeafVerdict):
            counts[node.verdict.value] += len(shots)
            continue
        if node.isometry is not None:
            dims, amps = apply_operator(node.isometry.matrix, node.party, dims, amps)
        children = [apply_operator(o.operator, node.party, dims, amps) for o in node.outcomes]
        probs = np.array([np.vdot(a, a).real for _, a in children])
        total = probs.sum()
        if total <= 0.0:
            logger.warning(f"State annihilated at level {level}; aborting {len(shots)} shots")
            aborted += len(shots)
            continue
        cumulative = np.cumsum(probs) / total
        choice = np.searchsorted(cumulative, uniforms[shots, level], side='right')
        choice = np.minimum(choice, int(np.flatnonzero(probs > 0.0)[-1]))
        for k, outcome in enumerate(node.outcomes):
            picked = shots[choice == k]
            if not len(picked):
                continue
            if probs[k] <= 0.0:
                logger.warning(f"Zero-norm branch '{outcome.label}' sampled; aborting {len(picked)} shots")
                aborted += len(picked)
                continue
            child_dims, child_amps = children[k]
            stack.append((outcome.child, child_dims, child_amps / np.sqrt(probs[k]), picked, level + 1))
    return ShotCounts(counts, stop - start, seed, aborted)


def run_shots(tree: ProtocolTree, prepared: PureState, shots: int, seed: int, *,
              dispatch: Optional[str] = None, batch_size: Optional[int] = None) -> ShotCounts:
    """Sample `shots` runs of `tree` on `prepared`

    dispatch='celery' sends one task per batch; the counts are identical to
    the in-process result.
    """
    if shots < 1:
        raise ValueError(f"shots must be >= 1, got {shots}")
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    check_dimensions(tree, prepared.dims)
    settings = get_config()
    dispatch = dispatch or settings.SHOT_DISPATCH
    batches = settings.shot_batches(shots, batch_size)

    if dispatch == 'local':
        parts = [sample_range(tree, prepared, start, stop, seed) for start, stop in batches]
    elif dispatch == 'celery':
        from tasks import sample_shots_task

        logger.info(f"Dispatching {shots} shots to {len(batches)} workers")
        tree_data = tree_to_dict(tree)
        amplitudes = encode_complex_array(prepared.amplitudes)
        pending = [sample_shots_task.delay(tree_data, list(prepared.dims), amplitudes, start, stop, seed)
                   for start, stop in batches]
        parts = [ShotCounts(**result.get()) for result in pending]
    else:
        raise ValueError(f"Unknown shot dispatch {dispatch!r}; expected 'local' or 'celery'")

    result = parts[0]
    for part in parts[1:]:
        result = result.merge(part)
    result.shots, result.seed = shots, seed
    if result.aborted:
        logger.warning(f"{result.aborted} of {shots} shots aborted on zero-norm branches")
    return result
