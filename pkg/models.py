"""
Protocol tree models for compiled LOCC discrimination protocols
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterator, Optional, Union

import numpy as np

from statespace import (
    decode_complex_array,
    encode_complex_array,
    isometry_residual,
    to_json_text,
)

logger = logging.getLogger(__name__)


class ProtocolFileError(ValueError):
    """Protocol file cannot be parsed into a tree"""


class Verdict(str, Enum):
    """Final announcement of a protocol run"""
    PHI = 'phi'
    PSI = 'psi'
    INCONCLUSIVE = 'inconclusive'


@dataclass(frozen=True, eq=False)
class AncillaIsometry:
    """Embedding of one party's space (dim d) into ancilla (x) party (dim m*d), ancilla slow"""
    source_party: int
    matrix: np.ndarray
    ancilla_dim: int
    branch_labels: tuple[str, ...] = ()

    @property
    def party_dim(self) -> int:
        return self.matrix.shape[1]

    def residual(self) -> float:
        return isometry_residual(self.matrix)

    def __repr__(self):
        return f'<AncillaIsometry party={self.source_party} m={self.ancilla_dim} d={self.party_dim}>'


@dataclass(frozen=True, eq=False)
class Outcome:
    """One measurement outcome: its Kraus operator and the subtree that follows"""
    label: str
    operator: np.ndarray
    child: 'ProtocolTree'


@dataclass(frozen=True, eq=False)
class MeasureNode:
    """Local measurement on `party`, optionally preceded by an ancilla isometry"""
    party: int
    outcomes: tuple[Outcome, ...]
    isometry: Optional[AncillaIsometry] = None

    @property
    def labels(self) -> list[str]:
        return [o.label for o in self.outcomes]

    @property
    def operators(self) -> list[np.ndarray]:
        return [o.operator for o in self.outcomes]

    @property
    def input_dim(self) -> int:
        """Party dimension the measurement operators act on"""
        return self.outcomes[0].operator.shape[1]

    def completeness_residual(self) -> float:
        total = sum(op.conj().T @ op for op in self.operators)
        return float(np.max(np.abs(total - np.eye(self.input_dim))))

    def branch(self, label: str) -> 'ProtocolTree':
        for outcome in self.outcomes:
            if outcome.label == label:
                return outcome.child
        raise KeyError(label)

    def __repr__(self):
        iso = f' m={self.isometry.ancilla_dim}' if self.isometry else ''
        return f'<MeasureNode party={self.party}{iso} outcomes={self.labels}>'


@dataclass(frozen=True)
class LeafVerdict:
    verdict: Verdict

    def __repr__(self):
        return f'<LeafVerdict {self.verdict.value}>'


ProtocolTree = Union[MeasureNode, LeafVerdict]


def iter_nodes(tree: ProtocolTree, path: tuple[str, ...] = ()) -> Iterator[tuple[tuple[str, ...], ProtocolTree]]:
    """Depth-first (path, node) pairs, outcomes in stored order"""
    yield path, tree
    if isinstance(tree, MeasureNode):
        for outcome in tree.outcomes:
            yield from iter_nodes(outcome.child, path + (outcome.label,))


def depth(tree: ProtocolTree) -> int:
    """Number of measurement nodes on the longest root-to-leaf path"""
    if isinstance(tree, LeafVerdict):
        return 0
    return 1 + max(depth(o.child) for o in tree.outcomes)


def measure_count(tree: ProtocolTree) -> int:
    return sum(1 for _, node in iter_nodes(tree) if isinstance(node, MeasureNode))


def tree_to_dict(tree: ProtocolTree) -> dict:
    if isinstance(tree, LeafVerdict):
        return {'kind': 'verdict', 'verdict': tree.verdict.value}
    data: dict[str, Any] = {
        'kind': 'measure',
        'party': tree.party,
        'labels': tree.labels,
        'operators': [encode_complex_array(op) for op in tree.operators],
        'branches': {o.label: tree_to_dict(o.child) for o in tree.outcomes},
    }
    if tree.isometry is not None:
        data['isometry'] = encode_complex_array(tree.isometry.matrix)
        data['ancilla_dim'] = tree.isometry.ancilla_dim
    return data


def _node_from_dict(data: Any, where: str) -> ProtocolTree:
    if not isinstance(data, dict):
        raise ProtocolFileError(f"{where}: node must be an object")
    kind = data.get('kind')
    if kind == 'verdict':
        try:
            return LeafVerdict(Verdict(data['verdict']))
        except (KeyError, ValueError) as e:
            raise ProtocolFileError(f"{where}: bad verdict {data.get('verdict')!r}") from e
    if kind != 'measure':
        raise ProtocolFileError(f"{where}: unknown node kind {kind!r}")

    try:
        party = int(data['party'])
        operators = [decode_complex_array(op) for op in data['operators']]
        branches = data['branches']
        labels = [str(label) for label in data.get('labels', sorted(branches))]
    except (KeyError, TypeError, ValueError) as e:
        raise ProtocolFileError(f"{where}: malformed measure node ({e})") from e
    if len(labels) != len(operators) or set(labels) != set(branches):
        raise ProtocolFileError(f"{where}: labels, operators and branches disagree")
    if any(op.ndim != 2 for op in operators):
        raise ProtocolFileError(f"{where}: operators must be matrices")

    isometry = None
    if 'isometry' in data:
        try:
            matrix = decode_complex_array(data['isometry'])
            ancilla_dim = int(data['ancilla_dim'])
        except (KeyError, TypeError, ValueError) as e:
            raise ProtocolFileError(f"{where}: malformed isometry ({e})") from e
        if matrix.ndim != 2 or matrix.shape[0] != ancilla_dim * matrix.shape[1]:
            raise ProtocolFileError(f"{where}: isometry shape {matrix.shape} does not match "
                                    f"ancilla_dim {ancilla_dim}")
        isometry = AncillaIsometry(party, matrix, ancilla_dim, tuple(labels))

    outcomes = tuple(Outcome(label, op, _node_from_dict(branches[label], f"{where}/{label}"))
                     for label, op in zip(labels, operators))
    return MeasureNode(party, outcomes, isometry)


def tree_from_dict(data: Any) -> ProtocolTree:
    return _node_from_dict(data, 'root')


def write_protocol(path: str, tree: ProtocolTree) -> None:
    with open(path, 'w', encoding='utf-8') as fh:
        fh.write(to_json_text(tree_to_dict(tree)))
    logger.info(f"Wrote protocol with {measure_count(tree)} measurement nodes to {path}")


def read_protocol(path: str) -> ProtocolTree:
    try:
        with open(path, encoding='utf-8') as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        logger.error(f"Protocol file {path} is not valid JSON: {e}")
        raise ProtocolFileError(f"{path}: {e}") from e
    return tree_from_dict(data)
