"""Reader/writer for TU-Dortmund graph classification datasets.

Layout of a dataset directory ``<dir>/<NAME>_*.txt``:

    NAME_A.txt               one edge per line, ``i, j`` (1-based global vertex ids).
                             Commas and/or any whitespace separate the two ids; each
                             undirected edge may appear once or in both directions.
    NAME_graph_indicator.txt one line per vertex: 1-based id of the graph it belongs to.
    NAME_graph_labels.txt    one line per graph: class id (any integer).
    NAME_node_labels.txt     optional, one line per vertex: integer vertex label.

Blank lines are ignored everywhere. Lines of ``_node_labels.txt`` may carry extra
comma-separated columns; only the first is used.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

_SEP = re.compile(r"[,\s]+")


class DatasetFormatError(ValueError):
    """Malformed dataset file."""


@dataclass(frozen=True)
class Graph:
    num_vertices: int
    edges: tuple[tuple[int, int], ...]
    vertex_labels: tuple[int, ...]
    graph_label: int

    def __post_init__(self):
        if len(self.vertex_labels) != self.num_vertices:
            raise ValueError("vertex_labels length must equal num_vertices")
        seen = set()
        for i, j in self.edges:
            if not (0 <= i < self.num_vertices and 0 <= j < self.num_vertices):
                raise ValueError(f"edge ({i}, {j}) out of range")
            if i == j:
                raise ValueError("self-loop edges are not stored explicitly")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)

    def adjacency(self) -> np.ndarray:
        """Symmetric 0/1 adjacency without self-loops."""
        A = np.zeros((self.num_vertices, self.num_vertices))
        for i, j in self.edges:
            A[i, j] = A[j, i] = 1.0
        return A

    def permuted(self, perm: Sequence[int]) -> "Graph":
        """Relabel vertices so that old vertex ``perm[k]`` becomes vertex ``k``."""
        perm = list(perm)
        inv = {old: new for new, old in enumerate(perm)}
        edges = tuple(sorted((min(inv[i], inv[j]), max(inv[i], inv[j])) for i, j in self.edges))
        labels = tuple(self.vertex_labels[old] for old in perm)
        return replace(self, edges=edges, vertex_labels=labels)


@dataclass(frozen=True)
class GraphDataset:
    graphs: tuple[Graph, ...]
    label_alphabet: tuple[int, ...]
    class_alphabet: tuple[int, ...]
    name: str = ""
    _label_index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        alphabet = set(self.label_alphabet)
        for g in self.graphs:
            if not alphabet.issuperset(g.vertex_labels):
                raise ValueError("vertex label outside label_alphabet")
        object.__setattr__(self, "_label_index", {lab: k for k, lab in enumerate(self.label_alphabet)})

    def __len__(self):
        return len(self.graphs)

    def check_classification(self) -> "GraphDataset":
        if len(self.class_alphabet) < 2:
            raise ValueError(f"dataset {self.name!r} needs at least two classes")
        return self

    @property
    def num_channels(self) -> int:
        return len(self.label_alphabet)

    def class_indices(self) -> np.ndarray:
        """Class ids mapped to 0..n_classes-1 in alphabet order."""
        lookup = {c: k for k, c in enumerate(self.class_alphabet)}
        return np.array([lookup[g.graph_label] for g in self.graphs], dtype=np.int64)

    def structure_hash(self) -> str:
        """sha256 over vertex counts, edges and vertex labels (class labels excluded)."""
        h = hashlib.sha256()
        h.update(repr(self.label_alphabet).encode())
        for g in self.graphs:
            h.update(repr((g.num_vertices, g.edges, g.vertex_labels)).encode())
        return h.hexdigest()

    @classmethod
    def from_graphs(cls, graphs: Sequence[Graph], name: str = "") -> "GraphDataset":
        graphs = tuple(graphs)
        labels = sorted({lab for g in graphs for lab in g.vertex_labels})
        classes = sorted({g.graph_label for g in graphs})
        return cls(graphs, tuple(labels), tuple(classes), name)


def _read_ints(path: Path) -> list[tuple[int, list[int]]]:
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append((lineno, [int(float(tok)) for tok in _SEP.split(line) if tok]))
            except ValueError as exc:
                raise DatasetFormatError(f"{path.name}:{lineno}: cannot parse {line!r}") from exc
    return rows


def _require(directory: Path, name: str, suffix: str) -> Path:
    path = directory / f"{name}_{suffix}.txt"
    if not path.is_file():
        raise FileNotFoundError(f"missing dataset file: {path}")
    return path


def load_tu_dataset(directory, name: str, degree_as_label: bool | None = None) -> GraphDataset:
    """Load ``name`` from ``directory``.

    When the node-label file is absent (or ``degree_as_label`` is True) vertex
    labels are replaced by self-loop-free vertex degrees.
    """
    directory = Path(directory)
    a_path = _require(directory, name, "A")
    ind_path = _require(directory, name, "graph_indicator")
    gl_path = _require(directory, name, "graph_labels")
    nl_path = directory / f"{name}_node_labels.txt"

    indicator = []
    for lineno, vals in _read_ints(ind_path):
        if len(vals) != 1:
            raise DatasetFormatError(f"{ind_path.name}:{lineno}: expected one graph id")
        indicator.append(vals[0])
    graph_labels = [vals[0] for _, vals in _read_ints(gl_path)]
    n_total = len(indicator)
    n_graphs = len(graph_labels)

    indicator = np.asarray(indicator, dtype=np.int64)
    if n_total and (indicator.min() < 1 or indicator.max() > n_graphs):
        raise DatasetFormatError(f"{ind_path.name}: graph id outside 1..{n_graphs}")
    if np.any(np.diff(indicator) < 0):
        raise DatasetFormatError(f"{ind_path.name}: vertices must be grouped by graph")
    counts = np.bincount(indicator - 1, minlength=n_graphs)
    offsets = np.concatenate([[0], np.cumsum(counts)])

    if nl_path.is_file() and not degree_as_label:
        node_rows = _read_ints(nl_path)
        if len(node_rows) != n_total:
            raise DatasetFormatError(f"{nl_path.name}: {len(node_rows)} labels for {n_total} vertices")
        node_labels = [vals[0] for _, vals in node_rows]
    else:
        node_labels = None

    edge_sets: list[set] = [set() for _ in range(n_graphs)]
    for lineno, vals in _read_ints(a_path):
        if len(vals) != 2:
            raise DatasetFormatError(f"{a_path.name}:{lineno}: expected two vertex ids")
        u, v = vals
        if not (1 <= u <= n_total and 1 <= v <= n_total):
            raise DatasetFormatError(f"{a_path.name}:{lineno}: dangling vertex index")
        g = indicator[u - 1] - 1
        if indicator[v - 1] - 1 != g:
            raise DatasetFormatError(f"{a_path.name}:{lineno}: edge joins two graphs")
        if u == v:
            continue
        a, b = u - 1 - offsets[g], v - 1 - offsets[g]
        edge_sets[g].add((int(min(a, b)), int(max(a, b))))

    graphs = []
    for g in range(n_graphs):
        n = int(counts[g])
        labels = tuple(node_labels[offsets[g]:offsets[g + 1]]) if node_labels else (0,) * n
        graphs.append(Graph(n, tuple(sorted(edge_sets[g])), labels, graph_labels[g]))
    if node_labels is None:
        graphs = [degree_labels(g) for g in graphs]
    return GraphDataset.from_graphs(graphs, name)


def write_tu_dataset(dataset: GraphDataset, directory, name: str | None = None) -> Path:
    """Write ``dataset`` in TU format (each edge listed in both directions)."""
    name = name or dataset.name
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    a_lines, ind_lines, nl_lines = [], [], []
    offset = 0
    for gid, g in enumerate(dataset.graphs, start=1):
        for i, j in g.edges:
            a_lines.append(f"{i + offset + 1}, {j + offset + 1}")
            a_lines.append(f"{j + offset + 1}, {i + offset + 1}")
        ind_lines.extend([str(gid)] * g.num_vertices)
        nl_lines.extend(str(lab) for lab in g.vertex_labels)
        offset += g.num_vertices
    (directory / f"{name}_A.txt").write_text("\n".join(a_lines) + "\n")
    (directory / f"{name}_graph_indicator.txt").write_text("\n".join(ind_lines) + "\n")
    (directory / f"{name}_graph_labels.txt").write_text(
        "\n".join(str(g.graph_label) for g in dataset.graphs) + "\n")
    (directory / f"{name}_node_labels.txt").write_text("\n".join(nl_lines) + "\n")
    return directory


def add_self_loops(g: Graph) -> np.ndarray:
    """A + I."""
    return g.adjacency() + np.eye(g.num_vertices)


def vertex_feature_matrix(g: Graph, dataset: GraphDataset) -> np.ndarray:
    """One-hot matrix over ``dataset.label_alphabet``; row order = vertex order."""
    index = dataset._label_index
    X = np.zeros((g.num_vertices, len(index)))
    for v, lab in enumerate(g.vertex_labels):
        try:
            X[v, index[lab]] = 1.0
        except KeyError:
            raise ValueError(f"vertex label {lab!r} not in the dataset alphabet") from None
    return X


def degree_labels(g: Graph) -> Graph:
    deg = [0] * g.num_vertices
    for i, j in g.edges:
        deg[i] += 1
        deg[j] += 1
    return replace(g, vertex_labels=tuple(deg))
