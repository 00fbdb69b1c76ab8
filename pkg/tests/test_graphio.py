import numpy as np
import pytest

from basgcn.graphio import (
    DatasetFormatError,
    Graph,
    GraphDataset,
    add_self_loops,
    degree_labels,
    load_tu_dataset,
    vertex_feature_matrix,
    write_tu_dataset,
)

from conftest import TRIANGLE, random_graph, star_graph


def test_mutag_counts(mutag_dir):
    ds = load_tu_dataset(mutag_dir, "MUTAG")
    assert len(ds) == 188
    assert len(ds.class_alphabet) == 2
    assert len(ds.label_alphabet) == 7
    n_lines = sum(1 for line in (mutag_dir / "MUTAG_graph_indicator.txt").open() if line.strip())
    assert sum(g.num_vertices for g in ds.graphs) == n_lines == 3371
    # every edge is listed in both directions in the file
    n_edge_lines = sum(1 for line in (mutag_dir / "MUTAG_A.txt").open() if line.strip())
    assert 2 * sum(len(g.edges) for g in ds.graphs) == n_edge_lines
    assert np.isclose(np.mean([g.num_vertices for g in ds.graphs]), 17.93, atol=0.005)
    assert np.isclose(np.mean([len(g.edges) for g in ds.graphs]), 19.79, atol=0.005)


def test_mutag_feature_rows(mutag_dir):
    ds = load_tu_dataset(mutag_dir, "MUTAG")
    X = vertex_feature_matrix(ds.graphs[0], ds)
    assert X.shape == (ds.graphs[0].num_vertices, 7)
    assert np.array_equal(X.sum(axis=1), np.ones(len(X)))


def _write(tmp_path, name, a, ind, gl, nl=None):
    (tmp_path / f"{name}_A.txt").write_text(a)
    (tmp_path / f"{name}_graph_indicator.txt").write_text(ind)
    (tmp_path / f"{name}_graph_labels.txt").write_text(gl)
    if nl is not None:
        (tmp_path / f"{name}_node_labels.txt").write_text(nl)


def test_single_trivial_graph(tmp_path):
    _write(tmp_path, "T", "", "1\n", "1\n", "4\n")
    ds = load_tu_dataset(tmp_path, "T")
    assert ds.graphs == (Graph(1, (), (4,), 1),)
    assert np.array_equal(add_self_loops(ds.graphs[0]), [[1.0]])
    # a single class is not enough to train a classifier
    with pytest.raises(ValueError, match="two classes"):
        ds.check_classification()


def test_round_trip(tmp_path, small_dataset):
    write_tu_dataset(small_dataset, tmp_path, "TOY")
    back = load_tu_dataset(tmp_path, "TOY")
    assert back.graphs == small_dataset.graphs
    assert back.label_alphabet == small_dataset.label_alphabet
    assert back.class_alphabet == small_dataset.class_alphabet


def test_edges_listed_once_and_whitespace(tmp_path):
    _write(tmp_path, "W", "1 2\n\n2,3\n3 ,\t1\n2, 1\n", "1\n1\n1\n2\n", "0\n1\n", "0\n0\n1\n0\n")
    ds = load_tu_dataset(tmp_path, "W")
    assert ds.graphs[0].edges == ((0, 1), (0, 2), (1, 2))
    assert ds.graphs[1].num_vertices == 1 and ds.graphs[1].edges == ()


def test_missing_file_named(tmp_path):
    _write(tmp_path, "X", "1, 2\n", "1\n1\n", "0\n")
    (tmp_path / "X_graph_labels.txt").unlink()
    with pytest.raises(FileNotFoundError, match="X_graph_labels.txt"):
        load_tu_dataset(tmp_path, "X")


def test_dangling_vertex_reports_line(tmp_path):
    _write(tmp_path, "D", "1, 2\n2, 9\n", "1\n1\n2\n", "0\n1\n")
    with pytest.raises(DatasetFormatError, match=r"D_A.txt:2"):
        load_tu_dataset(tmp_path, "D")


def test_missing_node_labels_uses_degrees(tmp_path):
    _write(tmp_path, "S", "1, 2\n1, 3\n1, 4\n5, 6\n", "1\n1\n1\n1\n2\n2\n", "0\n1\n")
    ds = load_tu_dataset(tmp_path, "S")
    assert ds.graphs[0].vertex_labels == (3, 1, 1, 1)
    assert ds.label_alphabet == (1, 3)


def test_add_self_loops_examples():
    assert np.array_equal(add_self_loops(Graph(2, ((0, 1),), (0, 0), 0)), np.ones((2, 2)))
    assert np.array_equal(add_self_loops(TRIANGLE), np.ones((3, 3)))


def test_add_self_loops_property(rng):
    for _ in range(20):
        g = random_graph(rng, int(rng.integers(1, 15)))
        A = add_self_loops(g) - np.eye(g.num_vertices)
        assert np.array_equal(A, A.T)
        assert np.all(np.diag(A) == 0)
        assert set(np.unique(A)) <= {0.0, 1.0}


def test_one_hot_examples():
    g = Graph(2, ((0, 1),), (5, 9), 0)
    ds = GraphDataset((g, Graph(1, (), (5,), 1)), (5, 9), (0, 1))
    assert np.array_equal(vertex_feature_matrix(g, ds), [[1, 0], [0, 1]])
    g1 = Graph(3, (), (2, 2, 2), 0)
    ds1 = GraphDataset((g1, Graph(1, (), (2,), 1)), (2,), (0, 1))
    assert np.array_equal(vertex_feature_matrix(g1, ds1), np.ones((3, 1)))
    with pytest.raises(ValueError):
        vertex_feature_matrix(Graph(1, (), (3,), 0), ds1)


def test_one_hot_rows(small_dataset):
    for g in small_dataset.graphs:
        X = vertex_feature_matrix(g, small_dataset)
        assert np.all((X != 0).sum(axis=1) == 1)
        assert np.all(X[X != 0] == 1)


def test_degree_labels():
    assert degree_labels(star_graph(3)).vertex_labels == (3, 1, 1, 1)
    assert degree_labels(Graph(1, (), (7,), 0)).vertex_labels == (0,)


def test_degree_labels_match_row_sums(rng):
    for _ in range(20):
        g = random_graph(rng, int(rng.integers(2, 20)), p=0.3)
        assert degree_labels(g).vertex_labels == tuple(int(d) for d in g.adjacency().sum(axis=1))


def test_graph_invariants():
    with pytest.raises(ValueError):
        Graph(2, ((0, 2),), (0, 0), 0)
    with pytest.raises(ValueError):
        Graph(2, ((0, 1), (1, 0)), (0, 0), 0)
    with pytest.raises(ValueError):
        Graph(2, ((1, 1),), (0, 0), 0)
