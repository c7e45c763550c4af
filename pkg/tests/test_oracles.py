import math

import numpy as np
import pytest

from navpretrain import oracles as O


def test_fd_gradient_of_square():
    g = O.fd_gradient(lambda p: float(p["w"][0] ** 2), {"w": np.array([3.0])})
    assert abs(g["w"][0] - 6.0) < 1e-8


def test_fd_gradient_of_constant_is_zero():
    g = O.fd_gradient(lambda p: 1.5, {"w": np.arange(4.0)})
    assert np.all(g["w"] == 0.0)


def test_one_sided_differences_agree_with_central_on_smooth_function():
    f = lambda p: float(np.sin(p["w"]).sum() + (p["w"] ** 3).sum())
    params = {"w": np.array([0.3, -1.2, 2.0])}
    central, forward = O.fd_gradient(f, params), O.fd_gradient_forward(f, params)
    assert np.allclose(central["w"], forward["w"], atol=1e-5)


def test_alignment_score_of_single_entry():
    assert O.brute_alignment_score([[1.7]]) == 1.7


def test_auc_of_separated_scores():
    assert O.brute_auc([3, 2, 1, 0], [1, 1, 0, 0]) == 1.0


def test_returns_suffix_sums():
    assert O.brute_returns([1, 1, 1], 1.0) == [3, 2, 1]


def test_shortest_path_on_line():
    pos = {"a": (0, 0), "b": (0, 1), "c": (0, 2)}
    length, seq = O.brute_shortest_path(pos, [("a", "b"), ("b", "c")], "a", "c")
    assert seq == ("a", "b", "c") and length == 2.0


def test_refuses_oversized_inputs():
    pos = {f"n{i}": (i, 0) for i in range(O.MAX_NODES + 1)}
    with pytest.raises(O.OracleRefusal):
        O.brute_shortest_path(pos, [], "n0", "n1")
    with pytest.raises(O.OracleRefusal):
        O.brute_alignment_matrix([[0.0]] * (O.MAX_TOKENS + 1), [[0.0]])
    with pytest.raises(O.OracleRefusal):
        O.brute_lstm_step([0.0], [0.0] * 5, [0.0] * 5, [[0.0] * 20], [[0.0] * 20] * 5, [0.0] * 20)


def test_max_relative_error_reports_location():
    err, where = O.max_relative_error({"a": np.ones(2), "b": np.ones(2)}, {"a": np.ones(2), "b": np.array([1, 2.0])})
    assert where == "b" and math.isclose(err, 0.5)


def test_oracles_do_not_import_production_modules():
    import ast
    import inspect

    tree = ast.parse(inspect.getsource(O))
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            assert node.level == 0, "oracles must not use relative imports"
            assert not (node.module or "").startswith("navpretrain")
        if isinstance(node, ast.Import):
            assert all(not a.name.startswith("navpretrain") for a in node.names)
