import numpy as np
import pytest

from fedkper import data, nn


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def random_instance(seed, sizes=(5, 7, 6, 4), n=9):
    """Returns (student, global, features, labels) for gradient checks."""
    rng = np.random.default_rng(seed)
    student = nn.init_mlp(sizes, seed, owner=1)
    # nonzero biases so every parameter is exercised
    student = student.with_values(student.values + 0.1 * rng.standard_normal(len(student)))
    teacher = student.with_values(student.values + 0.3 * rng.standard_normal(len(student)))
    x = rng.standard_normal((n, sizes[0]))
    y = rng.integers(0, sizes[-1], size=n)
    return student, teacher, x, y


def central_accuracy(ds, epochs=20, lr=0.05, hidden=(64, 64), seed=0):
    """Plain minibatch SGD on a stratified 80/20 split; returns held-out accuracy."""
    train, test = data.split_local(ds, 0.2, seed)
    params = nn.init_mlp([ds.dim, *hidden, ds.class_count], seed)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(train), 32):
            idx = order[start:start + 32]
            out = nn.local_objective(params, params, train.features[idx], train.labels[idx])
            params = nn.sgd_step(params, out.grad, lr, 5.0)
    return nn.accuracy(params, test.features, test.labels)


def make_client(client_id, labels, dim=3, class_count=4, seed=0, test_labels=None):
    rng = np.random.default_rng([seed, client_id])
    labels = np.asarray(labels)
    train = data.Dataset(rng.standard_normal((labels.size, dim)) + labels[:, None], labels, class_count)
    test_labels = labels[:2] if test_labels is None else np.asarray(test_labels)
    test = data.Dataset(rng.standard_normal((test_labels.size, dim)) + test_labels[:, None], test_labels, class_count)
    return data.ClientDataset(client_id, train, test)


@pytest.fixture
def blobs():
    return data.generate_synthetic(4, 5, 30, 0.5, seed=3)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
