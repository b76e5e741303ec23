import numpy as np
import pytest

from activeshift.data import CifarRecords, write_cifar_file
from activeshift.tensor import set_num_threads

set_num_threads(1)


def make_records(n, seed, classes=10):
    """Balanced labels; each class gets a distinct mean colour so tiny nets can learn it."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    base = rng.integers(40, 216, size=(classes, 3))
    noise = rng.integers(-40, 41, size=(n, 3, 32, 32))
    images = np.clip(base[labels][:, :, None, None] + noise, 0, 255).astype(np.uint8)
    return CifarRecords(images, labels.astype(np.int64))


def write_fake_cifar10(root, per_batch=40, test=100, seed=0):
    sub = root / "cifar-10-batches-bin"
    sub.mkdir(parents=True)
    for i in range(1, 6):
        write_cifar_file(sub / f"data_batch_{i}.bin", make_records(per_batch, seed + i))
    write_cifar_file(sub / "test_batch.bin", make_records(test, seed + 99))
    return root


@pytest.fixture(scope="session")
def fake_cifar(tmp_path_factory):
    return write_fake_cifar10(tmp_path_factory.mktemp("cifar"))


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one pass/fail/blocked line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def report(number, status, detail):
        status = {True: "PASS", False: "FAIL"}.get(status, status)
        line = f"[{status}] criterion {number}: {detail}"
        lines.append(line)
        print(line)
        return status == "PASS"

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
