import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def finite_difference_check(loss_fn, tensors, eps=1e-5, max_entries=None, seed=0, floor=1e-5):
    """Max relative error between autograd and central differences.

    ``loss_fn()`` must recompute the scalar loss from ``tensors`` (float64,
    requires_grad).  When ``max_entries`` is set, a random subset of entries
    per tensor is probed.  Relative error uses ``max(|a|, |n|, floor)`` as
    denominator so entries with vanishing gradient are judged absolutely.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            g = torch.zeros_like(t) if g is None else g
            idx = np.arange(t.numel())
            if max_entries is not None and t.numel() > max_entries:
                idx = rng.choice(t.numel(), size=max_entries, replace=False)
            for i in idx:
                at = tuple(int(j) for j in np.unravel_index(i, tuple(t.shape)))
                orig = t[at].item()
                t[at] = orig + eps
                up = loss_fn().item()
                t[at] = orig - eps
                down = loss_fn().item()
                t[at] = orig
                num = (up - down) / (2 * eps)
                ana = g[at].item()
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst


@pytest.fixture
def fd_check():
    return finite_difference_check


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    def record(criterion: str, passed: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
