import numpy as np
import pytest

from stgn.ingest import generate_synthetic

# one verdict line per acceptance criterion, echoed after the test summary
acceptance_lines = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_stream():
    return generate_synthetic(
        num_users=40, num_items=40, num_communities=4, num_events=1500, seed=3
    )


def fd_gradient(fn, arrays, name, idx, h=1e-6):
    """Central finite difference of fn() w.r.t. arrays[name][idx]."""
    arr = arrays[name]
    orig = arr[idx]
    arr[idx] = orig + h
    up = fn()
    arr[idx] = orig - h
    down = fn()
    arr[idx] = orig
    return (up - down) / (2 * h)


def replay_events(stream, state_mem, params, encoder, adj=None, upto=None):
    """Immediate (non-deferred) replay: update both endpoints per event."""
    from stgn.memory import aggregate_messages, compute_messages, update_memory

    for i, ev in enumerate(stream):
        if upto is not None and i >= upto:
            break
        m_src, m_dst = compute_messages(state_mem, ev, encoder)
        for msg in aggregate_messages([m_src, m_dst]).values():
            update_memory(state_mem, msg.target, msg, params)
        if adj is not None:
            adj.insert_interaction(ev)
