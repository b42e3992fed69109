import numpy as np
import pytest

from gpp.netmodel import NetworkTopology, NodeKind
from gpp.synthgen import GenConfig, generate_corpus

P, D = NodeKind.PRODUCTION, NodeKind.DISTRIBUTION


def random_topology(rng, n_nodes, n_edges=None, mot_count=2, plants=1):
    """Random simple digraph; node 0..plants-1 are plants."""
    pairs = [(i, j) for i in range(n_nodes) for j in range(n_nodes) if i != j]
    if n_edges is None:
        n_edges = int(rng.integers(0, len(pairs) + 1))
    n_edges = min(n_edges, len(pairs))
    pick = rng.choice(len(pairs), size=n_edges, replace=False) if n_edges else []
    kinds = [P if v < plants else D for v in range(n_nodes)]
    return NetworkTopology.from_edges(kinds, [pairs[i] for i in pick], mot_count)


@pytest.fixture(scope="session")
def small_corpus():
    cfg = GenConfig(sku_count=3, train_weeks=12, val_weeks=4, test_weeks=4, node_range=(2, 8), seed=11)
    return cfg, generate_corpus(cfg)


def make_sku(kinds, edges, inventory0, demand, production=None, weeks=20, horizon=13, lead=0,
             mot_count=1, price=1.0, dos=None, splits=None):
    """Hand-built SKU with constant weekly demand/production and perfect forecasts."""
    from gpp.dataset import SkuData
    from gpp.netmodel import ShipmentLog

    n = len(kinds)
    demand = np.broadcast_to(np.asarray(demand, dtype=np.float64), (weeks, n)).copy()
    demand[:, [k is P for k in kinds]] = 0.0
    production = np.zeros((weeks, n)) if production is None else \
        np.broadcast_to(np.asarray(production, dtype=np.float64), (weeks, n)).copy()
    inventory = np.zeros((weeks + 1, n))
    inventory[0] = inventory0
    forecast = np.repeat(demand[:, :, None], horizon, axis=2)
    topo = NetworkTopology.from_edges(kinds, edges, mot_count)
    return SkuData(
        sku="hand", price=price, mot_names=[f"m{i}" for i in range(mot_count)],
        node_ids=[f"n{i}" for i in range(n)], kinds=list(kinds),
        dos=np.zeros(n) if dos is None else np.asarray(dos, dtype=np.float64),
        splits=splits or {"train": (0, 8), "val": (8, 10), "test": (10, 12)},
        topologies=[(0, topo)], lead_hist=[[[(lead, 1.0)] for _ in range(mot_count)] for _ in edges],
        inventory=inventory, demand=demand, production=production, forecast=forecast,
        shipments=ShipmentLog.empty(n),
    )


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(number: int, ok: bool, detail: str, gated: bool = True):
        tag = ("PASS" if ok else "FAIL") if gated else ("PASS" if ok else "DEVIATION") + " (reported)"
        line = f"criterion {number:2d}: {tag}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        if gated:
            assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
