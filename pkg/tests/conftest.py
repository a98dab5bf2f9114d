import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from metalforge.image_store import ImageStore, StoreConfig
from metalforge.orchestrator import Orchestrator, StackConfig

SMALL_BLOCKS = StoreConfig(block_size=4096, max_chain_depth=8)


def build_stack(root, nodes: int = 2, store: StoreConfig = SMALL_BLOCKS,
                tenants: dict | None = None, admin_token: str | None = None,
                worker_limit: int = 12) -> Orchestrator:
    svc = Orchestrator.open(root, StackConfig(store=store, tenants=tenants,
                                              admin_token=admin_token,
                                              worker_limit=worker_limit))
    for i in range(nodes):
        svc.pool.register_node(f"02:00:00:00:{i // 256:02x}:{i % 256:02x}")
    return svc


@pytest.fixture
def stack(tmp_path):
    svc = build_stack(tmp_path / "root")
    yield svc
    svc.close()


@pytest.fixture
def store(tmp_path):
    st = ImageStore.open(tmp_path / "store", SMALL_BLOCKS)
    yield st
    st.close()
