import pytest

from moeplan.arch import ModelArchitecture, builtin_preset
from moeplan.parallel import ParallelConfig, default_layout


@pytest.fixture(scope="session")
def v3():
    return builtin_preset("deepseek-v3")


@pytest.fixture(scope="session")
def case_cfg():
    """The reference case-study topology: 1024 devices."""
    return ParallelConfig(dp=32, tp=2, pp=16, ep=8, etp=1, sp=True, cp=1)


@pytest.fixture(scope="session")
def v3_layout(v3):
    return default_layout(v3, 16)


def tiny_arch(**overrides) -> ModelArchitecture:
    """Small architecture for structural and property tests."""
    values = dict(
        hidden_dim=16,
        moe_mlp_dim=8,
        dense_mlp_dim=24,
        head_dim=4,
        num_heads=4,
        q_compress_dim=8,
        rope_head_dim=2,
        kv_compress_dim=4,
        num_routed_experts=4,
        num_shared_experts=1,
        topk_routed=2,
        num_layers=3,
        vocab_size=32,
        num_dense_layers=1,
        tied_embeddings=False,
    )
    values.update(overrides)
    return ModelArchitecture(**values)
