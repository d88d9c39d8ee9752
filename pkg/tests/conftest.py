import pytest

from subforge.tensorstore import ModelManifest, generate_tiny_model

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_manifest():
    return ModelManifest(
        vocab_size=16, d_model=8, n_layers=1, n_heads=2, d_ff=16,
        max_seq_len=32, norm_eps=1e-5, tie_embeddings=False,
    )


@pytest.fixture(scope="session")
def two_layer_manifest():
    return ModelManifest(
        vocab_size=32, d_model=16, n_layers=2, n_heads=4, d_ff=24,
        max_seq_len=48, norm_eps=1e-5, tie_embeddings=False,
    )


@pytest.fixture(scope="session")
def default_manifest():
    return ModelManifest.default()


@pytest.fixture(scope="session")
def small_model(small_manifest):
    return generate_tiny_model(small_manifest, 7)
