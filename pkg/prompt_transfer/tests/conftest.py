import pytest

from prompt_transfer.configuration.run_config import RunConfig, parse_config_text
from prompt_transfer.data.taskgen import generate_suite
from prompt_transfer.modelling.model import ModelConfig, init_model
from prompt_transfer.modelling.numerics import Rng
from prompt_transfer.utils import traces

TINY_CONFIG = ModelConfig(
    vocab_size=20, d_model=16, n_heads=2, enc_layers=1, dec_layers=1,
    ff_dim=32, max_src_len=16, max_tgt_len=16, max_prompt_len=16,
)

# plain gaussian init with a large std so finite differences see well-scaled layer norms
GRADCHECK_INIT_STD = 0.3

DESK_CONFIG_TEXT = """
seeds = 0
d_model = 16
n_heads = 2
ff_dim = 32
max_prompt_len = 16
prompt_len = 4
train_size = 24
dev_size = 8
test_size = 8
min_len = 3
max_len = 5
batch_size = 8
teacher_epochs = 2
source_epochs = 1
target_epochs = 2
few_shot_ks = 4
few_shot_draws = 2
prompt_len_sweep = 2,4
"""


@pytest.fixture(autouse=True)
def _no_trace_context():
    traces.close()
    yield
    traces.close()


@pytest.fixture
def tiny_model():
    return init_model(TINY_CONFIG, Rng(1234), scheme="gaussian", init_std=GRADCHECK_INIT_STD)


@pytest.fixture
def desk_cfg() -> RunConfig:
    return parse_config_text(DESK_CONFIG_TEXT, "desk.cfg")


@pytest.fixture
def desk_model(desk_cfg):
    return init_model(desk_cfg.model_config(), Rng(desk_cfg.seed).fork("model"), desk_cfg.init_scheme, desk_cfg.init_std)


@pytest.fixture
def desk_suite(desk_cfg):
    return generate_suite(
        desk_cfg.vocab_size, desk_cfg.split_sizes, desk_cfg.len_range, Rng(desk_cfg.seed).fork("tasks"),
        desk_cfg.source_specs(), desk_cfg.target_specs())
