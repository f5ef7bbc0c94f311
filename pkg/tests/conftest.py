import pytest

TINY_CONFIG = """\
# desk-scale smoke world
vocab_size = 40
concepts = 4
tokens_per_concept = 10
caption_len_min = 4
caption_len_max = 8
frames_per_video = 3
frame_dim = 8
captions_per_video = 2
train_videos = 16
val_videos = 4
test_videos = 4
rho = 0.2
sigma_visual = 0.05

lr = 2e-3
batch_size = 8
epochs = 2
token_dim = 8
common_dim = 6
heads = 2
ffn_mult = 1
early_stop_patience = 20
"""


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture(scope="session")
def shared_tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path
