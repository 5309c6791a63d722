import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from crumb import kernels  # noqa: E402
from crumb.tensor_nn import NetworkSpec, conv2d, global_avg_pool, linear, maxpool2d, relu  # noqa: E402


# criterion number -> PASS/FAIL line, filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=sorted(kernels.backends()))
def backend(request, monkeypatch):
    """Run a test once per available kernel backend."""
    impl = kernels.backends()[request.param]
    for name in ("normalized_blocks", "nearest_blocks", "scatter_add_rows", "im2col", "col2im"):
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return request.param


def tiny_net(rng, dtype=np.float64, classes=3, in_shape=(2, 8, 8)):
    """conv-relu-pool | conv-relu-gap-linear, small enough for finite differences."""
    c = in_shape[0]
    layers = [
        conv2d(c, 4, 3, rng, pad=1, dtype=dtype), relu(), maxpool2d(2),
        conv2d(4, 4, 3, rng, stride=1, pad=1, dtype=dtype), relu(), global_avg_pool(),
        linear(4, classes, rng, dtype),
    ]
    return NetworkSpec(layers, 3, in_shape)


def codebook_net(rng, dtype=np.float64, classes=3):
    """Feature extractor ending in a (4, 3, 3) map, classifier linear-relu-linear."""
    layers = [
        conv2d(2, 4, 3, rng, pad=1, dtype=dtype), relu(), maxpool2d(2),
        linear(36, 6, rng, dtype), relu(), linear(6, classes, rng, dtype),
    ]
    return NetworkSpec(layers, 3, (2, 6, 6))


def away_from_kinks(net, acts, eps):
    """Relu inputs and maxpool runner-up gaps must exceed 10 * eps."""
    for i in range(len(acts)):
        layer, x = net.layers[acts.from_layer + i], acts.input_of(i)
        if layer.kind == "relu" and np.min(np.abs(x)) < 10 * eps:
            return False
        if layer.kind == "maxpool2d":
            n, c, h, w = x.shape
            win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
            top2 = np.sort(win, axis=-1)[..., -2:]
            live = top2[..., 1] > 0  # all-zero windows sit behind a relu and carry no gradient
            if np.any((top2[..., 1] - top2[..., 0])[live] < 10 * eps):
                return False
    return True


SMALL_SIDE = 24


@pytest.fixture(scope="session")
def small_pretrained():
    """A 4-class pretrain on 24px synthetic images: (net state, codebook blocks, test samples)."""
    from crumb.stream_data import SynthConfig, synth_stream_generate
    from crumb.trainer import TrainConfig, new_learner
    from crumb.tensor_nn import network_state

    cfg = SynthConfig(classes=4, class_offset=1000, image_side=SMALL_SIDE, frames_per_instance=6, seed=21)
    train, test = synth_stream_generate(cfg)
    tc = TrainConfig(seed=0, pretrain_warmup_epochs=3, pretrain_epochs=3, n_blocks=32)
    learner = new_learner(tc, train[0].image.shape, 4)
    learner.pretrain(train, sorted({s.class_id for s in train}))
    return learner.net.describe(), network_state(learner.net), learner.book.blocks.data.copy(), train, test


def stream_learner(pretrained, **overrides):
    """Fresh stream-ready learner built from the cached pretrain."""
    from crumb.codebook import Codebook
    from crumb.tensor_nn import load_network_state, network_from_description
    from crumb.trainer import Learner, TrainConfig

    desc, state, blocks, _, _ = pretrained
    net = network_from_description(desc)
    load_network_state(net, state)
    net.freeze_features()
    cfg = TrainConfig(**{"seed": 0, "n_blocks": 32, "first_task_epochs": 2, **overrides})
    learner = Learner(net, Codebook(blocks.copy(), frozen=cfg.freeze_codebook), cfg)
    learner.reset_head()
    return learner


def stream_data(seed=0, classes=4, frames=6):
    from crumb.stream_data import SynthConfig, synth_stream_generate
    return synth_stream_generate(SynthConfig(classes=classes, image_side=SMALL_SIDE,
                                             frames_per_instance=frames, seed=seed))
