import json
import os

import numpy as np
import pytest

from vitrojan.attention import attention_rate, token_attention, trigger_tokens
from vitrojan.datasets import LabeledDataset, SurrogatePolicy, family_classes, make_surrogate
from vitrojan.error import DimensionError, SidecarError, UsageError
from vitrojan.tensor import Tensor, no_grad
from vitrojan.trigger import (Placement, TriggerGenConfig, TriggerSpec, attention_loss, build_poisoned_dataset,
                              generate_trigger, load_trigger, read_loss_history, save_preview, save_trigger,
                              stamp, stamp_tensor, target_attention)
from vitrojan.vit import Checkpoint
from .utils_for_tests import numeric_gradient, rel_error, tiny_spec


@pytest.fixture(scope="module")
def surrogate(surrogate_pool):
    return make_surrogate(surrogate_pool, SurrogatePolicy(count=12, seed=0), family_classes('shapes'))


def _random_trigger(rng, shape=(1, 8, 8)):
    return TriggerSpec(Placement('bottom-right', size=4).mask(shape[-1]), rng.uniform(size=shape))


@pytest.mark.parametrize(
    "corner, offset, rows, cols", [('bottom-right', 0, slice(5, 8), slice(5, 8)),
                                   ('top-left', 1, slice(1, 4), slice(1, 4)),
                                   ('top-right', 1, slice(1, 4), slice(4, 7)),
                                   ('bottom-left', 2, slice(3, 6), slice(2, 5))]
)
def test_placement_mask(corner, offset, rows, cols):
    expected = np.zeros((8, 8))
    expected[rows, cols] = 1
    assert np.array_equal(Placement(corner, size=3, offset=offset).mask(8), expected)


def test_placement_errors():
    with pytest.raises(UsageError, match="Unknown trigger corner"):
        Placement('center')

    with pytest.raises(DimensionError, match="does not fit"):
        Placement(size=8, offset=1).mask(8)


def test_trigger_spec_validation():
    mask = Placement(size=4).mask(8)
    with pytest.raises(UsageError, match="only 0 and 1"):
        TriggerSpec(mask * 0.5, np.zeros((1, 8, 8)))

    with pytest.raises(UsageError, match=r"\[0, 1\]"):
        TriggerSpec(mask, np.full((1, 8, 8), 1.5))

    with pytest.raises(DimensionError, match="disagree"):
        TriggerSpec(mask, np.zeros((1, 4, 4)))

    assert TriggerSpec(mask, np.zeros((1, 8, 8))).area_fraction == 0.25


def test_stamp_exactness():
    rng = np.random.default_rng(0)
    trig = _random_trigger(rng, (3, 16, 16))
    images = rng.uniform(size=(1000, 3, 16, 16))
    stamped = stamp(images, trig)

    outside = np.broadcast_to(trig.mask == 0, images.shape)
    assert np.array_equal(stamped[outside], images[outside])

    inside = np.broadcast_to(trig.mask == 1, images.shape)
    assert np.array_equal(stamped[inside], np.broadcast_to(trig.pattern, images.shape)[inside])


def test_stamp_zero_mask_is_identity():
    rng = np.random.default_rng(1)
    trig = TriggerSpec(np.zeros((8, 8)), rng.uniform(size=(1, 8, 8)))
    image = rng.uniform(size=(1, 8, 8))
    assert np.array_equal(stamp(image, trig), image)

    with pytest.raises(DimensionError, match="Cannot stamp"):
        stamp(np.zeros((1, 4, 4)), trig)


def test_stamp_tensor_matches_stamp():
    rng = np.random.default_rng(2)
    trig = _random_trigger(rng)
    images = rng.uniform(size=(4, 1, 8, 8))
    result = stamp_tensor(images, trig.mask, Tensor(trig.pattern))
    assert np.allclose(result.data, stamp(images, trig), rtol=0, atol=1e-15)


def test_target_attention():
    trig = TriggerSpec(Placement(size=4).mask(8), np.zeros((1, 8, 8)))
    assert np.array_equal(target_attention(trig, 2).numpy(), [0, 0, 0, 1])


def test_attention_loss_gradient(model, surrogate):
    mask = Placement(size=4).mask(8)
    target = trigger_tokens(mask, 2).astype(np.float64)
    images = surrogate.images[:3]
    pattern = Tensor(np.random.default_rng(3).uniform(0.2, 0.8, size=(1, 8, 8)), requires_grad=True)

    loss = attention_loss(model, images, mask, pattern, target)
    loss.backward()

    def f(values):
        return attention_loss(model, images, mask, Tensor(values), target).item()

    numeric = numeric_gradient(f, pattern.data)
    assert rel_error(pattern.grad, numeric) < 1e-4
    assert np.array_equal(pattern.grad[np.broadcast_to(mask == 0, pattern.shape)], np.zeros(48))


def test_generate_trigger_zero_lr_returns_initialization(model, surrogate):
    cfg = TriggerGenConfig(lr=0.0, epochs=3, seed=5)
    trig, history = generate_trigger(model, surrogate, cfg)
    assert np.array_equal(trig.pattern, trig.initial)
    assert len(history) == 3
    assert history[0] == history[-1]


def test_generate_trigger(model, surrogate):
    before = model.copy()
    cfg = TriggerGenConfig(lr=0.05, epochs=15, seed=0, step_rule='sign', batch_size=6)
    trig, history = generate_trigger(model, surrogate, cfg, Placement(size=4))

    assert model.identical(before)
    assert trig.pattern.min() >= 0 and trig.pattern.max() <= 1

    # only masked pattern entries change
    outside = np.broadcast_to(trig.mask == 0, trig.pattern.shape)
    assert np.array_equal(trig.pattern[outside], trig.initial[outside])
    assert trig.metadata['steps'] == 15
    assert trig.metadata['strategy'] == 'rollout'

    again, history2 = generate_trigger(model, surrogate, cfg, Placement(size=4))
    assert np.array_equal(again.pattern, trig.pattern)
    assert history == history2


def test_generate_trigger_sign_rule_lowers_loss(model, surrogate):
    cfg = TriggerGenConfig(lr=0.05, epochs=30, seed=0, step_rule='sign')
    _, history = generate_trigger(model, surrogate, cfg, Placement(size=4))
    assert min(history[1:]) < history[0]


def _bright_patch_model():
    """
    A two-block model whose CLS token attends most to the brightest
    patches. Value weights and MLPs are zero, so every block
    repeats the same attention and the attention loss falls as the trigger
    patch brightens.
    """
    spec = tiny_spec()
    model = Checkpoint.initialize(spec, seed=0)
    for name, p in model.parameters.items():
        p.data = np.ones_like(p.data) if name.endswith('.gain') else np.zeros_like(p.data)

    params = {name: p.data for name, p in model.parameters.items()}
    D, dh = spec.embed_dim, spec.head_dim

    # feature 0 grows with the pixel sum of a patch, feature 1 mirrors it
    params['patch_embed.weight'][0], params['patch_embed.bias'][0] = 1.0, -12.0
    params['patch_embed.weight'][1], params['patch_embed.bias'][1] = -1.0, 12.0
    params['pos_embed'][1:, 2], params['pos_embed'][1:, 3] = 2.0, -2.0
    params['cls_token'][0, 4], params['cls_token'][0, 5] = 1.0, -1.0

    for i in range(spec.num_blocks):
        qkv = params[f'blocks.{i}.attn.qkv.weight']
        for h in range(spec.num_heads):
            qkv[h * dh, 4] = 2.0          # the CLS query
            qkv[D + h * dh, 0] = 1.0      # keys read brightness

    return model


def test_generate_trigger_gradient_rule():
    model = _bright_patch_model()
    rng = np.random.default_rng(7)
    images = rng.uniform(0.0, 0.3, size=(32, 1, 8, 8))
    surrogate = LabeledDataset(images, np.zeros(32, dtype=int), ['dim'], name='dim')

    cfg = TriggerGenConfig(lr=None, first_step=0.05, epochs=200, step_rule='gradient')
    trig, history = generate_trigger(model, surrogate, cfg, Placement(size=4))
    assert len(history) == 200
    assert history[-1] < 0.5 * history[0]

    with no_grad():
        before = attention_rate(token_attention(model, stamp(images, trig.initial_trigger())), trig)
        after = attention_rate(token_attention(model, stamp(images, trig)), trig)
    assert after > before


def test_generate_trigger_first_step():
    model = _bright_patch_model()
    images = np.random.default_rng(8).uniform(0.0, 0.3, size=(8, 1, 8, 8))
    surrogate = LabeledDataset(images, np.zeros(8, dtype=int), ['dim'], name='dim')

    cfg = TriggerGenConfig(lr=None, first_step=0.05, epochs=1)
    trig, _ = generate_trigger(model, surrogate, cfg, Placement(size=4))
    assert trig.metadata['lr'] > 0
    assert np.isclose(np.abs(trig.pattern - trig.initial).max(), 0.05, rtol=0, atol=1e-12)

    # the brightness of the trigger patch only rises
    inside = np.broadcast_to(trig.mask == 1, trig.pattern.shape)
    assert (trig.pattern[inside] >= trig.initial[inside]).all()


def test_generate_trigger_threshold(model, surrogate):
    cfg = TriggerGenConfig(lr=0.05, epochs=10, threshold=10.0)
    trig, history = generate_trigger(model, surrogate, cfg)
    assert len(history) == 1
    assert np.array_equal(trig.pattern, trig.initial)


def test_generate_trigger_raw_strategy(spec_no_cls, surrogate):
    from vitrojan.vit import Checkpoint

    model = Checkpoint.initialize(spec_no_cls, 0)
    trig, history = generate_trigger(model, surrogate, TriggerGenConfig(epochs=2), Placement(size=4))
    assert trig.metadata['strategy'] == 'raw'
    assert len(history) == 2


def test_generate_trigger_config_errors():
    with pytest.raises(UsageError, match="must be >= 0"):
        TriggerGenConfig(lr=-0.1)

    with pytest.raises(UsageError, match="Unknown step rule"):
        TriggerGenConfig(step_rule='newton')

    with pytest.raises(UsageError, match="give lr, first_step, or both"):
        TriggerGenConfig(lr=None)

    with pytest.raises(UsageError, match="sign rule needs lr"):
        TriggerGenConfig(lr=None, first_step=0.05, step_rule='sign')

    with pytest.raises(UsageError, match="must be >= 0"):
        TriggerGenConfig(first_step=-1.0)

    assert TriggerGenConfig().step_rule == 'gradient'


def test_build_poisoned_dataset(surrogate):
    trig = _random_trigger(np.random.default_rng(4))
    poisoned = build_poisoned_dataset(surrogate, trig, 2, family_classes('shapes'))
    assert len(poisoned) == len(surrogate)
    assert (poisoned.labels == 2).all()
    assert poisoned.class_names == family_classes('shapes')
    assert poisoned.provenance == surrogate.provenance
    assert np.array_equal(poisoned.images, stamp(surrogate.images, trig))


def test_save_load_trigger(tmp_path):
    rng = np.random.default_rng(6)
    trig = TriggerSpec(Placement(size=4).mask(8), rng.uniform(size=(1, 8, 8)), placement=Placement(size=4),
                       initial=rng.uniform(size=(1, 8, 8)), metadata=dict(steps=2))
    directory = str(tmp_path / 'trigger')
    save_trigger(trig, directory, history=[0.5, 0.25], extra=dict(config_hash='h'))

    with open(os.path.join(directory, 'trigger.json')) as f:
        doc = json.load(f)
    assert doc['mask'][-1] == '00001111'
    assert doc['config_hash'] == 'h'

    loaded = load_trigger(directory)
    assert np.array_equal(loaded.mask, trig.mask)
    assert np.array_equal(loaded.pattern, trig.pattern)
    assert np.array_equal(loaded.initial, trig.initial)
    assert loaded.placement.to_dict() == trig.placement.to_dict()
    assert read_loss_history(directory) == [0.5, 0.25]

    preview = str(tmp_path / 'trigger.png')
    save_preview(loaded, preview)
    assert os.path.getsize(preview) > 0


def test_load_trigger_missing(tmp_path):
    with pytest.raises(SidecarError, match="has no trigger.json"):
        load_trigger(str(tmp_path))
