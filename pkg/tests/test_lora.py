import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leaklab.errors import ArgumentError, PathError, ShapeError, StateError
from leaklab.lora import LoraAdapter, attach, effective_weight, merge, unwrap
from leaklab.model import ModelConfig, forward, greedy_decode, init, projection_paths
from leaklab.numeric import Rng
from leaklab.text import encode
from leaklab.training import TrainConfig, finetune
from leaklab.text import FinetuneDataset, build_finetune_dataset, synth_support

CFG = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, max_seq=128, seed=1)


def _randomize(adapted, seed=0, std=0.3):
    for path, ad in adapted.adapters.items():
        ad.B[...] = Rng(seed, "B", path).normal(std, ad.B.shape)
    return adapted


def test_fresh_attach_is_identity():
    m = init(CFG)
    ad = attach(m, projection_paths(CFG), 4, 64, Rng(0))
    ids = encode("some prompt", bos=True)
    assert np.max(np.abs(ad.forward(ids).logits - forward(m, ids).logits)) <= 1e-12
    for a in ad.adapters.values():
        assert not a.B.any()
        assert a.A.shape == (4, a.A.shape[1])


def test_a_init_std():
    m = init(ModelConfig(seed=0))
    ad = attach(m, ["decoder.layers.0.fc1"], 8, 64, Rng(0))
    assert abs(ad.adapters["decoder.layers.0.fc1"].A.std() - 1 / 8) < 0.01


def test_attach_guards():
    m = init(CFG)
    with pytest.raises(ArgumentError):
        attach(m, ["decoder.layers.0.fc1"], 17, 64, Rng(0))
    with pytest.raises(PathError):
        attach(m, ["decoder.layers.5.fc1"], 2, 64, Rng(0))
    with pytest.raises(ArgumentError):
        attach(m, ["decoder.layers.0.fc1"], 2, 64, Rng(0), scaling="weird")


def test_alpha_zero_is_identity():
    m = init(CFG)
    ad = _randomize(attach(m, projection_paths(CFG), 4, 0.0, Rng(0)))
    ids = encode("abc", bos=True)
    assert np.max(np.abs(ad.forward(ids).logits - forward(m, ids).logits)) <= 1e-12


def test_effective_weight_examples():
    ad = LoraAdapter("x", 1, 1.0, np.array([[1.0, 0.0]]), np.array([[2.0], [0.0]]))
    assert effective_weight(ad, np.zeros((2, 2))).tolist() == [[2, 0], [0, 0]]
    zero = LoraAdapter("x", 1, 1.0, np.array([[1.0, 0.0]]), np.zeros((2, 1)))
    w = np.arange(4.0).reshape(2, 2)
    assert np.array_equal(effective_weight(zero, w), w)
    with pytest.raises(ShapeError):
        effective_weight(ad, np.zeros((3, 2)))


def test_scaling_variants():
    a = LoraAdapter("x", 4, 64.0, np.zeros((4, 2)), np.zeros((2, 4)))
    assert a.scale == 16.0
    b = LoraAdapter("x", 4, 64.0, np.zeros((4, 2)), np.zeros((2, 4)), scaling="rslora")
    assert b.scale == 32.0


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31))
def test_delta_rank_bound(r, seed):
    rng = Rng(seed)
    ad = LoraAdapter("x", r, 8.0, rng.normal(1.0, (r, 12)), rng.normal(1.0, (10, r)))
    s = np.linalg.svd(effective_weight(ad, np.zeros((10, 12))) - 0.0, compute_uv=False)
    assert np.all(s[r:] < 1e-9 * s[0])


def test_merge_matches_adapted():
    m = init(CFG)
    ad = _randomize(attach(m, projection_paths(CFG), 4, 64, Rng(0)), std=0.05)
    r = Rng(2, "prompts")
    prompts = [[256] + [int(x) for x in r.integers(0, 256, int(r.integers(1, 20)))] for _ in range(100)]
    adapted_logits = [ad.forward(p).logits for p in prompts]
    adapted_decodes = [greedy_decode(m, p, 4, lora=ad.lora_map()) for p in prompts[:20]]
    merged = merge(ad)
    worst = max(np.max(np.abs(a - forward(merged, p).logits)) for a, p in zip(adapted_logits, prompts))
    assert worst <= 1e-9
    assert adapted_decodes == [greedy_decode(merged, p, 4) for p in prompts[:20]]


def test_merge_fresh_equals_base_and_consumes():
    m = init(CFG)
    ad = attach(m, projection_paths(CFG), 4, 64, Rng(0))
    merged = merge(ad)
    for k in m.params:
        assert np.max(np.abs(merged.params[k] - m.params[k])) <= 1e-12
    with pytest.raises(StateError):
        merge(ad)
    with pytest.raises(StateError):
        ad.lora_map()


def test_training_leaves_base_bits_unchanged():
    m = init(CFG)
    before = {k: v.copy() for k, v in m.params.items()}
    ad = attach(m, projection_paths(CFG), 4, 64, Rng(0))
    ds = build_finetune_dataset(synth_support(6, Rng(0)), ["pw1", "pw2"], Rng(1))
    ad, hist = finetune(ad, ds, TrainConfig(epochs=1, batch=4, seed=0))
    for k, v in m.params.items():
        assert v.tobytes() == before[k].tobytes(), k
    assert any(a.B.any() for a in ad.adapters.values())


def test_unwrap():
    m = init(CFG)
    assert unwrap(m) == (m, None)
    ad = attach(m, ["decoder.layers.0.fc1"], 2, 4, Rng(0))
    base, lora = unwrap(ad)
    assert base is m and set(lora) == {"decoder.layers.0.fc1"}
