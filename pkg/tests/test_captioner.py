import math
from dataclasses import replace

import numpy as np
import pytest

from micap.captioner import (CaptionerConfig, MICCaptioner, attention_map, caption_loss, caption_loss_terms,
                             generate, inference, load_checkpoint, pad_tokens, project, reverse_tokens,
                             save_checkpoint)
from micap.encoder import EncoderConfig
from micap.gradcheck import check_parameters
from micap.tensor import Tensor
from micap.tokenizer import EOS, PAD, SOS, CaptionTokens


def caption(*body):
    return CaptionTokens([SOS, *body, EOS])


def bags(rng, sizes, side=32):
    return [rng.random((k, 3, side, side)) for k in sizes]


@pytest.fixture
def model64(tiny_encoder, tiny_captioner):
    return MICCaptioner(tiny_encoder, tiny_captioner, seed=0, dtype=np.float64)


def test_project_shape_and_zero_case():
    enc = EncoderConfig(stem_channels=4, stage_channels=(4, 4, 8, 8), input_size=64, stem_kernel=3)
    m = MICCaptioner(enc, CaptionerConfig(hidden=16, layers_per_direction=1, vocab_size=10), 0, np.float64)
    feats = Tensor(np.random.default_rng(0).random((1, 2, 2, 8)))
    assert project(m, feats).shape == (4, 16)
    for p in (m.proj.weight, m.proj.bias, m.spatial_emb.table, m.instance_emb.table):
        p.data[...] = 0
    assert np.array_equal(project(m, feats).data, np.zeros((4, 16)))


def test_project_rejects_too_many_tokens(model64, rng):
    with pytest.raises(ValueError, match="visual tokens"):
        project(model64, Tensor(rng.random((10, 1, 1, 8))))
    with pytest.raises(ValueError, match="channels"):
        project(model64, Tensor(rng.random((1, 1, 1, 5))))


def test_config_invariants():
    with pytest.raises(ValueError):
        CaptionerConfig(hidden=30, heads=4).resolve(2)
    assert CaptionerConfig(hidden=512).resolve(7).heads == 8
    with pytest.raises(ValueError):
        CaptionerConfig(max_bag_size=9, max_visual_tokens=10).resolve(2)


def test_zero_output_layers_give_two_log_vocab(tiny_encoder, rng):
    cfg = CaptionerConfig(hidden=16, layers_per_direction=1, vocab_size=50, dropout=0.0, zero_init_output=True)
    m = MICCaptioner(tiny_encoder, cfg, 0, np.float64)
    loss = caption_loss(m, bags(rng, [2, 1]), [caption(5, 6, 7), caption(9)])
    assert abs(loss.item() - 2 * math.log(50)) < 1e-9


def test_loss_decomposes_into_directions(model64, rng):
    b, t = bags(rng, [2, 3]), [caption(4, 5, 6, 7), caption(8, 9)]
    total = caption_loss(model64, b, t).item()
    fwd = caption_loss_terms(model64, b, t, ("forward",))["forward"].item()
    bwd = caption_loss_terms(model64, b, t, ("backward",))["backward"].item()
    assert total > 0 and abs(total - (fwd + bwd)) <= 1e-6 * total


def test_padding_and_reversal():
    ids = pad_tokens([caption(4, 5), caption(6)], 16)
    assert ids.tolist() == [[SOS, 4, 5, EOS], [SOS, 6, EOS, PAD]]
    assert reverse_tokens(ids).tolist() == [[EOS, 5, 4, SOS], [EOS, 6, SOS, PAD]]
    with pytest.raises(ValueError, match="max_caption_len"):
        pad_tokens([caption(*range(4, 10))], 4)


def test_full_loss_gradient_on_sampled_parameters(model64, rng):
    b, t = [rng.random((2, 3, 32, 32))], [caption(4, 5, 6, 7, 8, 9, 10, 11)]
    params = dict(model64.named_parameters())
    err = check_parameters(lambda: caption_loss(model64, b, t), params, 32, np.random.default_rng(3), eps=1e-5)
    assert err < 1e-3


@pytest.mark.parametrize("direction", ["forward", "backward"])
def test_heads_are_causal(model64, rng, direction):
    memory, mask = model64.memory(bags(rng, [2]))
    ids = np.array([[SOS, 4, 5, 6, 7, EOS]])
    seq = ids if direction == "forward" else reverse_tokens(ids)
    base = model64.logits(direction, seq, memory, mask).data
    changed = seq.copy()
    changed[0, 4] = 9
    after = model64.logits(direction, changed, memory, mask).data
    assert np.array_equal(base[0, :4], after[0, :4])
    assert not np.allclose(base[0, 4:], after[0, 4:])


def test_instance_order_only_matters_through_instance_embedding(model64, rng):
    model64.eval()
    bag = rng.random((3, 3, 32, 32))
    t = [caption(4, 5, 6)]
    model64.instance_emb.table.data[...] = 0
    a = caption_loss(model64, [bag], t).item()
    b = caption_loss(model64, [bag[[2, 0, 1]]], t).item()
    assert abs(a - b) < 1e-10


def test_generate_is_deterministic_and_bounded(model64, rng):
    bag = rng.random((2, 3, 32, 32))
    assert generate(model64, bag, 0).ids == [SOS, EOS]
    a, b = generate(model64, bag, 6), generate(model64, bag, 6)
    assert a.ids == b.ids and a.length <= 6
    with pytest.raises(ValueError):
        generate(model64, bag[:0], 4)


def test_attention_map_normalisation_and_bounds(model64, rng):
    bag = rng.random((3, 3, 32, 32))
    t = caption(4, 5, 6)
    amap = attention_map(model64, bag, t, 1)
    assert amap.heatmaps.shape == (3, 32, 32)
    assert abs(amap.heatmaps.sum() - 1.0) < 1e-5
    assert np.allclose(amap.heatmaps.sum(axis=(1, 2)), amap.shares)
    with pytest.raises(IndexError, match="0..2"):
        attention_map(model64, bag, t, 3)


def test_single_head_single_layer_map_is_the_softmax_row(tiny_encoder, rng):
    cfg = CaptionerConfig(hidden=16, heads=1, layers_per_direction=1, vocab_size=12, dropout=0.0)
    m = MICCaptioner(tiny_encoder, cfg, 1, np.float64)
    bag = rng.random((2, 3, 32, 32))
    t = caption(4, 5, 6)
    amap = attention_map(m, bag, t, 2)
    row = m.forward_head.layers[0].cross_attn._probs[0, 0, 2, :2]
    assert np.array_equal(amap.grids.reshape(-1), row)


def test_checkpoint_round_trip(tmp_path, tiny_encoder, tiny_captioner, rng):
    m = MICCaptioner(tiny_encoder, tiny_captioner, 5)
    save_checkpoint(m, tmp_path / "ck", {"step": 3})
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == [
        "config.json", "embeddings.bin", "phi_b.bin", "phi_f.bin", "theta.bin"]
    again, meta = load_checkpoint(tmp_path / "ck")
    assert meta["step"] == 3
    b, t = bags(rng, [2]), [caption(4, 5)]
    with inference(m), inference(again):
        assert caption_loss(m, b, t).item() == caption_loss(again, b, t).item()


def test_direction_parameters_are_disjoint(model64):
    names = [n for n, _ in model64.named_parameters()]
    fwd = {n.split(".", 1)[1] for n in names if n.startswith("forward_head.")}
    bwd = {n.split(".", 1)[1] for n in names if n.startswith("backward_head.")}
    assert fwd == bwd and model64.forward_head.out.weight is not model64.backward_head.out.weight
    assert sum(n.startswith("token_emb.") for n in names) == 1
