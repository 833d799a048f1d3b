"""Desk-scale protocol runs shared by the scripts and the acceptance suite."""
from __future__ import annotations

import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .captioner import (CaptionerConfig, MICCaptioner, attention_map, caption_loss_terms, generate,
                        inference)
from .corpus import Bag, ImageCache
from .encoder import EncoderConfig
from .rng import make_generator
from .synthetic import OVERFIT_CAPTIONS, bright_instance_bag, write_synthetic_corpus
from .tokenizer import decode_tokens, encode_text, train_bpe
from .training import TrainConfig, TrainResult, train_mic

TINY_ENCODER = EncoderConfig(stem_channels=8, stage_channels=(8, 16, 16, 32), input_size=32, stem_kernel=3)


@dataclass
class OverfitOutcome:
    result: TrainResult
    nll: dict
    captions: list[str]
    decoded: list[str]

    @property
    def exact(self) -> int:
        return sum(a == b for a, b in zip(self.captions, self.decoded))


def overfit_run(seed: int = 7, n_bags: int = 8, max_steps: int = 500, root=None,
                enc_cfg: EncoderConfig | None = None, cap_cfg: CaptionerConfig | None = None) -> OverfitOutcome:
    """Train on a handful of synthetic bags until they are memorised, then decode them greedily."""
    enc_cfg = enc_cfg or EncoderConfig()
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(root or tmp)
        bags = write_synthetic_corpus(root, n_bags, enc_cfg.input_size, seed, OVERFIT_CAPTIONS)
        bags = [replace(b, image_refs=tuple(str(root / r) for r in b.image_refs)) for b in bags]
        vocab = train_bpe([b.caption for b in bags])
        cap_cfg = replace(cap_cfg or CaptionerConfig(dropout=0.0), vocab_size=vocab.size)
        model = MICCaptioner(enc_cfg, cap_cfg, seed)
        cache = ImageCache(enc_cfg.input_size)
        result = train_mic(model, bags, [], vocab, TrainConfig(max_steps=max_steps, patience=max_steps), seed, cache)
        images = [cache.bag(b) for b in bags]
        with inference(model):
            terms = caption_loss_terms(model, images, [encode_text(vocab, b.caption) for b in bags])
        decoded = [decode_tokens(vocab, generate(model, im, cap_cfg.max_caption_len)) for im in images]
    return OverfitOutcome(result, {k: v.item() for k, v in terms.items()}, [b.caption for b in bags], decoded)


@dataclass
class AttentionOutcome:
    accuracy: float
    shares: list = field(default_factory=list)   # per held-out bag: instance attention shares
    targets: list = field(default_factory=list)
    result: TrainResult | None = None


def _bright_bags(n, rng, size, cache, prefix):
    bags, targets = [], []
    for i in range(n):
        images, bright, colour = bright_instance_bag(rng, size, bag_size=int(rng.integers(2, 5)))
        refs = []
        for j, img in enumerate(images):
            ref = f"{prefix}{i}/{j}"
            cache.put(ref, img)
            refs.append(ref)
        bags.append(Bag(f"{prefix}{i}", tuple(refs), f"a {colour} instance"))
        targets.append(bright)
    return bags, targets


def bright_instance_run(seed: int = 0, n_train: int = 240, n_test: int = 60, max_steps: int = 600,
                        enc_cfg: EncoderConfig = TINY_ENCODER, hidden: int = 32) -> AttentionOutcome:
    """Bags with one bright coloured instance, captioned by its colour.

    After training, the forward decoder's cross-attention while predicting the
    colour word should peak on the bright instance.
    """
    rng = make_generator(seed, "bright-bags")
    cache = ImageCache(enc_cfg.input_size)
    train, _ = _bright_bags(n_train, rng, enc_cfg.input_size, cache, "train")
    test, targets = _bright_bags(n_test, rng, enc_cfg.input_size, cache, "test")
    vocab = train_bpe([b.caption for b in train])
    cfg = CaptionerConfig(hidden=hidden, layers_per_direction=1, vocab_size=vocab.size,
                          max_caption_len=16, dropout=0.0)
    model = MICCaptioner(enc_cfg, cfg, seed)
    result = train_mic(model, train, [], vocab, TrainConfig(max_steps=max_steps, patience=max_steps), seed, cache)
    out = AttentionOutcome(0.0, result=result)
    hits = 0
    for bag, target in zip(test, targets):
        tokens = encode_text(vocab, bag.caption)
        colour_id = vocab._encode_chunk(" " + bag.caption.split()[1])[0]
        position = tokens.ids.index(colour_id)
        amap = attention_map(model, cache.bag(bag), tokens, position - 1)
        out.shares.append(amap.shares)
        out.targets.append(target)
        hits += int(np.argmax(amap.shares) == target)
    out.accuracy = hits / len(test)
    return out
