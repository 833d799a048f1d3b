"""Multiple-instance captioning model.

Every image of a bag goes through the shared encoder; each grid cell becomes a
visual token (linear map + GELU, plus spatial and instance-index embeddings).
The tokens of all instances are concatenated in bag order into one memory
sequence, which a forward and a backward transformer decoder cross-attend to.
The training objective is the sum of the forward and backward caption
negative log-likelihoods.
"""
from __future__ import annotations

import contextlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .augment import bilinear_resize
from .encoder import Encoder, EncoderConfig, TAP_COUNT
from .nn import Embedding, LayerNorm, Linear, Module, ModuleList
from .rng import make_generator
from .serialize import load_tensors, save_tensors
from .tensor import Tensor, concat, no_grad
from .tokenizer import EOS, PAD, SOS, CaptionTokens

CHECKPOINT_GROUPS = ("theta", "phi_f", "phi_b", "embeddings")


@dataclass
class CaptionerConfig:
    hidden: int = 64
    heads: int | None = None
    layers_per_direction: int = 2
    max_bag_size: int = 9
    max_visual_tokens: int | None = None
    max_caption_len: int = 64
    vocab_size: int = 4096
    ffn_mult: int = 4
    dropout: float = 0.1
    zero_init_output: bool = False

    def resolve(self, grid: int) -> CaptionerConfig:
        """Fill derived defaults and check invariants against the encoder grid side."""
        cfg = CaptionerConfig(**asdict(self))
        if cfg.heads is None:
            cfg.heads = max(1, cfg.hidden // 64)
        if cfg.max_visual_tokens is None:
            cfg.max_visual_tokens = cfg.max_bag_size * grid * grid
        if cfg.hidden % cfg.heads:
            raise ValueError(f"hidden width {cfg.hidden} is not divisible by {cfg.heads} heads")
        if cfg.max_visual_tokens < cfg.max_bag_size * grid * grid:
            raise ValueError(f"max_visual_tokens {cfg.max_visual_tokens} < {cfg.max_bag_size} x {grid}^2")
        return cfg


class Attention(Module):
    def __init__(self, width, heads, rng, dtype):
        self.q = Linear(width, width, rng, std=0.02, dtype=dtype)
        self.k = Linear(width, width, rng, std=0.02, dtype=dtype)
        self.v = Linear(width, width, rng, std=0.02, dtype=dtype)
        self.o = Linear(width, width, rng, std=0.02, dtype=dtype)
        self._heads = heads
        self._probs: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        n, length, width = x.shape
        h = self._heads
        return x.reshape(n, length, h, width // h).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, kv: Tensor, mask: np.ndarray) -> Tensor:
        n, length, width = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(kv)), self._split(self.v(kv))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(width // self._heads))
        probs = F.softmax(scores, axis=-1, mask=mask)
        self._probs = probs.data
        out = (probs @ v).transpose(0, 2, 1, 3).reshape(n, length, width)
        return self.o(out)


class DecoderLayer(Module):
    def __init__(self, width, heads, ffn_mult, rng, dtype):
        self.ln_self = LayerNorm(width, dtype)
        self.self_attn = Attention(width, heads, rng, dtype)
        self.ln_cross = LayerNorm(width, dtype)
        self.cross_attn = Attention(width, heads, rng, dtype)
        self.ln_ffn = LayerNorm(width, dtype)
        self.ffn_in = Linear(width, ffn_mult * width, rng, std=0.02, dtype=dtype)
        self.ffn_out = Linear(ffn_mult * width, width, rng, std=0.02, dtype=dtype)

    def __call__(self, x, memory, self_mask, cross_mask, drop):
        h = self.ln_self(x)
        x = x + drop(self.self_attn(h, h, self_mask))
        h = self.ln_cross(x)
        x = x + drop(self.cross_attn(h, memory, cross_mask))
        x = x + drop(self.ffn_out(F.gelu(self.ffn_in(self.ln_ffn(x)))))
        return x


class Decoder(Module):
    """One caption direction: positions, pre-norm layers, final norm, untied output layer."""

    def __init__(self, cfg: CaptionerConfig, rng, dtype):
        self.pos_emb = Embedding(cfg.max_caption_len + 1, cfg.hidden, rng, dtype=dtype)
        self.layers = ModuleList(DecoderLayer(cfg.hidden, cfg.heads, cfg.ffn_mult, rng, dtype)
                                 for _ in range(cfg.layers_per_direction))
        self.ln_out = LayerNorm(cfg.hidden, dtype)
        self.out = Linear(cfg.hidden, cfg.vocab_size, rng, std=0.02, dtype=dtype)
        if cfg.zero_init_output:
            self.out.weight.data[...] = 0
            self.out.bias.data[...] = 0

    def __call__(self, tok_emb: Tensor, memory: Tensor, mem_mask: np.ndarray, drop) -> Tensor:
        n, length, _ = tok_emb.shape
        x = tok_emb + self.pos_emb(np.broadcast_to(np.arange(length), (n, length)))
        x = drop(x)
        causal = np.tril(np.ones((length, length), dtype=bool))[None, None]
        cross = mem_mask[:, None, None, :]
        for layer in self.layers:
            x = layer(x, memory, causal, cross, drop)
        return self.out(self.ln_out(x))

    def cross_attention(self) -> list[np.ndarray]:
        return [layer.cross_attn._probs for layer in self.layers]


class MICCaptioner(Module):
    def __init__(self, enc_cfg: EncoderConfig, cfg: CaptionerConfig, seed: int, dtype=np.float32):
        self._enc_cfg = enc_cfg
        self._cfg = cfg = cfg.resolve(enc_cfg.grid)
        self._seed = seed
        self._drop_rng = make_generator(seed, "captioner-dropout")
        rng = make_generator(seed, "captioner")
        g = enc_cfg.grid
        self.encoder = Encoder(enc_cfg, seed, dtype)
        self.proj = Linear(enc_cfg.out_channels, cfg.hidden, rng, dtype=dtype)
        self.spatial_emb = Embedding(g * g, cfg.hidden, rng, dtype=dtype)
        self.instance_emb = Embedding(cfg.max_bag_size, cfg.hidden, rng, dtype=dtype)
        self.token_emb = Embedding(cfg.vocab_size, cfg.hidden, rng, dtype=dtype)
        self.forward_head = Decoder(cfg, rng, dtype)
        self.backward_head = Decoder(cfg, rng, dtype)

    @property
    def config(self) -> CaptionerConfig:
        return self._cfg

    @property
    def encoder_config(self) -> EncoderConfig:
        return self._enc_cfg

    @property
    def dtype(self):
        return self.proj.weight.dtype

    def _drop(self, x: Tensor) -> Tensor:
        return F.dropout(x, self._cfg.dropout, self._drop_rng, self.training)

    # -- visual side -------------------------------------------------------
    def visual_tokens(self, bag_images: list[np.ndarray]) -> tuple[Tensor, list[int]]:
        sizes = [len(b) for b in bag_images]
        if not sizes or min(sizes) < 1:
            raise ValueError("every bag needs at least one image")
        images = Tensor(np.concatenate(bag_images).astype(self.dtype))
        feats = self.encoder(images, TAP_COUNT).transpose(0, 2, 3, 1)
        tokens = project(self, feats, sizes)
        return tokens, sizes

    def memory(self, bag_images: list[np.ndarray]) -> tuple[Tensor, np.ndarray]:
        """Padded ``N x M x H`` memory and its ``N x M`` validity mask."""
        tokens, sizes = self.visual_tokens(bag_images)
        g2 = self._enc_cfg.grid ** 2
        counts = [s * g2 for s in sizes]
        m = max(counts)
        pad_row = tokens.shape[0]
        index = np.full((len(sizes), m), pad_row, dtype=np.int64)
        start = 0
        for i, c in enumerate(counts):
            index[i, :c] = np.arange(start, start + c)
            start += c
        zero = Tensor(np.zeros((1, tokens.shape[1]), dtype=self.dtype))
        memory = concat([tokens, zero])[index]
        return memory, index != pad_row

    # -- text side ---------------------------------------------------------
    def head(self, direction: str) -> Decoder:
        if direction == "forward":
            return self.forward_head
        if direction == "backward":
            return self.backward_head
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")

    def logits(self, direction: str, ids: np.ndarray, memory: Tensor, mem_mask: np.ndarray) -> Tensor:
        return self.head(direction)(self.token_emb(ids), memory, mem_mask, self._drop)


def project(model: MICCaptioner, features: Tensor, sizes: list[int] | None = None) -> Tensor:
    """``(sum B) x g x g x C`` encoder features to ``(sum B * g^2) x H`` visual tokens.

    ``sizes`` lists the bag sizes in order (one bag of all instances by default);
    instance indices restart at 0 in every bag.
    """
    n, g, g2, c = features.shape
    cfg = model.config
    if c != model.proj.weight.shape[0]:
        raise ValueError(f"features have {c} channels, projection expects {model.proj.weight.shape[0]}")
    sizes = [n] if sizes is None else list(sizes)
    if sum(sizes) != n:
        raise ValueError(f"bag sizes {sizes} do not add up to {n} instances")
    for s in sizes:
        if s * g * g2 > cfg.max_visual_tokens or s > cfg.max_bag_size:
            raise ValueError(f"bag of {s} images gives {s * g * g2} visual tokens, over the limit "
                             f"{cfg.max_visual_tokens} (max bag size {cfg.max_bag_size})")
    x = F.gelu(model.proj(features.reshape(n * g * g2, c)))
    spatial = np.tile(np.arange(g * g2), n)
    instance = np.repeat(np.concatenate([np.arange(s) for s in sizes]), g * g2)
    return x + model.spatial_emb(spatial) + model.instance_emb(instance)


def pad_tokens(tokens: list[CaptionTokens], max_caption_len: int) -> np.ndarray:
    for t in tokens:
        if t.length > max_caption_len:
            raise ValueError(f"caption of {t.length} tokens exceeds max_caption_len={max_caption_len}")
    width = max(len(t) for t in tokens)
    out = np.full((len(tokens), width), PAD, dtype=np.int64)
    for i, t in enumerate(tokens):
        out[i, :len(t)] = t.ids
    return out


def reverse_tokens(ids: np.ndarray) -> np.ndarray:
    """Reverse each row's non-PAD prefix; padding stays at the end."""
    out = np.full_like(ids, PAD)
    for i, row in enumerate(ids):
        n = int((row != PAD).sum())
        out[i, :n] = row[:n][::-1]
    return out


def direction_loss(model: MICCaptioner, direction: str, ids: np.ndarray, memory: Tensor,
                   mem_mask: np.ndarray) -> Tensor:
    seq = ids if direction == "forward" else reverse_tokens(ids)
    logits = model.logits(direction, seq[:, :-1], memory, mem_mask)
    n, length, v = logits.shape
    return F.softmax_cross_entropy(logits.reshape(n * length, v), seq[:, 1:].reshape(-1), ignore_index=PAD)


def caption_loss_terms(model: MICCaptioner, bag_images: list[np.ndarray],
                       tokens: list[CaptionTokens], directions=("forward", "backward")) -> dict[str, Tensor]:
    if len(bag_images) != len(tokens):
        raise ValueError(f"{len(bag_images)} bags but {len(tokens)} captions")
    ids = pad_tokens(tokens, model.config.max_caption_len)
    memory, mask = model.memory(bag_images)
    return {d: direction_loss(model, d, ids, memory, mask) for d in directions}


def caption_loss(model: MICCaptioner, bag_images: list[np.ndarray], tokens: list[CaptionTokens]) -> Tensor:
    """Forward plus backward mean per-token NLL; PAD targets are ignored."""
    terms = caption_loss_terms(model, bag_images, tokens)
    return terms["forward"] + terms["backward"]


@contextlib.contextmanager
def inference(model: Module):
    prev = model.training
    model.eval()
    try:
        with no_grad():
            yield
    finally:
        model.train(prev)


def generate(model: MICCaptioner, bag: np.ndarray, max_len: int) -> CaptionTokens:
    """Greedy forward decoding from SOS until EOS or ``max_len`` generated tokens."""
    bag = np.asarray(bag)
    if bag.ndim != 4 or len(bag) == 0:
        raise ValueError("generate needs a non-empty bag of images (B x 3 x S x S)")
    max_len = min(max_len, model.config.max_caption_len)
    ids = [SOS]
    with inference(model):
        memory, mask = model.memory([bag])
        for _ in range(max_len):
            logits = model.logits("forward", np.array([ids]), memory, mask)
            scores = logits.data[0, -1].copy()
            scores[[PAD, SOS]] = -np.inf
            nxt = int(np.argmax(scores))
            if nxt == EOS:
                break
            ids.append(nxt)
    return CaptionTokens(ids + [EOS])


@dataclass
class AttentionMap:
    grids: np.ndarray       # B x g x g, raw attention mass per grid cell
    heatmaps: np.ndarray    # B x S x S, upsampled; each map keeps its instance's share
    shares: np.ndarray = field(default=None)  # B, attention mass per instance


def attention_map(model: MICCaptioner, bag: np.ndarray, tokens: CaptionTokens, token_index: int) -> AttentionMap:
    """Forward-decoder cross-attention while predicting caption token ``token_index`` (0-based).

    Weights are averaged over heads and layers, split into per-instance grids and
    bilinearly upsampled to the input size.
    """
    if not 0 <= token_index < tokens.length:
        raise IndexError(f"token_index {token_index} out of range for a caption of {tokens.length} tokens "
                         f"(valid: 0..{tokens.length - 1})")
    bag = np.asarray(bag)
    g = model.encoder_config.grid
    s = model.encoder_config.input_size
    with inference(model):
        memory, mask = model.memory([bag])
        ids = np.array([tokens.ids[:-1]])
        model.logits("forward", ids, memory, mask)
        probs = model.forward_head.cross_attention()
    # layers x heads averaged; row token_index predicts caption token token_index
    row = np.mean([p[0, :, token_index, :] for p in probs], axis=(0, 1))
    row = row[: len(bag) * g * g]
    grids = row.reshape(len(bag), g, g)
    shares = grids.sum(axis=(1, 2))
    up = bilinear_resize(grids, s, s)
    sums = up.sum(axis=(1, 2), keepdims=True)
    heat = up * (shares[:, None, None] / np.where(sums > 0, sums, 1.0))
    return AttentionMap(grids, heat, shares)


# -- checkpoints --------------------------------------------------------------

def _group_of(name: str) -> str:
    if name.startswith("forward_head."):
        return "phi_f"
    if name.startswith("backward_head."):
        return "phi_b"
    if name.startswith("token_emb."):
        return "embeddings"
    return "theta"


def save_checkpoint(model: MICCaptioner, directory, extra: dict | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    groups = {g: {} for g in CHECKPOINT_GROUPS}
    for name, arr in model.state_dict().items():
        groups[_group_of(name)][name] = arr
    for g, tensors in groups.items():
        save_tensors(directory / f"{g}.bin", tensors)
    config = {"encoder": asdict(model.encoder_config), "captioner": asdict(model.config),
              "seed": model._seed, "dtype": np.dtype(model.dtype).name}
    if extra:
        config.update(extra)
    (directory / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))


def load_checkpoint(directory) -> tuple[MICCaptioner, dict]:
    directory = Path(directory)
    config = json.loads((directory / "config.json").read_text())
    enc_cfg = EncoderConfig(**config["encoder"])
    cap_cfg = CaptionerConfig(**config["captioner"])
    model = MICCaptioner(enc_cfg, cap_cfg, config.get("seed", 0), np.dtype(config.get("dtype", "float32")))
    state = {}
    for g in CHECKPOINT_GROUPS:
        state.update(load_tensors(directory / f"{g}.bin"))
    model.load_state_dict(state)
    return model, config
