"""Tiny bidirectional transformer denoiser over a vocabulary with an absorbing mask."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class Vocabulary:
    """Base symbols plus one absorbing mask id appended after them."""

    symbols: tuple[str, ...]
    eos: str = "<eos>"

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary symbols must be unique")
        if self.eos not in self.symbols:
            raise ValueError(f"eos symbol {self.eos!r} must be a base token")

    @property
    def base_size(self) -> int:
        return len(self.symbols)

    @property
    def size(self) -> int:
        return len(self.symbols) + 1

    @property
    def mask_id(self) -> int:
        return len(self.symbols)

    @property
    def eos_id(self) -> int:
        return self.symbols.index(self.eos)

    def encode(self, text: str | Sequence[str]) -> list[int]:
        parts = text.split() if isinstance(text, str) else text
        lookup = {s: i for i, s in enumerate(self.symbols)}
        try:
            return [lookup[p] for p in parts]
        except KeyError as exc:
            raise ValueError(f"unknown symbol {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join("<mask>" if i == self.mask_id else self.symbols[i] for i in ids)


@dataclass(frozen=True)
class DenoiserConfig:
    layers: int = 2
    heads: int = 4
    model_dim: int = 128
    ffn_dim: int = 256
    max_prompt_len: int = 8
    max_response_len: int = 8
    seed: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        for name in ("layers", "heads", "model_dim", "ffn_dim", "max_prompt_len", "max_response_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    vocab: Vocabulary
    tensors: dict[str, Tensor]
    version_tag: str = "init"

    def parameters(self) -> list[Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def copy(self, version_tag: str | None = None, requires_grad: bool = True) -> "DenoiserParams":
        tensors = {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in self.tensors.items()}
        return DenoiserParams(self.config, self.vocab, tensors, version_tag or self.version_tag)

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(self.tensors[k].data.astype("<f8").tobytes())
        return h.hexdigest()[:12]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def _shapes(cfg: DenoiserConfig, vocab: Vocabulary) -> dict[str, tuple[int, ...]]:
    d, f = cfg.model_dim, cfg.ffn_dim
    shapes = {
        "tok_emb": (vocab.size, d),
        "pos_emb": (cfg.max_prompt_len + cfg.max_response_len, d),
        "prompt_pos_emb": (cfg.max_prompt_len, d),
        "lnf.g": (d,),
        "lnf.b": (d,),
        "out.w": (d, vocab.base_size),
        "out.b": (vocab.base_size,),
    }
    for i in range(cfg.layers):
        p = f"h{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "w1": (d, f), p + "b1": (f,), p + "w2": (f, d), p + "b2": (d,),
        })
    return shapes


def init_params(cfg: DenoiserConfig, vocab: Vocabulary, zero: bool = False) -> DenoiserParams:
    """Gaussian init (or all-zero weights with unit layer-norm gains when ``zero``)."""
    rng = np.random.default_rng(cfg.seed)
    tensors = {}
    for name, shape in _shapes(cfg, vocab).items():
        if name.endswith(".g"):
            data = np.ones(shape)
        elif name.endswith(".b") or name.endswith("b1") or name.endswith("b2") or zero:
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, cfg.init_std, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    params = DenoiserParams(cfg, vocab, tensors)
    params.version_tag = f"{'zero' if zero else 'init'}-{params.digest()}"
    return params


def _pad_prompts(params: DenoiserParams, prompts: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Left-padded prompt ids and each slot's offset from the prompt start (-1 on padding)."""
    L = params.config.max_prompt_len
    eos = params.vocab.eos_id
    out = np.full((len(prompts), L), eos, dtype=np.int64)
    offs = np.full((len(prompts), L), -1, dtype=np.int64)
    for i, p in enumerate(prompts):
        if len(p) > L:
            raise ValueError(f"prompt length {len(p)} exceeds max_prompt_len {L}")
        if len(p):
            out[i, L - len(p):] = p
            offs[i, L - len(p):] = np.arange(len(p))
    return out, offs


def forward(params: DenoiserParams, prompts: Sequence[Sequence[int]], states: np.ndarray) -> Tensor:
    """Logits ``[B, N, |base|]`` at every response position.

    ``prompts`` are left-padded with EOS to the configured prompt length, so
    response position ``r`` always sits at absolute position ``L + r``.
    Prompt tokens also get an embedding of their offset from the prompt
    start, so both ends of a variable-length prompt are addressable.
    """
    cfg = params.config
    states = np.asarray(states, dtype=np.int64)
    if states.ndim != 2:
        raise ValueError(f"states must be [batch, length], got shape {states.shape}")
    if states.shape[1] > cfg.max_response_len:
        raise ValueError(f"response length {states.shape[1]} exceeds max_response_len {cfg.max_response_len}")
    if len(prompts) != states.shape[0]:
        raise ValueError(f"{len(prompts)} prompts for {states.shape[0]} states")
    if states.size and (states.min() < 0 or states.max() > params.vocab.mask_id):
        raise ValueError("state token out of range")
    L = cfg.max_prompt_len
    padded, offs = _pad_prompts(params, prompts)
    ids = np.concatenate([padded, states], axis=1)
    B, S = ids.shape
    d, H = cfg.model_dim, cfg.heads
    dh = d // H
    p = params.tensors

    x = ad.gather(p["tok_emb"], ids) + p["pos_emb"][:S]
    live = Tensor(np.repeat((offs >= 0)[..., None], d, axis=2).astype(np.float64))
    prompt_pos = ad.mul(ad.gather(p["prompt_pos_emb"], np.maximum(offs, 0)), live)
    x = x + ad.concat([prompt_pos, Tensor(np.zeros((B, states.shape[1], d)))], axis=1)
    for i in range(cfg.layers):
        pre = f"h{i}."
        h = ad.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])

        def heads(t):
            return ad.transpose(ad.reshape(t, (B, S, H, dh)), (0, 2, 1, 3))

        q = heads(h @ p[pre + "wq"])
        k = heads(h @ p[pre + "wk"])
        v = heads(h @ p[pre + "wv"])
        att = ad.softmax(ad.scale(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(dh)))
        o = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (B, S, d))
        x = x + o @ p[pre + "wo"]
        h = ad.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        h = ad.gelu(h @ p[pre + "w1"] + p[pre + "b1"])
        x = x + (h @ p[pre + "w2"] + p[pre + "b2"])
    x = ad.layer_norm(x[:, L:, :], p["lnf.g"], p["lnf.b"])
    return x @ p["out.w"] + p["out.b"]


def predict_batch(params: DenoiserParams, prompts, states) -> np.ndarray:
    with ad.no_grad():
        logits = forward(params, prompts, states).data
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(params: DenoiserParams, prompt: Sequence[int], state) -> np.ndarray:
    """Probability rows ``[N, |base|]`` for one prompt and one masked state."""
    tokens = state.tokens if hasattr(state, "tokens") else state
    return predict_batch(params, [list(prompt)], np.asarray([tokens]))[0]


def token_entropy(row) -> float:
    """Entropy in nats with ``0 ln 0 = 0``."""
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1 or np.any(row < -1e-12) or abs(row.sum() - 1.0) > 1e-6:
        raise ValueError("row is not a normalized probability vector")
    nz = row[row > 0]
    return float(-(nz * np.log(nz)).sum())


def entropies(probs: np.ndarray) -> np.ndarray:
    """Row-wise entropy for an array of probability rows (no validation)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return -terms.sum(axis=-1)


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"TABOMCKPT1\n"


def save_checkpoint(params: DenoiserParams, path) -> None:
    path = Path(path)
    index, blobs, offset = [], [], 0
    for name in sorted(params.tensors):
        raw = params.tensors[name].data.astype("<f8").tobytes()
        index.append({"name": name, "shape": list(params.tensors[name].shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({
        "version_tag": params.version_tag,
        "config": asdict(params.config),
        "vocab": {"symbols": list(params.vocab.symbols), "eos": params.vocab.eos},
        "dtype": "<f8",
        "tensors": index,
    }, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> DenoiserParams:
    blob = Path(path).read_bytes()
    if not blob.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    header = json.loads(blob[pos:pos + hlen])
    pos += hlen
    cfg = DenoiserConfig(**header["config"])
    vocab = Vocabulary(tuple(header["vocab"]["symbols"]), header["vocab"]["eos"])
    tensors = {}
    for entry in header["tensors"]:
        start = pos + entry["offset"]
        data = np.frombuffer(blob[start:start + entry["nbytes"]], dtype="<f8")
        if data.size != int(np.prod(entry["shape"])):
            raise ValueError(f"{path}: tensor {entry['name']} is truncated")
        tensors[entry["name"]] = Tensor(data.reshape(entry["shape"]).astype(np.float64), requires_grad=True)
    expected = set(_shapes(cfg, vocab))
    if set(tensors) != expected:
        raise ValueError(f"{path}: parameter names do not match config")
    return DenoiserParams(cfg, vocab, tensors, header["version_tag"])
