"""Model families exposing per-layer representations.

Two architectures: a 2-layer MLP (teacher/student in the conflicting-memory
experiment) and a small decoder-only transformer with optional mirrored
skip connections (layer l feeds layer L+1-l through a learned scalar gain,
zero-initialized so the skip is inert at step 0).

Every forward returns an ActivationBundle whose layers[i] is the i+1-th
block output flattened to (tokens, model_dim), the granularity entropy
measurements run on.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .diagnostics import GroupId
from .errors import ShapeMismatchError
from .tensor import Tensor

NEG_MASK = -1e30


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int = 10
    hidden_dim: int = 32
    output_dim: int = 10
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1:
            raise ValueError("all dims must be positive")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 4
    model_dim: int = 64
    heads: int = 4
    vocab_size: int = 256
    context_length: int = 128
    unet_skips: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ValueError("model_dim must be divisible by heads")
        if self.unet_skips and self.layers % 2 != 0:
            raise ValueError("unet_skips requires an even layer count")


@dataclass
class ActivationBundle:
    layers: list  # R_1..R_L as (tokens, model_dim) Tensors
    logits: Tensor


def _gaussian(rng, shape, std):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape), requires_grad=True)


def init_mlp_params(config):
    rng = np.random.default_rng(config.seed)
    return {
        "layer1.w": _gaussian(rng, (config.input_dim, config.hidden_dim),
                              1.0 / np.sqrt(config.input_dim)),
        "layer1.b": _zeros(config.hidden_dim),
        "layer2.w": _gaussian(rng, (config.hidden_dim, config.output_dim),
                              1.0 / np.sqrt(config.hidden_dim)),
        "layer2.b": _zeros(config.output_dim),
    }


def _linear(x, w, b):
    return T.add(T.matmul(x, w), T.reshape(b, (1, b.shape[0])))


def mlp_forward(config, params, x):
    """Forward a (batch, input_dim) matrix; layer 1 is the hidden rep."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise ShapeMismatchError("mlp_forward", x.shape, (0, config.input_dim))
    act = T.relu if config.activation == "relu" else T.gelu
    hidden = act(_linear(x, params["layer1.w"], params["layer1.b"]))
    out = _linear(hidden, params["layer2.w"], params["layer2.b"])
    return ActivationBundle(layers=[hidden], logits=out)


def shifted_params(params, delta, sign):
    """theta +/- delta, elementwise; returns fresh untracked tensors."""
    if sign not in (1, -1):
        raise ValueError(f"sign must be +1 or -1, got {sign}")
    shifted = {}
    for name, p in params.items():
        d = np.asarray(delta[name])
        if d.shape != p.shape:
            raise ShapeMismatchError("shifted_params", p.shape, d.shape)
        shifted[name] = Tensor(p.data + sign * d)
    return shifted


def draw_param_shift(params, seed, scale=0.5):
    """Gaussian shift per weight matrix, std = scale * its init std.

    Biases initialize at zero, so their shift is zero: the two teachers
    differ in weights only.
    """
    rng = np.random.default_rng(seed)
    delta = {}
    for name, p in params.items():
        if p.data.ndim == 2:
            std = scale / np.sqrt(p.shape[0])
            delta[name] = rng.normal(0.0, std, size=p.shape)
        else:
            delta[name] = np.zeros(p.shape)
    return delta


def init_transformer_params(config):
    rng = np.random.default_rng(config.seed)
    d = config.model_dim
    std = 1.0 / np.sqrt(d)
    params = {
        "embed.token": _gaussian(rng, (config.vocab_size, d), std),
        "embed.pos": _gaussian(rng, (config.context_length, d), std),
    }
    for l in range(1, config.layers + 1):
        prefix = f"block{l}"
        params[f"{prefix}.ln1.gain"] = _ones(d)
        params[f"{prefix}.ln1.bias"] = _zeros(d)
        for piece in ("wq", "wk", "wv", "wo"):
            params[f"{prefix}.attn.{piece}"] = _gaussian(rng, (d, d), std)
        params[f"{prefix}.attn.bo"] = _zeros(d)
        params[f"{prefix}.ln2.gain"] = _ones(d)
        params[f"{prefix}.ln2.bias"] = _zeros(d)
        params[f"{prefix}.mlp.w1"] = _gaussian(rng, (d, 4 * d), std)
        params[f"{prefix}.mlp.b1"] = _zeros(4 * d)
        params[f"{prefix}.mlp.w2"] = _gaussian(rng, (4 * d, d), 1.0 / np.sqrt(4 * d))
        params[f"{prefix}.mlp.b2"] = _zeros(d)
    if config.unet_skips:
        for l in range(1, config.layers // 2 + 1):
            params[f"skip.gain{l}"] = _zeros((1, 1, 1))
    params["final_ln.gain"] = _ones(d)
    params["final_ln.bias"] = _zeros(d)
    params["head.w"] = _gaussian(rng, (d, config.vocab_size), std)
    params["head.b"] = _zeros(config.vocab_size)
    return params


def parameter_group(name, n_layers):
    """Map a parameter name to its (layer, kind) diagnostics group."""
    if name.startswith("embed."):
        return GroupId(0, "embedding")
    if name.startswith("block"):
        layer = int(name[5:name.index(".")])
        kind = "attention" if (".attn." in name or ".ln1." in name) else "mlp"
        return GroupId(layer, kind)
    if name.startswith("skip.gain"):
        return GroupId(int(name[len("skip.gain"):]), "other")
    return GroupId(n_layers + 1, "other")


def causal_mask(seq_len):
    mask = np.triu(np.full((seq_len, seq_len), NEG_MASK), k=1)
    return Tensor(mask.reshape(1, 1, seq_len, seq_len))


def _tokens_linear(x, w, b=None):
    """Linear layer applied over the flattened token axis of (B, T, D)."""
    bsz, seq, d = x.shape
    flat = T.matmul(T.reshape(x, (bsz * seq, d)), w)
    if b is not None:
        flat = T.add(flat, T.reshape(b, (1, b.shape[0])))
    return T.reshape(flat, (bsz, seq, w.shape[1]))


def _attention(x, params, prefix, heads, mask):
    bsz, seq, d = x.shape
    head_dim = d // heads

    def split_heads(t):
        return T.permute(T.reshape(t, (bsz, seq, heads, head_dim)), (0, 2, 1, 3))

    q = split_heads(_tokens_linear(x, params[f"{prefix}.attn.wq"]))
    k = split_heads(_tokens_linear(x, params[f"{prefix}.attn.wk"]))
    v = split_heads(_tokens_linear(x, params[f"{prefix}.attn.wv"]))

    scores = T.scalar_mul(T.matmul(q, T.permute(k, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim))
    weights = T.softmax(T.add(scores, mask))
    mixed = T.reshape(T.permute(T.matmul(weights, v), (0, 2, 1, 3)), (bsz, seq, d))
    return _tokens_linear(mixed, params[f"{prefix}.attn.wo"], params[f"{prefix}.attn.bo"])


def transformer_forward(config, params, tokens):
    """Causal decoder forward over (batch, seq) token ids.

    With unet_skips on, block l's output (l <= L/2) is added to the input
    of block L+1-l, scaled by the learned gain for that pair.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be (batch, seq), got shape {tokens.shape}")
    bsz, seq = tokens.shape
    if seq > config.context_length:
        raise ValueError(f"sequence length {seq} exceeds context {config.context_length}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError("token id out of range")

    tok = T.embedding(params["embed.token"], tokens)
    pos = T.reshape(T.embedding(params["embed.pos"], np.arange(seq)), (1, seq, config.model_dim))
    x = T.add(tok, pos)
    mask = causal_mask(seq)

    half = config.layers // 2
    saved = {}
    reps = []
    for l in range(1, config.layers + 1):
        if config.unet_skips and l > half:
            pair = config.layers + 1 - l
            x = T.add(x, T.mul(params[f"skip.gain{pair}"], saved[pair]))
        prefix = f"block{l}"
        h = T.layer_norm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
        x = T.add(x, _attention(h, params, prefix, config.heads, mask))
        h = T.layer_norm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
        m = _tokens_linear(h, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"])
        m = _tokens_linear(T.gelu(m), params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])
        x = T.add(x, m)
        if config.unet_skips and l <= half:
            saved[l] = x
        reps.append(T.reshape(x, (bsz * seq, config.model_dim)))

    final = T.layer_norm(x, params["final_ln.gain"], params["final_ln.bias"])
    logits = _tokens_linear(final, params["head.w"], params["head.b"])
    return ActivationBundle(layers=reps, logits=logits)
