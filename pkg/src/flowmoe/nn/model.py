"""Network building blocks: transformer encoder, two-layer heads, gradients.

The encoder reshapes the 912-value flow feature vector into 24 tokens of
38 features, runs one 2-head self-attention layer plus a position-wise
feed-forward (38 -> 152 -> 38), each with residual connection and layer
norm, and flattens back to 912.
"""

from __future__ import annotations

import math

import numpy as np

from .params import ParamSet, init_linear
from .tensor import Tensor, cross_entropy, dropout, layer_norm, no_grad, relu, softmax

INPUT_DIM = 912
N_TOKENS = 24
TOKEN_DIM = 38
N_HEADS = 2
HEAD_DIM = TOKEN_DIM // N_HEADS
FF_DIM = 4 * TOKEN_DIM
HIDDEN_DIM = 256


def positional_encoding(n_tokens=N_TOKENS, dim=TOKEN_DIM):
    pe = np.zeros((n_tokens, dim))
    pos = np.arange(n_tokens)[:, None]
    div = np.exp(np.arange(0, dim, 2) * (-math.log(10000.0) / dim))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: pe[:, 1::2].shape[1]])
    return pe


_PE = positional_encoding()


def init_encoder(rng) -> ParamSet:
    p = ParamSet()
    for name in ("attn.q", "attn.k", "attn.v", "attn.o"):
        init_linear(p, name, TOKEN_DIM, TOKEN_DIM, rng)
    p.add("ln1.gamma", np.ones(TOKEN_DIM))
    p.add("ln1.beta", np.zeros(TOKEN_DIM))
    init_linear(p, "ff.1", TOKEN_DIM, FF_DIM, rng)
    init_linear(p, "ff.2", FF_DIM, TOKEN_DIM, rng)
    p.add("ln2.gamma", np.ones(TOKEN_DIM))
    p.add("ln2.beta", np.zeros(TOKEN_DIM))
    return p


def init_head(rng, n_out, zero_output=False) -> ParamSet:
    """Two-layer classification head [912 -> 256 -> n_out].

    `zero_output` starts the final layer at zero so the head begins at the
    uniform prediction (used for freshly attached towers).
    """
    p = ParamSet()
    init_linear(p, "fc1", INPUT_DIM, HIDDEN_DIM, rng)
    init_linear(p, "fc2", HIDDEN_DIM, n_out, rng, zero_weights=zero_output)
    return p


def init_gate_linear(n_inputs) -> ParamSet:
    """Gate projection [912 -> n_inputs], zero-initialized (uniform mix)."""
    p = ParamSet()
    p.add("w", np.zeros((INPUT_DIM, n_inputs)))
    p.add("b", np.zeros(n_inputs))
    return p


def _as_batch(x):
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.data.ndim == 1:
        return t.reshape(1, -1), True
    return t, False


def encoder_forward(params, x, train_mode=False, dropout_stream=None,
                    dropout_rate=0.2, collect=None):
    """Run the encoder on (B, 912) or (912,) input; returns same leading shape.

    `collect`, when a dict, receives the per-head attention weights under
    key "attn" with shape (B, heads, tokens, tokens).
    """
    xt, squeeze = _as_batch(x)
    if xt.data.shape[-1] != INPUT_DIM:
        raise ValueError(f"expected input of length {INPUT_DIM}, "
                         f"got {xt.data.shape[-1]}")
    b = xt.data.shape[0]
    tok = xt.reshape(b, N_TOKENS, TOKEN_DIM) + Tensor(_PE)

    def proj(name, t):
        return t @ params[f"{name}.w"] + params[f"{name}.b"]

    def split_heads(t):
        return t.reshape(b, N_TOKENS, N_HEADS, HEAD_DIM).transpose((0, 2, 1, 3))

    q = split_heads(proj("attn.q", tok))
    k = split_heads(proj("attn.k", tok))
    v = split_heads(proj("attn.v", tok))
    scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(HEAD_DIM))
    weights = softmax(scores, axis=-1)
    if collect is not None:
        collect["attn"] = weights.data.copy()
    ctx = (weights @ v).transpose((0, 2, 1, 3)).reshape(b, N_TOKENS, TOKEN_DIM)
    attn_out = proj("attn.o", ctx)
    attn_out = _maybe_dropout(attn_out, train_mode, dropout_stream, dropout_rate)
    h = layer_norm(tok + attn_out, params["ln1.gamma"], params["ln1.beta"])

    ff = relu(h @ params["ff.1.w"] + params["ff.1.b"])
    ff = ff @ params["ff.2.w"] + params["ff.2.b"]
    ff = _maybe_dropout(ff, train_mode, dropout_stream, dropout_rate)
    out = layer_norm(h + ff, params["ln2.gamma"], params["ln2.beta"])
    out = out.reshape(b, INPUT_DIM)
    return out.reshape(INPUT_DIM) if squeeze else out


def _maybe_dropout(t, train_mode, stream, rate):
    if not train_mode or rate <= 0.0:
        return t
    if stream is None:
        raise ValueError("train-mode dropout requires a DropoutStream")
    keep = 1.0 - rate
    return dropout(t, stream.mask(t.data.shape, keep), keep)


def head_forward(params, x, train_mode=False, dropout_stream=None,
                 dropout_rate=0.2):
    """Two-layer head: linear -> ReLU -> dropout -> linear (logits)."""
    xt, squeeze = _as_batch(x)
    h = relu(xt @ params["fc1.w"] + params["fc1.b"])
    h = _maybe_dropout(h, train_mode, dropout_stream, dropout_rate)
    logits = h @ params["fc2.w"] + params["fc2.b"]
    return logits.reshape(logits.data.shape[-1]) if squeeze else logits


def backward(loss, *param_sets):
    """Gradients of a scalar loss for every trainable parameter reached.

    Returns one dict per given ParamSet, keyed by parameter name; frozen or
    unreached parameters have no entry.
    """
    if not isinstance(loss, Tensor) or not loss.requires_grad:
        raise ValueError("loss does not carry a computation graph")
    for ps in param_sets:
        ps.zero_grad()
    loss.backward()
    out = []
    for ps in param_sets:
        out.append({name: t.grad for name, t in ps.items() if t.grad is not None})
    return out[0] if len(out) == 1 else tuple(out)


def eval_forward(fn, *args, **kwargs):
    with no_grad():
        result = fn(*args, **kwargs)
    return result.data if isinstance(result, Tensor) else result


__all__ = [
    "INPUT_DIM", "N_TOKENS", "TOKEN_DIM", "N_HEADS", "HEAD_DIM", "FF_DIM",
    "HIDDEN_DIM", "positional_encoding", "init_encoder", "init_head",
    "init_gate_linear", "encoder_forward", "head_forward", "backward",
    "eval_forward", "cross_entropy", "softmax", "relu",
]
