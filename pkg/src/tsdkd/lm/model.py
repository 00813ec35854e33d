"""A tiny pre-norm decoder-only transformer with a hand-written backward pass.

Layout per block::

    x = x + Attn(LN1(x))
    x = x + MLP(LN2(x))        MLP = W2 . gelu(W1 . h)

followed by a final LayerNorm and an output projection. Everything is float64
and evaluated in a fixed order, so results depend only on parameters and
input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInputError

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    context: int = 96
    n_layers: int = 1
    d_model: int = 32
    n_heads: int = 2

    def __post_init__(self):
        for name in ("vocab_size", "context", "n_layers", "d_model", "n_heads"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise InvalidInputError("d_model must be divisible by n_heads")


@dataclass
class TinyLMParams:
    dims: ModelDims
    arrays: dict[str, np.ndarray]

    def copy(self) -> "TinyLMParams":
        return TinyLMParams(self.dims, {k: v.copy() for k, v in self.arrays.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays.values())


def param_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    V, N, d = dims.vocab_size, dims.context, dims.d_model
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (V, d), "pos_emb": (N, d)}
    for i in range(dims.n_layers):
        p = f"h{i}."
        shapes.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "w_qkv": (d, 3 * d), p + "b_qkv": (3 * d,),
            p + "w_o": (d, d), p + "b_o": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "w_fc": (d, 4 * d), p + "b_fc": (4 * d,),
            p + "w_proj": (4 * d, d), p + "b_proj": (d,),
        })
    shapes.update({"lnf_g": (d,), "lnf_b": (d,), "w_out": (d, V), "b_out": (V,)})
    return shapes


def init_params(dims: ModelDims, seed: int = 0) -> TinyLMParams:
    """Scaled Gaussian weights; zero biases and zero output projection.

    With a zero output projection every next-token distribution is uniform.
    """
    rng = np.random.default_rng(seed)
    resid_scale = 1.0 / np.sqrt(2.0 * dims.n_layers)
    arrays = {}
    for name, shape in param_shapes(dims).items():
        leaf = name.split(".")[-1]
        if leaf in ("tok_emb", "pos_emb"):
            arr = rng.normal(0.0, 0.1, shape)
        elif leaf.endswith("_g"):
            arr = np.ones(shape)
        elif leaf.startswith("w_") and leaf != "w_out":
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
            if leaf in ("w_o", "w_proj"):
                arr *= resid_scale
        else:
            arr = np.zeros(shape)
        arrays[name] = arr
    return TinyLMParams(dims, arrays)


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_backward(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def _gelu_backward(du_out, u, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * dt)


def _check_tokens(params: TinyLMParams, tokens) -> np.ndarray:
    tok = np.asarray(tokens, dtype=np.int64)
    if tok.ndim == 1:
        tok = tok[None, :]
    if tok.ndim != 2 or tok.shape[1] == 0:
        raise InvalidInputError("tokens must be a non-empty (B, T) array")
    if tok.shape[1] > params.dims.context:
        raise InvalidInputError(f"sequence length {tok.shape[1]} exceeds context {params.dims.context}")
    if tok.min() < 0 or tok.max() >= params.dims.vocab_size:
        raise InvalidInputError("token id outside vocabulary")
    return tok


def forward(params: TinyLMParams, tokens, return_cache: bool = False):
    """Logits for every position of ``tokens``.

    ``tokens`` is ``(T,)`` or ``(B, T)``; the result is ``(B, T, V)`` (a
    leading batch axis is always present). Position ``t`` sees tokens
    ``0..t`` only.
    """
    tok = _check_tokens(params, tokens)
    P = params.arrays
    dims = params.dims
    B, T = tok.shape
    H = dims.n_heads
    d = dims.d_model
    dh = d // H
    scale = 1.0 / np.sqrt(dh)
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)

    x = P["tok_emb"][tok] + P["pos_emb"][:T]
    layers = []
    for i in range(dims.n_layers):
        p = f"h{i}."
        h1, ln1 = _layernorm(x, P[p + "ln1_g"], P[p + "ln1_b"])
        qkv = h1 @ P[p + "w_qkv"] + P[p + "b_qkv"]
        q, k, v = (qkv[..., j * d:(j + 1) * d].reshape(B, T, H, dh).transpose(0, 2, 1, 3)
                   for j in range(3))
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        s = np.where(causal, -np.inf, s)
        s = s - s.max(axis=-1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=-1, keepdims=True)
        o = (a @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        x = x + o @ P[p + "w_o"] + P[p + "b_o"]
        h2, ln2 = _layernorm(x, P[p + "ln2_g"], P[p + "ln2_b"])
        u = h2 @ P[p + "w_fc"] + P[p + "b_fc"]
        f, t = _gelu(u)
        x = x + f @ P[p + "w_proj"] + P[p + "b_proj"]
        layers.append((h1, ln1, q, k, v, a, o, h2, ln2, u, f, t))
    hf, lnf = _layernorm(x, P["lnf_g"], P["lnf_b"])
    logits = hf @ P["w_out"] + P["b_out"]
    if not return_cache:
        return logits
    return logits, (tok, layers, hf, lnf)


def forward_incremental(params: TinyLMParams, tokens, kv=None):
    """Logits for ``tokens`` appended after the positions already held in ``kv``.

    ``kv`` is the per-layer list of (keys, values) returned by a previous
    call, or None to start fresh. Returns ``(logits, kv)``. Used for
    decoding; agrees with ``forward`` up to floating-point reassociation.
    """
    tok = np.asarray(tokens, dtype=np.int64)
    P = params.arrays
    dims = params.dims
    B, n = tok.shape
    start = 0 if kv is None else kv[0][0].shape[2]
    if start + n > dims.context:
        raise InvalidInputError(f"sequence length {start + n} exceeds context {dims.context}")
    H = dims.n_heads
    d = dims.d_model
    dh = d // H
    scale = 1.0 / np.sqrt(dh)
    causal = np.arange(start + n)[None, :] > (start + np.arange(n))[:, None]

    x = P["tok_emb"][tok] + P["pos_emb"][start:start + n]
    new_kv = []
    for i in range(dims.n_layers):
        p = f"h{i}."
        h1, _ = _layernorm(x, P[p + "ln1_g"], P[p + "ln1_b"])
        qkv = h1 @ P[p + "w_qkv"] + P[p + "b_qkv"]
        q, k, v = (qkv[..., j * d:(j + 1) * d].reshape(B, n, H, dh).transpose(0, 2, 1, 3)
                   for j in range(3))
        if kv is not None:
            k = np.concatenate([kv[i][0], k], axis=2)
            v = np.concatenate([kv[i][1], v], axis=2)
        new_kv.append((k, v))
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        s = np.where(causal, -np.inf, s)
        s = s - s.max(axis=-1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=-1, keepdims=True)
        o = (a @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
        x = x + o @ P[p + "w_o"] + P[p + "b_o"]
        h2, _ = _layernorm(x, P[p + "ln2_g"], P[p + "ln2_b"])
        f, _ = _gelu(h2 @ P[p + "w_fc"] + P[p + "b_fc"])
        x = x + f @ P[p + "w_proj"] + P[p + "b_proj"]
    hf, _ = _layernorm(x, P["lnf_g"], P["lnf_b"])
    return hf @ P["w_out"] + P["b_out"], new_kv


def backward(params: TinyLMParams, cache, dlogits) -> dict[str, np.ndarray]:
    """Gradients of sum_t <dlogits_t, logits_t> with respect to every parameter."""
    tok, layers, hf, lnf = cache
    P = params.arrays
    dims = params.dims
    B, T = tok.shape
    H = dims.n_heads
    d = dims.d_model
    dh = d // H
    scale = 1.0 / np.sqrt(dh)
    dl = np.asarray(dlogits, dtype=float)
    if dl.ndim == 2:
        dl = dl[None]
    if dl.shape != (B, T, dims.vocab_size):
        raise InvalidInputError(f"gradient shape {dl.shape} != logits shape {(B, T, dims.vocab_size)}")

    grads: dict[str, np.ndarray] = {}
    flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731

    grads["w_out"] = flat(hf).T @ flat(dl)
    grads["b_out"] = flat(dl).sum(axis=0)
    dhf = dl @ P["w_out"].T
    dx, grads["lnf_g"], grads["lnf_b"] = _layernorm_backward(dhf, P["lnf_g"], lnf)

    for i in reversed(range(dims.n_layers)):
        p = f"h{i}."
        h1, ln1, q, k, v, a, o, h2, ln2, u, f, t = layers[i]
        # MLP branch
        grads[p + "w_proj"] = flat(f).T @ flat(dx)
        grads[p + "b_proj"] = flat(dx).sum(axis=0)
        df = dx @ P[p + "w_proj"].T
        du = _gelu_backward(df, u, t)
        grads[p + "w_fc"] = flat(h2).T @ flat(du)
        grads[p + "b_fc"] = flat(du).sum(axis=0)
        dh2 = du @ P[p + "w_fc"].T
        dxn, grads[p + "ln2_g"], grads[p + "ln2_b"] = _layernorm_backward(dh2, P[p + "ln2_g"], ln2)
        dx = dx + dxn
        # attention branch
        grads[p + "w_o"] = flat(o).T @ flat(dx)
        grads[p + "b_o"] = flat(dx).sum(axis=0)
        do = (dx @ P[p + "w_o"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate(
            [g.transpose(0, 2, 1, 3).reshape(B, T, d) for g in (dq, dk, dv)], axis=-1)
        grads[p + "w_qkv"] = flat(h1).T @ flat(dqkv)
        grads[p + "b_qkv"] = flat(dqkv).sum(axis=0)
        dh1 = dqkv @ P[p + "w_qkv"].T
        dxn, grads[p + "ln1_g"], grads[p + "ln1_b"] = _layernorm_backward(dh1, P[p + "ln1_g"], ln1)
        dx = dx + dxn

    grads["pos_emb"] = np.zeros_like(P["pos_emb"])
    grads["pos_emb"][:T] = dx.sum(axis=0)
    dtok = np.zeros_like(P["tok_emb"])
    np.add.at(dtok, tok.reshape(-1), flat(dx))
    grads["tok_emb"] = dtok
    return {name: grads[name] for name in P}
