"""A small causal self-attention language model in numpy.

Pre-norm transformer blocks, learned positional embeddings, and a tied
input/output embedding: the logit for token v at step t is the inner product
of the final hidden state h_t with embedding row W_v.  The backward pass is
hand-written and consumes an externally supplied dL/dlogits, so the training
objectives stay in full control of the gradient they inject.

Float32 throughout; deterministic given the config seed.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import ConfigError, ContractError, FormatError, RangeError, TrainingError

CHECKPOINT_MAGIC = b"CTLM"
CHECKPOINT_VERSION = 1

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715
_LN_EPS = 1e-5


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 512
    max_positions: int = 256
    dropout: float = 0.0
    seed: int = 0

    def validate(self):
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if min(self.d_model, self.n_layers, self.n_heads, self.d_ff, self.max_positions) < 1:
            raise ConfigError("model dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        return self


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every tensor in a model with this config."""
    v, d, f = cfg.vocab_size, cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (cfg.max_positions, d),
        "ln_f.g": (d,),
        "ln_f.b": (d,),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update(
            {
                p + "ln1.g": (d,),
                p + "ln1.b": (d,),
                p + "wq": (d, d),
                p + "bq": (d,),
                p + "wk": (d, d),
                p + "bk": (d,),
                p + "wv": (d, d),
                p + "bv": (d,),
                p + "wo": (d, d),
                p + "bo": (d,),
                p + "ln2.g": (d,),
                p + "ln2.b": (d,),
                p + "w1": (d, f),
                p + "b1": (f,),
                p + "w2": (f, d),
                p + "b2": (d,),
            }
        )
    return shapes


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(repr=False)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())


def init_state(cfg: ModelConfig) -> ModelState:
    """Deterministic scaled-normal initialisation from the config seed."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    resid_scale = 1.0 / math.sqrt(2.0 * cfg.n_layers)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith((".g",)):
            params[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith((".b", "bq", "bk", "bv", "bo", "b1", "b2")):
            params[name] = np.zeros(shape, dtype=np.float32)
        elif name == "pos_emb":
            params[name] = rng.normal(0.0, 0.01, size=shape).astype(np.float32)
        else:
            std = 0.02 * (resid_scale if name.endswith(("wo", "w2")) else 1.0)
            params[name] = rng.normal(0.0, std, size=shape).astype(np.float32)
    return ModelState(config=cfg, params=params)


def zeros_state(cfg: ModelConfig) -> ModelState:
    """All-zero parameters (layer-norm gains included); handy in tests."""
    cfg.validate()
    return ModelState(
        config=cfg,
        params={k: np.zeros(s, dtype=np.float32) for k, s in param_shapes(cfg).items()},
    )


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    d = x - mu
    rstd = 1.0 / np.sqrt((d * d).mean(axis=-1, keepdims=True) + _LN_EPS)
    xhat = d * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_backward(dy, g, ln_cache):
    xhat, rstd = ln_cache
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _gelu(x):
    u = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def _gelu_backward(dy, x):
    u = _GELU_C * (x + _GELU_A * x * x * x)
    th = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, k = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * k)


def _validate_ids(cfg: ModelConfig, ids: np.ndarray):
    if ids.ndim != 2:
        raise ContractError(f"ids must be [batch, time], got shape {ids.shape}")
    if ids.shape[1] > cfg.max_positions:
        raise RangeError(
            f"sequence length {ids.shape[1]} exceeds max_positions {cfg.max_positions}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise RangeError("token ids outside vocabulary")


def forward(state: ModelState, ids, collect_cache: bool = False, rng=None):
    """Run the model over [batch, time] token ids.

    Returns ``(hidden, logits)`` - the final-layer hidden states and the
    tied-embedding logits - or ``(hidden, logits, cache)`` when
    ``collect_cache`` is set; the cache feeds :func:`backward`.  ``rng``
    enables dropout (training only).
    """
    cfg = state.config
    ids = np.asarray(ids)
    _validate_ids(cfg, ids)
    p = state.params
    b, t = ids.shape
    kdim = cfg.d_model // cfg.n_heads

    drop_p = cfg.dropout if rng is not None else 0.0

    def dropout_mask(shape):
        if drop_p == 0.0:
            return None
        return (rng.random(shape) >= drop_p).astype(np.float32) / (1.0 - drop_p)

    x = p["tok_emb"][ids] + p["pos_emb"][:t]
    emb_mask = dropout_mask(x.shape)
    if emb_mask is not None:
        x = x * emb_mask

    causal = np.triu(np.full((t, t), -np.inf, dtype=np.float32), k=1)
    layer_caches = []
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        x_in = x
        a, ln1c = _layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q = _split_heads(a @ p[pre + "wq"] + p[pre + "bq"], cfg.n_heads)
        k = _split_heads(a @ p[pre + "wk"] + p[pre + "bk"], cfg.n_heads)
        v = _split_heads(a @ p[pre + "wv"] + p[pre + "bv"], cfg.n_heads)
        scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(kdim) + causal
        scores -= scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        o = _merge_heads(w @ v)
        att = o @ p[pre + "wo"] + p[pre + "bo"]
        att_mask = dropout_mask(att.shape)
        if att_mask is not None:
            att = att * att_mask
        x = x_in + att

        x_mid = x
        m, ln2c = _layernorm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        f1 = m @ p[pre + "w1"] + p[pre + "b1"]
        gact = _gelu(f1)
        f2 = gact @ p[pre + "w2"] + p[pre + "b2"]
        mlp_mask = dropout_mask(f2.shape)
        if mlp_mask is not None:
            f2 = f2 * mlp_mask
        x = x_mid + f2

        if collect_cache:
            layer_caches.append(
                dict(a=a, ln1c=ln1c, q=q, k=k, v=v, w=w, o=o, att_mask=att_mask,
                     m=m, ln2c=ln2c, f1=f1, gact=gact, mlp_mask=mlp_mask)
            )

    h, lnfc = _layernorm(x, p["ln_f.g"], p["ln_f.b"])
    logits = h @ p["tok_emb"].T

    if not collect_cache:
        return h, logits
    cache = dict(ids=ids, h=h, lnfc=lnfc, layers=layer_caches, emb_mask=emb_mask,
                 logits_shape=logits.shape)
    return h, logits, cache


def backward(state: ModelState, cache, dlogits) -> dict[str, np.ndarray]:
    """Backpropagate an externally supplied dL/dlogits to every parameter.

    ``dlogits`` must already be zero at padded positions; causality then
    guarantees those positions contribute nothing anywhere.
    """
    cfg = state.config
    p = state.params
    dz = np.asarray(dlogits, dtype=np.float32)
    if dz.shape != cache["logits_shape"]:
        raise ContractError(
            f"dlogits shape {dz.shape} does not match forward logits {cache['logits_shape']}"
        )
    ids = cache["ids"]
    b, t = ids.shape
    d = cfg.d_model
    kdim = d // cfg.n_heads
    n = b * t

    grads = {name: np.zeros_like(arr) for name, arr in p.items()}

    h = cache["h"]
    grads["tok_emb"] += dz.reshape(n, -1).T @ h.reshape(n, d)
    dh = dz @ p["tok_emb"]
    dx, grads["ln_f.g"], grads["ln_f.b"] = _layernorm_backward(dh, p["ln_f.g"], cache["lnfc"])

    for i in reversed(range(cfg.n_layers)):
        pre = f"layers.{i}."
        lc = cache["layers"][i]

        df2 = dx if lc["mlp_mask"] is None else dx * lc["mlp_mask"]
        grads[pre + "w2"] += lc["gact"].reshape(n, -1).T @ df2.reshape(n, d)
        grads[pre + "b2"] += df2.sum(axis=(0, 1))
        dgact = df2 @ p[pre + "w2"].T
        df1 = _gelu_backward(dgact, lc["f1"])
        grads[pre + "w1"] += lc["m"].reshape(n, d).T @ df1.reshape(n, -1)
        grads[pre + "b1"] += df1.sum(axis=(0, 1))
        dm = df1 @ p[pre + "w1"].T
        dx_mid, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = _layernorm_backward(
            dm, p[pre + "ln2.g"], lc["ln2c"]
        )
        dx = dx + dx_mid

        datt = dx if lc["att_mask"] is None else dx * lc["att_mask"]
        grads[pre + "wo"] += lc["o"].reshape(n, d).T @ datt.reshape(n, d)
        grads[pre + "bo"] += datt.sum(axis=(0, 1))
        do = _split_heads(datt @ p[pre + "wo"].T, cfg.n_heads)

        dw = do @ lc["v"].transpose(0, 1, 3, 2)
        dv = lc["w"].transpose(0, 1, 3, 2) @ do
        ds = lc["w"] * (dw - (dw * lc["w"]).sum(axis=-1, keepdims=True))
        ds /= math.sqrt(kdim)
        dq = ds @ lc["k"]
        dk = ds.transpose(0, 1, 3, 2) @ lc["q"]

        da = np.zeros_like(lc["a"])
        for wname, dmat in (("wq", dq), ("wk", dk), ("wv", dv)):
            dmerged = _merge_heads(dmat)
            grads[pre + wname] += lc["a"].reshape(n, d).T @ dmerged.reshape(n, d)
            grads[pre + "b" + wname[1]] += dmerged.sum(axis=(0, 1))
            da += dmerged @ p[pre + wname].T

        dx_in, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = _layernorm_backward(
            da, p[pre + "ln1.g"], lc["ln1c"]
        )
        dx = dx + dx_in

    if cache["emb_mask"] is not None:
        dx = dx * cache["emb_mask"]
    grads["pos_emb"][:t] += dx.sum(axis=0)
    np.add.at(grads["tok_emb"], ids.reshape(-1), dx.reshape(n, d))
    return grads


# ---------------------------------------------------------------------------
# Adam optimiser


@dataclass
class AdamConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    warmup_steps: int = 0
    total_steps: int = 0
    clip_norm: float = 0.0

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must be in [0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        return self


class AdamState:
    """First/second moment buffers, allocated on first use."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def global_grad_norm(grads) -> float:
    return math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))


def clip_grads_(grads, max_norm: float) -> float:
    """Scale grads in place so their global norm is at most max_norm."""
    norm = global_grad_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = np.float32(max_norm / norm)
        for g in grads.values():
            g *= scale
    return norm


def adam_step(state: ModelState, opt: AdamState, grads, cfg: AdamConfig, step_index: int):
    """One Adam update with linear warmup then a constant rate. In place."""
    cfg.validate()
    if step_index < 1:
        raise ConfigError(f"step_index must be >= 1, got {step_index}")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in {name!r} at step {step_index}")

    lr = cfg.learning_rate
    if cfg.warmup_steps > 0:
        lr *= min(1.0, step_index / cfg.warmup_steps)
    c1 = 1.0 - cfg.beta1**step_index
    c2 = 1.0 - cfg.beta2**step_index

    for name, g in grads.items():
        if name not in opt.m:
            opt.m[name] = np.zeros_like(g)
            opt.v[name] = np.zeros_like(g)
        m, v = opt.m[name], opt.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        state.params[name] -= (lr / c1) * m / (np.sqrt(v / c2) + cfg.epsilon)


# ---------------------------------------------------------------------------
# Checkpoint serialisation


def save_checkpoint(state: ModelState, path):
    """Binary format: magic, version, length-prefixed config JSON, then named
    tensors as (name length, name, rank, dims, row-major little-endian f32)."""
    cfg_json = json.dumps(asdict(state.config), sort_keys=True).encode("utf-8")
    names = sorted(state.params)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(cfg_json)))
        f.write(cfg_json)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            data = np.ascontiguousarray(state.params[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("checkpoint truncated")
    return buf


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != CHECKPOINT_MAGIC:
            raise FormatError("bad checkpoint magic")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(f, 4))
        try:
            cfg = ModelConfig(**json.loads(_read_exact(f, cfg_len))).validate()
        except FormatError:
            raise
        except (ValueError, TypeError) as e:
            raise FormatError(f"unreadable checkpoint config: {e}") from e
        expected = param_shapes(cfg)
        (n_tensors,) = struct.unpack("<I", _read_exact(f, 4))
        if n_tensors != len(expected):
            raise FormatError(
                f"checkpoint has {n_tensors} tensors, config implies {len(expected)}"
            )
        params = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
            if name not in expected:
                raise FormatError(f"unexpected tensor {name!r} in checkpoint")
            if dims != expected[name]:
                raise FormatError(
                    f"tensor {name!r} has shape {dims}, config implies {expected[name]}"
                )
            count = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4").reshape(dims)
            params[name] = np.ascontiguousarray(arr, dtype=np.float32)
        if f.read(1):
            raise FormatError("trailing bytes after last tensor")
    return ModelState(config=cfg, params=params)


# ---------------------------------------------------------------------------
# Incremental forward for decoding


class DecodeSession:
    """Grow-one-token forward pass over cached keys/values.

    Exact reimplementation of :func:`forward` for generation: prefill the
    prompt once, then each :meth:`step` appends one position per sequence.
    """

    def __init__(self, state: ModelState, prefix_ids):
        cfg = state.config
        ids = np.asarray(prefix_ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        _validate_ids(cfg, ids)
        if ids.shape[1] < 1:
            raise ContractError("prefix must be non-empty")
        self.state = state
        self.batch = ids.shape[0]
        kdim = cfg.d_model // cfg.n_heads
        self.k = np.zeros((cfg.n_layers, self.batch, cfg.n_heads, cfg.max_positions, kdim),
                          dtype=np.float32)
        self.v = np.zeros_like(self.k)
        self.length = 0
        self.last_logits = self._run(ids)

    def _run(self, ids) -> np.ndarray:
        cfg = self.state.config
        p = self.state.params
        b, t = ids.shape
        start = self.length
        if start + t > cfg.max_positions:
            raise RangeError(
                f"decode length {start + t} exceeds max_positions {cfg.max_positions}"
            )
        kdim = cfg.d_model // cfg.n_heads

        x = p["tok_emb"][ids] + p["pos_emb"][start : start + t]
        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            a, _ = _layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = _split_heads(a @ p[pre + "wq"] + p[pre + "bq"], cfg.n_heads)
            self.k[i][:, :, start : start + t] = _split_heads(
                a @ p[pre + "wk"] + p[pre + "bk"], cfg.n_heads
            )
            self.v[i][:, :, start : start + t] = _split_heads(
                a @ p[pre + "wv"] + p[pre + "bv"], cfg.n_heads
            )
            keys = self.k[i][:, :, : start + t]
            vals = self.v[i][:, :, : start + t]
            scores = q @ keys.transpose(0, 1, 3, 2) / math.sqrt(kdim)
            if t > 1:
                causal = np.triu(np.full((t, start + t), -np.inf, dtype=np.float32),
                                 k=start + 1)
                scores = scores + causal
            scores -= scores.max(axis=-1, keepdims=True)
            w = np.exp(scores)
            w /= w.sum(axis=-1, keepdims=True)
            x = x + _merge_heads(w @ vals) @ p[pre + "wo"] + p[pre + "bo"]
            m, _ = _layernorm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            x = x + _gelu(m @ p[pre + "w1"] + p[pre + "b1"]) @ p[pre + "w2"] + p[pre + "b2"]

        h, _ = _layernorm(x, p["ln_f.g"], p["ln_f.b"])
        self.length = start + t
        return h[:, -1, :] @ p["tok_emb"].T

    def step(self, next_ids) -> np.ndarray:
        """Append one token per sequence; returns next-token logits [batch, vocab]."""
        ids = np.asarray(next_ids).reshape(self.batch, 1)
        _validate_ids(self.state.config, ids)
        self.last_logits = self._run(ids)
        return self.last_logits

    def reorder(self, perm):
        """Permute sequences along the batch axis (beam-search bookkeeping)."""
        self.k = self.k[:, perm]
        self.v = self.v[:, perm]
        self.last_logits = self.last_logits[perm]
