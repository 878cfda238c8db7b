"""Trainable token encoder: embedding lookup -> BiLSTM -> emission projection.

The encoder is written directly in numpy with a hand-derived backward pass so
that training is deterministic and bit-reproducible on CPU.  ``encode`` is a
pure function of (params, batch); ``backprop`` re-runs the forward pass with
caching and accumulates exact reverse-mode gradients for every parameter.

The CRF transition table lives in :class:`ModelParams` next to the projection;
its gradient arrives from the lattice layer and passes through unchanged.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

UNK_ID = 0
UNK_TOKEN = "<unk>"

CHECKPOINT_MAGIC = b"CRFDIST\x01"
CHECKPOINT_VERSION = 1

# gate layout inside the fused 4h axis
_GATES = ("i", "f", "g", "o")


class Vocab:
    """Lowercased surface-form vocabulary with id 0 reserved for unknowns."""

    def __init__(self, tokens: Sequence[str]):
        if not tokens or tokens[0] != UNK_TOKEN:
            raise ValueError("vocab must start with the reserved unknown token")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocab tokens must be unique")
        self.tokens = tuple(tokens)
        self._index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]]) -> "Vocab":
        seen = sorted({tok.lower() for sent in sentences for tok in sent} - {UNK_TOKEN})
        return cls((UNK_TOKEN, *seen))

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self._index.get(t.lower(), UNK_ID) for t in tokens], dtype=np.intp)


@dataclass
class TokenBatch:
    """A group of sentences encoded as token ids, with language tags."""

    sentences: list[np.ndarray]
    languages: list[str]
    lengths: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.sentences) != len(self.languages):
            raise ValueError("one language tag per sentence required")
        if not self.lengths:
            self.lengths = [len(s) for s in self.sentences]
        if any(n < 1 for n in self.lengths):
            raise ValueError("sentences must be non-empty")


@dataclass
class ModelParams:
    """Everything trained by SGD; arrays are float64 and updated in place."""

    embedding: np.ndarray        # (vocab, d_emb)
    fwd_wx: np.ndarray           # (d_emb, 4h)
    fwd_wh: np.ndarray           # (h, 4h)
    fwd_b: np.ndarray            # (4h,)
    bwd_wx: np.ndarray
    bwd_wh: np.ndarray
    bwd_b: np.ndarray
    projection: np.ndarray       # (2h, V)
    transitions: np.ndarray      # (V+1, V)
    rng_seed: int

    ARRAY_FIELDS = ("embedding", "fwd_wx", "fwd_wh", "fwd_b",
                    "bwd_wx", "bwd_wh", "bwd_b", "projection", "transitions")

    @property
    def hidden(self) -> int:
        return self.fwd_wh.shape[0]

    @property
    def num_labels(self) -> int:
        return self.projection.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.ARRAY_FIELDS}

    def copy(self) -> "ModelParams":
        return ModelParams(**{n: a.copy() for n, a in self.arrays().items()},
                           rng_seed=self.rng_seed)

    def num_parameters(self) -> int:
        return sum(a.size for a in self.arrays().values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def init_params(vocab_size: int, d_emb: int, hidden: int, num_labels: int,
                seed: int) -> ModelParams:
    """Uniform(-0.1, 0.1) initialization, forget-gate bias set to 1."""
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-0.1, 0.1, size=shape)

    params = ModelParams(
        embedding=u(vocab_size, d_emb),
        fwd_wx=u(d_emb, 4 * hidden), fwd_wh=u(hidden, 4 * hidden), fwd_b=u(4 * hidden),
        bwd_wx=u(d_emb, 4 * hidden), bwd_wh=u(hidden, 4 * hidden), bwd_b=u(4 * hidden),
        projection=u(2 * hidden, num_labels),
        transitions=u(num_labels + 1, num_labels),
        rng_seed=seed,
    )
    params.fwd_b[hidden:2 * hidden] = 1.0
    params.bwd_b[hidden:2 * hidden] = 1.0
    return params


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.arrays().items()}


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _dropout_mask(rate: float, seed: int, shape) -> np.ndarray:
    keep = np.random.default_rng(seed).random(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def _lstm_forward(x, wx, wh, b):
    """Run one direction over (n, d_emb) inputs; returns hidden states + cache."""
    n = x.shape[0]
    h_dim = wh.shape[0]
    pre = x @ wx + b
    hs = np.zeros((n + 1, h_dim))
    cs = np.zeros((n + 1, h_dim))
    gates = np.zeros((n, 4 * h_dim))
    for t in range(n):
        z = pre[t] + hs[t] @ wh
        i = _sigmoid(z[:h_dim])
        f = _sigmoid(z[h_dim:2 * h_dim])
        g = np.tanh(z[2 * h_dim:3 * h_dim])
        o = _sigmoid(z[3 * h_dim:])
        cs[t + 1] = f * cs[t] + i * g
        hs[t + 1] = o * np.tanh(cs[t + 1])
        gates[t] = np.concatenate([i, f, g, o])
    return hs, cs, gates


def _lstm_backward(dh_out, x, hs, cs, gates, wx, wh):
    """Gradients for one direction given per-step hidden-state gradients."""
    n, h_dim = dh_out.shape[0], wh.shape[0]
    dwx = np.zeros_like(wx)
    dwh = np.zeros_like(wh)
    db = np.zeros(4 * h_dim)
    dx = np.zeros_like(x)
    dh_next = np.zeros(h_dim)
    dc_next = np.zeros(h_dim)
    for t in range(n - 1, -1, -1):
        i, f = gates[t, :h_dim], gates[t, h_dim:2 * h_dim]
        g, o = gates[t, 2 * h_dim:3 * h_dim], gates[t, 3 * h_dim:]
        tc = np.tanh(cs[t + 1])
        dh = dh_out[t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        di = dc * g
        df = dc * cs[t]
        dg = dc * i
        dc_next = dc * f
        dz = np.concatenate([
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            dg * (1.0 - g * g),
            do * o * (1.0 - o),
        ])
        dwx += np.outer(x[t], dz)
        dwh += np.outer(hs[t], dz)
        db += dz
        dx[t] = dz @ wx.T
        dh_next = dz @ wh.T
    return dwx, dwh, db, dx


def _sentence_forward(params: ModelParams, token_ids: np.ndarray,
                      dropout_rate: float, dropout_seed: int | None):
    ids = np.where((token_ids >= 0) & (token_ids < params.embedding.shape[0]),
                   token_ids, UNK_ID)
    x = params.embedding[ids]
    mask = None
    if dropout_rate > 0.0:
        mask = _dropout_mask(dropout_rate, dropout_seed, x.shape)
        x = x * mask
    f_hs, f_cs, f_gates = _lstm_forward(x, params.fwd_wx, params.fwd_wh, params.fwd_b)
    xr = x[::-1]
    b_hs, b_cs, b_gates = _lstm_forward(xr, params.bwd_wx, params.bwd_wh, params.bwd_b)
    # contextual representation: forward state at t, backward state at t
    r = np.concatenate([f_hs[1:], b_hs[1:][::-1]], axis=1)
    emissions = r @ params.projection
    cache = (ids, x, mask, f_hs, f_cs, f_gates, xr, b_hs, b_cs, b_gates, r)
    return emissions, cache


def encode(params: ModelParams, batch: TokenBatch, *,
           dropout_rate: float = 0.0, dropout_seed: int | None = None) -> list[np.ndarray]:
    """Emission score matrices (n_i, V), one per sentence, in batch order.

    Out-of-vocabulary ids map to the reserved unknown id.  With a dropout rate
    the mask is derived deterministically from ``dropout_seed`` and the
    sentence's position in the batch.
    """
    if not batch.sentences:
        raise ValueError("batch must contain at least one sentence")
    out = []
    for idx, ids in enumerate(batch.sentences):
        seed = None if dropout_seed is None else dropout_seed + idx
        emissions, _ = _sentence_forward(params, ids, dropout_rate, seed)
        out.append(emissions)
    return out


def backprop(params: ModelParams, batch: TokenBatch,
             emission_grads: Sequence[np.ndarray],
             transition_grads: np.ndarray | None = None, *,
             dropout_rate: float = 0.0, dropout_seed: int | None = None) -> dict[str, np.ndarray]:
    """Exact parameter gradients given upstream emission/transition gradients."""
    if len(emission_grads) != len(batch.sentences):
        raise ValueError("one emission gradient per sentence required")
    grads = zero_grads(params)
    if transition_grads is not None:
        if transition_grads.shape != params.transitions.shape:
            raise ValueError("transition gradient shape mismatch")
        grads["transitions"] += transition_grads

    h_dim = params.hidden
    for idx, (ids_raw, demit) in enumerate(zip(batch.sentences, emission_grads)):
        seed = None if dropout_seed is None else dropout_seed + idx
        emissions, cache = _sentence_forward(params, ids_raw, dropout_rate, seed)
        ids, x, mask, f_hs, f_cs, f_gates, xr, b_hs, b_cs, b_gates, r = cache
        demit = np.asarray(demit, dtype=np.float64)
        if demit.shape != emissions.shape:
            raise ValueError(f"emission gradient shape {demit.shape} != {emissions.shape}")

        grads["projection"] += r.T @ demit
        dr = demit @ params.projection.T
        df_h = dr[:, :h_dim]
        db_h = dr[:, h_dim:][::-1]

        dwx, dwh, db, dxf = _lstm_backward(df_h, x, f_hs, f_cs, f_gates,
                                           params.fwd_wx, params.fwd_wh)
        grads["fwd_wx"] += dwx
        grads["fwd_wh"] += dwh
        grads["fwd_b"] += db
        dwx, dwh, db, dxb = _lstm_backward(db_h, xr, b_hs, b_cs, b_gates,
                                           params.bwd_wx, params.bwd_wh)
        grads["bwd_wx"] += dwx
        grads["bwd_wh"] += dwh
        grads["bwd_b"] += db

        dx = dxf + dxb[::-1]
        if mask is not None:
            dx = dx * mask
        np.add.at(grads["embedding"], ids, dx)
    return grads


# ---------------------------------------------------------------------------
# Checkpoint container: magic + version + JSON header + raw tensor payloads
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> None:
    """Write a versioned binary checkpoint; round-trips bitwise."""
    tensors = params.arrays()
    header = {
        "version": CHECKPOINT_VERSION,
        "rng_seed": params.rng_seed,
        "meta": meta or {},
        "tensors": [
            {"name": n, "dtype": str(a.dtype), "shape": list(a.shape)}
            for n, a in tensors.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        arrays = {}
        for spec in header["tensors"]:
            dtype = np.dtype(spec["dtype"])
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            arrays[spec["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    params = ModelParams(**arrays, rng_seed=header["rng_seed"])
    return params, header["meta"]


def checkpoint_file_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
