"""Toy conditional sequence model ``p(y | [I; X])``.

The context vector is ``tanh(mean(rows) @ W_enc)`` over the concatenated
instruction and input embedding rows.  Each output step sees the context and
the embedding of the previous output token (an all-zeros row before the first
token)::

    hidden_t = tanh([c; emb(y_{t-1})] @ W_dec + b_dec)
    logits_t = hidden_t @ V^T

Because no step depends on an earlier hidden state, all teacher-forced steps of
a batch are evaluated in one pass.  An embedded sequence is a ``(length, d)``
tensor.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .vocab import EOS

PARAM_NAMES = ("token_emb", "w_enc", "w_dec", "b_dec")


@dataclass
class ModelParams:
    """Model weights.  Fields hold numpy arrays or, inside a tape, Tensors."""

    token_emb: object  # V_theta, (v, d); also the tied output projection
    w_enc: object  # (d, d)
    w_dec: object  # (2d, d)
    b_dec: object  # (d,)

    @classmethod
    def init(cls, vocab_size: int, dim: int, rng: np.random.Generator, scale: float = 0.5) -> "ModelParams":
        return cls(
            token_emb=rng.normal(0.0, scale, size=(vocab_size, dim)),
            w_enc=rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, dim)),
            w_dec=rng.normal(0.0, 1.0 / np.sqrt(2 * dim), size=(2 * dim, dim)),
            b_dec=np.zeros(dim),
        )

    @classmethod
    def zeros(cls, vocab_size: int, dim: int) -> "ModelParams":
        return cls(
            np.zeros((vocab_size, dim)), np.zeros((dim, dim)), np.zeros((2 * dim, dim)), np.zeros(dim)
        )

    @property
    def vocab_size(self) -> int:
        return _arr(self.token_emb).shape[0]

    @property
    def dim(self) -> int:
        return _arr(self.token_emb).shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [_arr(getattr(self, n)) for n in PARAM_NAMES]

    def tensors(self, requires_grad: bool = True) -> "ModelParams":
        return ModelParams(
            *[Tensor(a, requires_grad=requires_grad, name=n) for n, a in zip(PARAM_NAMES, self.arrays())]
        )

    def as_list(self) -> list:
        return [getattr(self, f.name) for f in fields(self)]

    @classmethod
    def from_list(cls, items: Sequence) -> "ModelParams":
        return cls(*items)

    def copy(self) -> "ModelParams":
        return ModelParams(*[a.copy() for a in self.arrays()])

    def named(self, prefix: str = "model.") -> dict[str, np.ndarray]:
        return {prefix + n: a for n, a in zip(PARAM_NAMES, self.arrays())}


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_tokens(tokens, vocab_size: int, what: str) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise IndexError(f"{what}: token id out of vocabulary of size {vocab_size}")
    return ids


def embed_tokens(tokens: Sequence[int], params: ModelParams) -> Tensor:
    """Rows of ``V_theta`` for each token id."""
    ids = _check_tokens(tokens, params.vocab_size, "embed_tokens")
    return ad.gather(params.token_emb, ids)


def concat_instruction(instruction: Tensor, inputs: Tensor) -> Tensor:
    """``[I; X]``: instruction rows followed by input rows."""
    instruction, inputs = ad.constant(instruction), ad.constant(inputs)
    if instruction.ndim != 2 or inputs.ndim != 2 or instruction.shape[1] != inputs.shape[1]:
        raise ShapeError(
            f"concat_instruction: widths differ ({instruction.shape} vs {inputs.shape})"
        )
    if instruction.shape[0] < 1:
        raise ShapeError("concat_instruction: instruction must have at least one row")
    return ad.concat([instruction, inputs], axis=0)


@dataclass
class StepLayout:
    """Teacher-forcing layout of a batch of targets, flattened over steps."""

    owner: np.ndarray  # instance index of each step
    prev: np.ndarray  # previous token id (0 where bos)
    bos: np.ndarray  # (S, 1) 1.0 at the first step of each target
    target: np.ndarray  # token to score at each step

    @classmethod
    def build(cls, targets: Sequence[Sequence[int]]) -> "StepLayout":
        owner, prev, bos, tgt = [], [], [], []
        for b, t in enumerate(targets):
            t = list(t)
            if not t:
                raise ShapeError("target sequences must be nonempty")
            for s, tok in enumerate(t):
                owner.append(b)
                prev.append(t[s - 1] if s else 0)
                bos.append(1.0 if s == 0 else 0.0)
                tgt.append(tok)
        return cls(
            np.array(owner, dtype=np.int64),
            np.array(prev, dtype=np.int64),
            np.array(bos)[:, None],
            np.array(tgt, dtype=np.int64),
        )


def context_vectors(rows: Tensor, seg: np.ndarray, n: int, params: ModelParams) -> Tensor:
    return ad.tanh(ad.matmul(ad.segment_mean(rows, seg, n), params.w_enc))


def batch_logprobs(
    rows: Tensor,
    seg: np.ndarray,
    n: int,
    targets: Sequence[Sequence[int]],
    params: ModelParams,
    layout: StepLayout | None = None,
) -> Tensor:
    """Per-instance ``log p(target | rows)`` for a packed batch.

    ``rows`` stacks the context rows of every instance; ``seg[r]`` names the
    instance row ``r`` belongs to.  Row order within an instance is irrelevant.
    """
    if layout is None:
        layout = StepLayout.build(targets)
    _check_tokens(layout.target, params.vocab_size, "sequence_logprobs target")
    ctx = context_vectors(rows, seg, n, params)
    prev_emb = ad.mul(ad.gather(params.token_emb, layout.prev), 1.0 - layout.bos)
    hidden = ad.tanh(
        ad.add(
            ad.matmul(ad.concat([ad.gather(ctx, layout.owner), prev_emb], axis=1), params.w_dec),
            params.b_dec,
        )
    )
    logp = ad.log_softmax(ad.matmul(hidden, ad.transpose(params.token_emb)), axis=-1)
    return ad.scatter_add(ad.pick(logp, layout.target), layout.owner, n)


def pack(seqs: Sequence[Tensor]) -> tuple[Tensor, np.ndarray]:
    """Stack embedded sequences into packed rows plus segment ids."""
    if not seqs:
        raise ShapeError("empty batch")
    seg = np.concatenate([np.full(s.shape[0], i, dtype=np.int64) for i, s in enumerate(seqs)])
    rows = seqs[0] if len(seqs) == 1 else ad.concat(list(seqs), axis=0)
    return rows, seg


def sequence_logprobs(seq: Tensor, target: Sequence[int], params: ModelParams) -> Tensor:
    """Scalar ``sum_t log p(y_t | context, y_<t)``."""
    seq = ad.constant(seq)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ShapeError(f"sequence_logprobs: bad sequence shape {seq.shape}")
    if len(target) < 1:
        raise ShapeError("sequence_logprobs: empty target")
    out = batch_logprobs(seq, np.zeros(seq.shape[0], dtype=np.int64), 1, [target], params)
    return ad.reshape(out, ())


def nll_loss(batch: Sequence[tuple[Tensor, Sequence[int]]], params: ModelParams) -> Tensor:
    """Mean negative log-likelihood over ``(sequence, target)`` pairs."""
    if not batch:
        raise ShapeError("nll_loss: empty batch")
    rows, seg = pack([ad.constant(s) for s, _ in batch])
    lp = batch_logprobs(rows, seg, len(batch), [t for _, t in batch], params)
    return ad.neg(ad.mean(lp))


def packed_nll(rows: Tensor, seg: np.ndarray, n: int, targets, params: ModelParams, layout=None) -> Tensor:
    return ad.neg(ad.mean(batch_logprobs(rows, seg, n, targets, params, layout)))


# ----------------------------------------------------------------- decoding


def _np_contexts(rows: np.ndarray, seg: np.ndarray, n: int, params: ModelParams) -> np.ndarray:
    with ad.no_record():
        return ad.segment_mean(Tensor(rows), seg, n).data @ _arr(params.w_enc)


def greedy_decode_batch(
    rows: np.ndarray, seg: np.ndarray, n: int, params: ModelParams, max_len: int, eos: int = EOS
) -> list[list[int]]:
    """Greedy decoding of every instance in a packed batch (no tape)."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    V = _arr(params.token_emb)
    w_dec = _arr(params.w_dec)
    b_dec = _arr(params.b_dec)
    ctx = np.tanh(_np_contexts(np.asarray(rows, dtype=np.float64), seg, n, params))
    d = V.shape[1]
    ctx_part = ctx @ w_dec[:d] + b_dec
    prev = np.zeros((n, d))
    out: list[list[int]] = [[] for _ in range(n)]
    alive = np.ones(n, dtype=bool)
    for _ in range(max_len):
        hidden = np.tanh(ctx_part + prev @ w_dec[d:])
        tok = np.argmax(hidden @ V.T, axis=1)
        for b in np.flatnonzero(alive):
            if tok[b] == eos:
                alive[b] = False
            else:
                out[b].append(int(tok[b]))
        if not alive.any():
            break
        prev = V[tok]
    return out


def greedy_decode(seq, params: ModelParams, max_len: int, eos: int = EOS) -> list[int]:
    """Greedy decode of one embedded sequence; stops at ``eos`` (not emitted)."""
    rows = _arr(seq)
    return greedy_decode_batch(rows, np.zeros(rows.shape[0], dtype=np.int64), 1, params, max_len, eos)[0]


# ----------------------------------------------------------------- checkpoints

_MAGIC = b"BILOPTC1"


def save_checkpoint(path, named: Mapping[str, np.ndarray]) -> None:
    """Write ``name -> array`` to a single flat little-endian file.

    Layout: magic ``BILOPTC1``, ``u32`` entry count, then per entry ``u16`` name
    length, UTF-8 name, ``u8`` rank, ``rank x u64`` dims, row-major ``f64`` data.
    """
    buf = bytearray(_MAGIC)
    buf += struct.pack("<I", len(named))
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name], dtype="<f8")
        key = name.encode("utf-8")
        buf += struct.pack("<H", len(key)) + key
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (count,) = struct.unpack_from("<I", raw, 8)
    pos = 12
    out = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + klen].decode("utf-8")
        pos += klen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    return out


def params_from_named(named: Mapping[str, np.ndarray], prefix: str = "model.") -> ModelParams:
    return ModelParams(*[named[prefix + n] for n in PARAM_NAMES])
