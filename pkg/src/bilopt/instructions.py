"""Learnable instruction parameterizations.

Two embedders emit instruction embedding rows directly; two extractors
score a pool of formatted exemplars and hand the argmax candidate's token
embeddings to the model through a straight-through selection.

* ``EmbedderDP``: one ``(l, d)`` matrix per task.
* ``EmbedderIC``: ``I = W h`` with ``h`` the mean of ``V_phi`` rows of a
  formatted instance and ``W`` an ``(l, d, d')`` tensor.
* ``ExtractorDP``: one logit vector per task, softmax over its pool.
* ``ExtractorIC``: ``p(z_j | z_i) = softmax_j(h_j^T W h_i)``.

Parameter containers hold numpy arrays; ``tensors()`` lifts them onto the
tape and every builder accepts the lifted form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .model import ModelParams, _check_tokens, embed_tokens


def _init_uniform(rng: np.random.Generator, shape, scale: float = 0.1) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


@dataclass
class EmbedderDPParams:
    weights: object  # (n_tasks, l, d)
    task_index: dict

    kind = "embedder_dp"

    @classmethod
    def init(cls, task_ids: Sequence[str], length: int, dim: int, rng: np.random.Generator) -> "EmbedderDPParams":
        return cls(_init_uniform(rng, (len(task_ids), length, dim)), {t: i for i, t in enumerate(task_ids)})

    def arrays(self) -> list[np.ndarray]:
        return [_arr(self.weights)]

    def with_arrays(self, arrays) -> "EmbedderDPParams":
        return EmbedderDPParams(arrays[0], self.task_index)

    def names(self) -> list[str]:
        return ["weights"]


@dataclass
class EmbedderICParams:
    token_emb: object  # V_phi, (v, d')
    conversion: object  # W_phi, (l, d, d')

    kind = "embedder_ic"

    @classmethod
    def init(cls, vocab_size: int, length: int, dim: int, latent: int, rng: np.random.Generator) -> "EmbedderICParams":
        return cls(_init_uniform(rng, (vocab_size, latent)), _init_uniform(rng, (length, dim, latent)))

    def arrays(self) -> list[np.ndarray]:
        return [_arr(self.token_emb), _arr(self.conversion)]

    def with_arrays(self, arrays) -> "EmbedderICParams":
        return EmbedderICParams(*arrays)

    def names(self) -> list[str]:
        return ["token_emb", "conversion"]


@dataclass
class ExtractorDPParams:
    logits: object  # (n_tasks, N)
    task_index: dict

    kind = "extractor_dp"

    @classmethod
    def init(cls, task_ids: Sequence[str], pool_size: int) -> "ExtractorDPParams":
        return cls(np.zeros((len(task_ids), pool_size)), {t: i for i, t in enumerate(task_ids)})

    def arrays(self) -> list[np.ndarray]:
        return [_arr(self.logits)]

    def with_arrays(self, arrays) -> "ExtractorDPParams":
        return ExtractorDPParams(arrays[0], self.task_index)

    def names(self) -> list[str]:
        return ["logits"]


@dataclass
class ExtractorICParams:
    token_emb: object  # V_phi, (v, d')
    bilinear: object  # W_phi, (d', d')

    kind = "extractor_ic"

    @classmethod
    def init(cls, vocab_size: int, latent: int, rng: np.random.Generator) -> "ExtractorICParams":
        return cls(_init_uniform(rng, (vocab_size, latent)), np.zeros((latent, latent)))

    def arrays(self) -> list[np.ndarray]:
        return [_arr(self.token_emb), _arr(self.bilinear)]

    def with_arrays(self, arrays) -> "ExtractorICParams":
        return ExtractorICParams(*arrays)

    def names(self) -> list[str]:
        return ["token_emb", "bilinear"]


InstructionParams = EmbedderDPParams | EmbedderICParams | ExtractorDPParams | ExtractorICParams


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def lift(params, requires_grad: bool = True):
    """Copy of ``params`` whose arrays are tape tensors."""
    return params.with_arrays([Tensor(a, requires_grad=requires_grad) for a in params.arrays()])


def named(params, prefix: str = "phi.") -> dict[str, np.ndarray]:
    return {f"{prefix}{params.kind}.{n}": a for n, a in zip(params.names(), params.arrays())}


# ----------------------------------------------------------------- embedders


def embed_instance_latent(z: Sequence[int], token_emb) -> Tensor:
    """``h = mean_k V_phi[z_k]``."""
    if len(z) == 0:
        raise ShapeError("embed_instance_latent: empty sequence")
    ids = _check_tokens(z, _arr(token_emb).shape[0], "embed_instance_latent")
    return ad.mean(ad.gather(token_emb, ids), axis=0)


def batch_latents(seqs: Sequence[Sequence[int]], token_emb) -> Tensor:
    """Latents for several token sequences at once, shape ``(B, d')``."""
    if any(len(z) == 0 for z in seqs):
        raise ShapeError("batch_latents: empty sequence")
    flat = np.concatenate([np.asarray(z, dtype=np.int64) for z in seqs])
    _check_tokens(flat, _arr(token_emb).shape[0], "batch_latents")
    seg = np.concatenate([np.full(len(z), i, dtype=np.int64) for i, z in enumerate(seqs)])
    return ad.segment_mean(ad.gather(token_emb, flat), seg, len(seqs))


def embedder_dp_instruction(task_id: str, params: EmbedderDPParams) -> Tensor:
    if task_id not in params.task_index:
        raise KeyError(f"no instruction matrix registered for task {task_id!r}")
    return ad.reshape(ad.gather(params.weights, [params.task_index[task_id]]), _arr(params.weights).shape[1:])


def embedder_dp_batch(task_ids: Sequence[str], params: EmbedderDPParams) -> Tensor:
    """``(B, l, d)`` instruction blocks for a batch of task ids."""
    missing = [t for t in task_ids if t not in params.task_index]
    if missing:
        raise KeyError(f"no instruction matrix registered for task {missing[0]!r}")
    return ad.gather(params.weights, [params.task_index[t] for t in task_ids])


def embedder_ic_instruction(z: Sequence[int], params: EmbedderICParams) -> Tensor:
    """``I = W_phi . h(z)`` contracted over the latent axis, shape ``(l, d)``."""
    return ad.contract_last(params.conversion, embed_instance_latent(z, params.token_emb))


def embedder_ic_batch(seqs: Sequence[Sequence[int]], params: EmbedderICParams) -> Tensor:
    return ad.contract_last(params.conversion, batch_latents(seqs, params.token_emb))


# ----------------------------------------------------------------- extractors


def extractor_dp_probs(task_id: str, params: ExtractorDPParams) -> Tensor:
    if task_id not in params.task_index:
        raise KeyError(f"no extractor logits registered for task {task_id!r}")
    row = ad.gather(params.logits, [params.task_index[task_id]])
    return ad.reshape(ad.softmax(row, axis=-1), (_arr(params.logits).shape[1],))


def extractor_dp_batch(task_ids: Sequence[str], params: ExtractorDPParams) -> Tensor:
    return ad.softmax(ad.gather(params.logits, [params.task_index[t] for t in task_ids]), axis=-1)


def _pool_latents(pool_tokens: np.ndarray, token_emb) -> Tensor:
    """Latents of padded pool candidates, ``(..., N, d')``."""
    _check_tokens(pool_tokens, _arr(token_emb).shape[0], "extractor pool")
    return ad.mean(ad.gather(token_emb, pool_tokens), axis=-2)


def extractor_ic_probs(query: Sequence[int], pool_tokens: np.ndarray, params: ExtractorICParams) -> Tensor:
    """``softmax_j(h_j^T W_phi h_query)`` over a padded ``(N, l_z)`` pool."""
    pool_tokens = np.asarray(pool_tokens, dtype=np.int64)
    if pool_tokens.ndim != 2 or pool_tokens.shape[0] == 0:
        raise ShapeError("extractor_ic_probs: empty pool")
    hq = embed_instance_latent(query, params.token_emb)
    hc = _pool_latents(pool_tokens, params.token_emb)
    scores = ad.matmul(hc, ad.matmul(params.bilinear, hq))
    return ad.softmax(scores, axis=-1)


def extractor_ic_batch(queries: Sequence[Sequence[int]], pool_tokens: np.ndarray, params: ExtractorICParams) -> Tensor:
    """Batched probabilities; ``pool_tokens`` is ``(B, N, l_z)``."""
    hq = batch_latents(queries, params.token_emb)  # (B, d')
    hc = _pool_latents(pool_tokens, params.token_emb)  # (B, N, d')
    proj = ad.matmul(hq, ad.transpose(params.bilinear))  # (B, d'): W h_i per row
    b, dl = proj.shape
    scores = ad.sum(ad.mul(hc, ad.reshape(proj, (b, 1, dl))), axis=-1)
    return ad.softmax(scores, axis=-1)


def extract_instruction(probs, pool_tokens: np.ndarray, model: ModelParams, expectation: bool = False) -> Tensor:
    """Embedding rows of the selected pool candidate.

    ``pool_tokens`` is ``(..., N, l_z)`` with ``probs`` ``(..., N)``.  The forward
    value is the argmax candidate's ``V_theta`` rows; gradients follow the
    probability-weighted mixture.  ``expectation=True`` returns the mixture
    itself (an evaluation-only comparison).
    """
    pool_tokens = np.asarray(pool_tokens, dtype=np.int64)
    cands = ad.gather(model.token_emb, pool_tokens)
    if expectation:
        p = ad.constant(probs)
        return ad.sum(ad.mul(cands, ad.reshape(p, p.shape + (1, 1))), axis=-3)
    return ad.straight_through_select(probs, cands)


def selected_index(probs) -> np.ndarray:
    return np.argmax(_arr(probs), axis=-1)


# ----------------------------------------------------------------- composition


def compose_instruction(learned: Tensor, manual: Tensor | None) -> Tensor:
    """Learned rows first, then manual rows when present."""
    if manual is None:
        return ad.constant(learned)
    learned, manual = ad.constant(learned), ad.constant(manual)
    if learned.shape[-1] != manual.shape[-1]:
        raise ShapeError(f"compose_instruction: widths differ ({learned.shape} vs {manual.shape})")
    return ad.concat([learned, manual], axis=0)


def manual_instruction(tokens: Sequence[int], model: ModelParams) -> Tensor:
    return embed_tokens(tokens, model)
