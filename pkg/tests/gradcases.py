"""Finite-difference cases for every primitive and every composite loss.

Each case builder takes a generator and returns ``(name, fn, arrays)`` where
``fn`` maps a list of tensors to a scalar.  Primitive outputs are reduced to a
scalar by a fixed random weighting so every output entry is exercised.
"""

from __future__ import annotations

import numpy as np

from bilopt import autodiff as ad
from bilopt import instructions as ins
from bilopt.autodiff import Tensor
from bilopt.model import ModelParams, nll_loss, sequence_logprobs
from bilopt.objectives import InstructionProblem, pad_pools
from bilopt.tasks import SplitSpec, format_instance, generate_task_suite, make_splits, sample_candidates


def _u(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _case(name, op, arrays, rng):
    with ad.no_record():
        shape = op(*[Tensor(a) for a in arrays]).shape
    w = rng.normal(size=shape)
    return name, (lambda ts: ad.sum(ad.mul(op(*ts), Tensor(w)))), arrays


def primitive_cases(rng):
    idx = rng.integers(0, 4, size=6)
    seg = np.array([0, 1, 1, 2, 0, 2])
    pick_idx = rng.integers(0, 5, size=3)
    return [
        _case("add", ad.add, [_u(rng, 3, 4), _u(rng, 4)], rng),
        _case("sub", ad.sub, [_u(rng, 3, 4), _u(rng, 3, 1)], rng),
        _case("mul", ad.mul, [_u(rng, 2, 3), _u(rng, 2, 3)], rng),
        _case("div", ad.div, [_u(rng, 2, 3), _u(rng, 2, 3, lo=0.5, hi=2.0)], rng),
        _case("neg", ad.neg, [_u(rng, 5)], rng),
        _case("power", lambda a: ad.power(a, 3.0), [_u(rng, 4)], rng),
        _case("tanh", ad.tanh, [_u(rng, 3, 3)], rng),
        _case("exp", ad.exp, [_u(rng, 4)], rng),
        _case("log", ad.log, [_u(rng, 4, lo=0.2, hi=2.0)], rng),
        _case("reshape", lambda a: ad.reshape(a, (6, 2)), [_u(rng, 3, 4)], rng),
        _case("transpose", ad.transpose, [_u(rng, 3, 4)], rng),
        _case("broadcast_to", lambda a: ad.broadcast_to(a, (3, 4)), [_u(rng, 1, 4)], rng),
        _case("sum", lambda a: ad.sum(a, axis=1), [_u(rng, 3, 4)], rng),
        _case("mean", lambda a: ad.mean(a, axis=0), [_u(rng, 3, 4)], rng),
        _case("concat", lambda a, b: ad.concat([a, b], axis=0), [_u(rng, 2, 3), _u(rng, 4, 3)], rng),
        _case("matmul", ad.matmul, [_u(rng, 2, 3), _u(rng, 3, 2)], rng),
        _case("matvec", ad.matmul, [_u(rng, 3, 4), _u(rng, 4)], rng),
        _case("contract_last", ad.contract_last, [_u(rng, 2, 3, 4), _u(rng, 4)], rng),
        _case("contract_last_batch", ad.contract_last, [_u(rng, 2, 3, 4), _u(rng, 5, 4)], rng),
        _case("gather", lambda t: ad.gather(t, idx), [_u(rng, 4, 3)], rng),
        _case("scatter_add", lambda s: ad.scatter_add(s, idx, 4), [_u(rng, 6, 2)], rng),
        _case("segment_mean", lambda r: ad.segment_mean(r, seg, 3), [_u(rng, 6, 2)], rng),
        _case("pick", lambda x: ad.pick(x, pick_idx), [_u(rng, 3, 5)], rng),
        _case("softmax", lambda a: ad.softmax(a, axis=-1), [_u(rng, 2, 4)], rng),
        _case("log_softmax", lambda a: ad.log_softmax(a, axis=-1), [_u(rng, 2, 4)], rng),
    ]


# ----------------------------------------------------------------- composite losses

_SUITE = generate_task_suite(3, families=("copy", "reverse", "presence"), tasks_per_family=1,
                             instances_per_task=8, n_content=3, min_len=1, max_len=3)
_SPLITS = make_splits(_SUITE.tasks, SplitSpec(test_types=["presence"], n_meta_test=1, valid_per_task=2), 0)


def _model_arrays(rng, v, d):
    return ModelParams.init(v, d, rng, scale=0.8).arrays()


def composite_cases(rng):
    v, d, lat, l = _SUITE.vocab_size, 4, 3, 2
    theta = _model_arrays(rng, v, d)
    tasks = _SPLITS.meta_train
    batch_rng = np.random.default_rng(int(rng.integers(1 << 30)))
    cases = []

    def seq_case():
        toks = rng.integers(0, v, size=4)
        target = list(rng.integers(0, v, size=3))

        def fn(ts):
            m = ModelParams.from_list(ts)
            return ad.neg(sequence_logprobs(ad.gather(m.token_emb, toks), target, m))

        return "sequence_logprobs", fn, theta

    def nll_case():
        seqs = [rng.integers(0, v, size=n) for n in (2, 3, 5)]
        targets = [list(rng.integers(0, v, size=n)) for n in (1, 2, 3)]

        def fn(ts):
            m = ModelParams.from_list(ts)
            return nll_loss([(ad.gather(m.token_emb, s), t) for s, t in zip(seqs, targets)], m)

        return "nll_loss", fn, theta

    cases += [seq_case(), nll_case()]

    def problem_case(name, mode, kind, phi, pools=None, expectation=False, which="theta"):
        prob = InstructionProblem(tasks, _SPLITS.meta_test, mode, kind, phi, pools=pools, batch_size=3,
                                  expectation=expectation,
                                  exemplars={t.id: format_instance(t.instances[0]) for t in _SPLITS.train})
        batch = prob.sample_inner_batch(batch_rng)
        phi_arrays = phi.arrays() if phi is not None else []
        if which == "theta":
            fn = lambda ts: prob.inner_loss(ts, [Tensor(a) for a in phi_arrays] if phi is not None else None, batch)
            return name + "/theta", fn, theta
        fn = lambda ps: prob.inner_loss([Tensor(a) for a in theta], ps, batch)
        return name + "/phi", fn, phi_arrays

    phi_dp = ins.EmbedderDPParams.init([t.id for t in tasks], l, d, rng)
    phi_ic = ins.EmbedderICParams.init(v, l, d, lat, rng)
    phi_xdp = ins.ExtractorDPParams(rng.normal(size=(len(tasks), 2)), {t.id: i for i, t in enumerate(tasks)})
    phi_xic = ins.ExtractorICParams(rng.normal(size=(v, lat)), rng.normal(size=(lat, lat)))
    pools = pad_pools({t.id: sample_candidates(t, 2, 5).candidates for t in tasks})
    cases += [
        problem_case("inner_definition", "definition", None, None),
        problem_case("inner_exemplar", "exemplar_task", None, None),
        problem_case("inner_embedder_dp", "learned", "embedder_dp", phi_dp),
        problem_case("inner_embedder_dp", "learned", "embedder_dp", phi_dp, which="phi"),
        problem_case("inner_def+embedder_ic", "learned+definition", "embedder_ic", phi_ic),
        problem_case("inner_def+embedder_ic", "learned+definition", "embedder_ic", phi_ic, which="phi"),
        problem_case("inner_extractor_dp_mixture", "learned", "extractor_dp", phi_xdp, pools, True, "phi"),
        problem_case("inner_extractor_ic_mixture", "learned", "extractor_ic", phi_xic, pools, True, "phi"),
    ]

    prob = InstructionProblem(tasks, _SPLITS.meta_test, batch_size=3, outer_batch_size=3)
    ob = prob.sample_outer_batch(batch_rng)
    cases.append(("outer_definition", lambda ts: prob.outer_loss(ts, ob), theta))
    return cases


def all_cases(rng):
    return primitive_cases(rng) + composite_cases(rng)


def n_case_kinds() -> int:
    return len(all_cases(np.random.default_rng(0)))
