import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bilopt import autodiff as ad
from bilopt.autodiff import Tape, Tensor

settings.register_profile(
    "bilopt",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "bilopt"))


def analytic_grad(fn, arrays):
    """Tape gradient of the scalar ``fn(tensors)`` with respect to every array."""
    with Tape():
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        loss = fn(ts)
        return [g.data.copy() for g in ad.grad(loss, ts)]


def numeric_grad(fn, arrays, step=1e-5):
    """Central differences of ``fn`` evaluated without a tape."""
    out = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            hi = [x.copy() for x in arrays]
            lo = [x.copy() for x in arrays]
            hi[i][idx] += step
            lo[i][idx] -= step
            with ad.no_record():
                f_hi = fn([Tensor(x) for x in hi]).item()
                f_lo = fn([Tensor(x) for x in lo]).item()
            g[idx] = (f_hi - f_lo) / (2 * step)
        out.append(g)
    return out


def relative_error(a, b, floor=1e-8):
    a = np.concatenate([np.ravel(x) for x in a])
    b = np.concatenate([np.ravel(x) for x in b])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


def fd_relative_error(fn, arrays, step=1e-5):
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    return relative_error(analytic_grad(fn, arrays), numeric_grad(fn, arrays, step))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class SmallProblem:
    """A tiny embedder-DP instruction problem over a four-type suite."""

    def __init__(self):
        from bilopt.instructions import EmbedderDPParams
        from bilopt.model import ModelParams
        from bilopt.objectives import InstructionProblem
        from bilopt.tasks import SplitSpec, generate_task_suite, make_splits

        r = np.random.default_rng(0)
        suite = generate_task_suite(1, families=("copy", "reverse", "parity", "presence"), tasks_per_family=1,
                                    instances_per_task=10, n_content=3, min_len=1, max_len=3)
        self.splits = make_splits(suite.tasks, SplitSpec(test_types=["presence"], n_meta_test=1, valid_per_task=2), 0)
        model = ModelParams.init(suite.vocab_size, 3, r, scale=0.5)
        phi = EmbedderDPParams.init([t.id for t in self.splits.meta_train], 1, 3, r)
        self.theta = model.arrays()
        self.problem = InstructionProblem(self.splits.meta_train, self.splits.meta_test, "learned", "embedder_dp", phi,
                                          batch_size=3, outer_batch_size=3)


@pytest.fixture
def small_problem():
    return SmallProblem()


TINY_OVERRIDES = [
    "suite.families=copy,reverse,parity,presence,rotate,majority",
    "suite.tasks_per_family=1",
    "suite.instances_per_task=8",
    "suite.n_content=4",
    "suite.max_len=3",
    "split.test_types=rotate",
    "split.n_meta_test=1",
    "split.valid_per_task=2",
    "split.candidates=3",
    "model.dim=6",
    "model.latent=3",
    "bilevel.n_outer=3",
    "bilevel.K=2",
    "bilevel.batch_size=4",
    "bilevel.outer_batch_size=4",
    "train.epochs=1",
    "train.batch_size=4",
    "eval.max_len=4",
    "run.eval_every=1",
]


def tiny_config(*extra):
    """A configuration small enough to run any driver in about a second."""
    from bilopt.harness.config import RunConfig, apply_overrides

    return apply_overrides(RunConfig(), TINY_OVERRIDES + list(extra)).validate()
