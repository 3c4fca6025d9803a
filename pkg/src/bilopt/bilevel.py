"""Bilevel optimization of instruction parameters.

Alternates ``K`` inner gradient steps on the model parameters ``theta`` with
one outer step on the instruction parameters ``phi``.  The outer gradient is
the implicit-function-theorem hypergradient::

    d L_out / d phi = - (d L_out / d theta) H^{-1} (d2 L_in / d theta d phi)

with ``H^{-1} v`` approximated by a truncated Neumann series.  Two exact
oracles (differentiating through the unrolled inner loop, and central
finite differences of the whole pipeline) check it on small problems.

A *problem* is any object with ``inner_loss(theta, phi, batch)`` and
``outer_loss(theta, batch)`` returning scalar tensors, where ``theta`` and
``phi`` are lists of tensors.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor

log = logging.getLogger(__name__)

UNROLL_CAP = 50


class BilevelDivergence(RuntimeError):
    """Inner or outer loss became non-finite."""

    def __init__(self, message: str, trace: list | None = None):
        super().__init__(message)
        self.trace = trace or []


@dataclass
class Bilevel:
    """A bilevel problem given by two loss callables."""

    inner: Callable[[Sequence[Tensor], Sequence[Tensor], Any], Tensor]
    outer: Callable[[Sequence[Tensor], Any], Tensor]

    def inner_loss(self, theta, phi, batch):
        return self.inner(theta, phi, batch)

    def outer_loss(self, theta, batch):
        return self.outer(theta, batch)


@dataclass
class HypergradConfig:
    K: int = 20
    M: int = 1
    gamma: float = 1e-5
    inner_lr: float = 0.1
    outer_lr: float = 1e-3
    inner_optimizer: str = "sgd"
    outer_optimizer: str = "sgd"
    seed: int = 0
    check_contraction: bool = False
    carry_inner_state: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.M < 0:
            raise ValueError(f"M must be >= 0, got {self.M}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not self.inner_lr > 0:
            raise ValueError(f"inner learning rate must be > 0, got {self.inner_lr}")
        if self.outer_lr < 0:
            raise ValueError(f"outer learning rate must be >= 0, got {self.outer_lr}")
        for name in (self.inner_optimizer, self.outer_optimizer):
            if name not in OPTIMIZERS:
                raise ValueError(f"unknown optimizer {name!r}")


# ----------------------------------------------------------------- optimizers


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def reset(self) -> None:
        pass

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        return [p - self.lr * g for p, g in zip(params, grads)]


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.reset()

    def reset(self) -> None:
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1**self.t)
            vhat = self.v[i] / (1 - self.b2**self.t)
            out.append(p - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


OPTIMIZERS = {"sgd": SGD, "adam": Adam}


def make_optimizer(name: str, lr: float):
    return OPTIMIZERS[name](lr)


def _lift(arrays: Sequence[np.ndarray], requires_grad: bool = True) -> list[Tensor]:
    return [Tensor(a, requires_grad=requires_grad) for a in arrays]


def _copy(arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    return [np.array(a, dtype=np.float64, copy=True) for a in arrays]


# ----------------------------------------------------------------- inner / outer


def inner_step(problem, theta: list[np.ndarray], phi: list[np.ndarray], batch) -> tuple[float, list[np.ndarray]]:
    """Loss value and ``grad_theta L_in`` at ``(theta, phi)``."""
    with Tape():
        th = _lift(theta)
        ph = _lift(phi, requires_grad=False)
        loss = problem.inner_loss(th, ph, batch)
        grads = ad.grad(loss, th)
    return loss.item(), [g.data for g in grads]


def inner_loop(
    problem,
    theta: Sequence[np.ndarray],
    phi: Sequence[np.ndarray],
    batches: Sequence,
    config: HypergradConfig,
    optimizer=None,
) -> tuple[list[np.ndarray], list[float]]:
    """Run ``len(batches)`` inner steps from ``theta`` with ``phi`` held fixed.

    Returns the final parameters and the loss seen at each step.  ``phi`` is
    never written to.
    """
    if len(batches) < 1:
        raise ValueError("inner loop needs K >= 1 batches")
    if optimizer is None:
        optimizer = make_optimizer(config.inner_optimizer, config.inner_lr)
    theta = _copy(theta)
    phi = list(phi)
    losses = []
    for k, batch in enumerate(batches):
        try:
            value, grads = inner_step(problem, theta, phi, batch)
        except NonFiniteError as exc:
            raise BilevelDivergence(f"non-finite inner loss at step {k}: {exc}") from exc
        if not np.isfinite(value):
            raise BilevelDivergence(f"non-finite inner loss {value} at step {k}")
        losses.append(value)
        theta = optimizer.step(theta, grads)
    return theta, losses


def outer_loss(problem, theta: Sequence[np.ndarray], batch) -> float:
    with ad.no_record():
        return problem.outer_loss(_lift(theta, requires_grad=False), batch).item()


# ----------------------------------------------------------------- Neumann


def neumann_inverse_hvp(
    v: np.ndarray,
    hvp_fn: Callable[[np.ndarray], np.ndarray],
    M: int,
    gamma: float,
) -> np.ndarray:
    """``gamma * sum_{m=0}^{M} (I - gamma H)^m v`` using one HVP per term."""
    if M < 0:
        raise ValueError("M must be >= 0")
    u = np.asarray(v, dtype=np.float64).copy()
    p = u.copy()
    for m in range(1, M + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            u = u - gamma * hvp_fn(u)
        if not np.all(np.isfinite(u)):
            raise NonFiniteError(f"non-finite Neumann term at index {m}")
        p = p + u
    return gamma * p


def neumann_terms(v: np.ndarray, hvp_fn, M: int, gamma: float) -> list[np.ndarray]:
    """Partial sums ``p_0 .. p_M`` of the series (for convergence studies)."""
    u = np.asarray(v, dtype=np.float64).copy()
    acc = u.copy()
    out = [gamma * acc]
    for _ in range(M):
        u = u - gamma * hvp_fn(u)
        acc = acc + u
        out.append(gamma * acc)
    return out


def power_iteration(hvp_fn, dim: int, iters: int = 20, seed: int = 0) -> float:
    """Estimate of the dominant Hessian eigenvalue magnitude."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=dim)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        y = hvp_fn(x)
        norm = np.linalg.norm(y)
        if norm == 0:
            return 0.0
        lam = float(x @ y)
        x = y / norm
    return abs(lam)


class _InnerHessian:
    """HVP and mixed-partial access to ``L_in`` at a fixed ``(theta, phi)``."""

    def __init__(self, problem, theta, phi, batch):
        self.tape = Tape(retain_for_higher_order=True)
        with self.tape:
            self.th = _lift(theta)
            self.ph = _lift(phi)
            self.loss = problem.inner_loss(self.th, self.ph, batch)
            self.g = ad.grad(self.loss, self.th, create_graph=True)
        self.dim = sum(int(np.prod(t.shape)) for t in self.th)

    def _contract(self, vec: np.ndarray, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        with self.tape:
            s = ad._dot_all(self.g, ad.unflatten(vec, self.th))
            if s.node is None:
                return [np.zeros(w.shape) for w in wrt]
            return [g.data for g in ad.grad(s, wrt)]

    def hvp(self, vec: np.ndarray) -> np.ndarray:
        return ad.flatten(self._contract(vec, self.th))

    def mixed(self, vec: np.ndarray) -> list[np.ndarray]:
        return self._contract(vec, self.ph)


def hypergrad_ift_neumann(
    problem,
    theta: Sequence[np.ndarray],
    phi: Sequence[np.ndarray],
    inner_batch,
    outer_batch,
    config: HypergradConfig,
) -> list[np.ndarray]:
    """IFT hypergradient at ``theta`` (normally ``theta^(K)``) with Neumann ``H^{-1}``."""
    with Tape():
        th = _lift(theta)
        g_out = ad.flatten(ad.grad(problem.outer_loss(th, outer_batch), th))
    if not np.any(g_out):
        return [np.zeros(np.shape(p)) for p in phi]
    hess = _InnerHessian(problem, theta, phi, inner_batch)
    if config.check_contraction:
        lam = power_iteration(hess.hvp, hess.dim, iters=20, seed=config.seed)
        if config.gamma * lam >= 2:
            warnings.warn(
                f"Neumann step gamma={config.gamma:g} with lambda_max~{lam:.3g} violates gamma*lambda_max < 2",
                RuntimeWarning,
                stacklevel=2,
            )
    p = neumann_inverse_hvp(g_out, hess.hvp, config.M, config.gamma)
    return [-m for m in hess.mixed(p)]


def hypergrad_unrolled(
    problem,
    theta0: Sequence[np.ndarray],
    phi: Sequence[np.ndarray],
    inner_batches: Sequence,
    outer_batch,
    config: HypergradConfig,
) -> list[np.ndarray]:
    """Exact gradient of ``L_out(theta^(K)(phi))`` through plain-GD inner steps."""
    if len(inner_batches) > UNROLL_CAP:
        raise ValueError(f"unrolled hypergradient keeps every step; K={len(inner_batches)} exceeds {UNROLL_CAP}")
    if len(inner_batches) < 1:
        raise ValueError("need at least one inner batch")
    with Tape(retain_for_higher_order=True):
        ph = _lift(phi)
        th = _lift(theta0)
        for batch in inner_batches:
            loss = problem.inner_loss(th, ph, batch)
            gs = ad.grad(loss, th, create_graph=True)
            th = [ad.sub(t, ad.mul(config.inner_lr, g)) for t, g in zip(th, gs)]
        out = problem.outer_loss(th, outer_batch)
        return [g.data for g in ad.grad(out, ph)]


def pipeline_value(problem, theta0, phi, inner_batches, outer_batch, config: HypergradConfig) -> float:
    theta, _ = inner_loop(problem, theta0, phi, inner_batches, config, SGD(config.inner_lr))
    return outer_loss(problem, theta, outer_batch)


def hypergrad_finite_difference(
    problem,
    theta0: Sequence[np.ndarray],
    phi: Sequence[np.ndarray],
    inner_batches: Sequence,
    outer_batch,
    config: HypergradConfig,
    step: float = 1e-5,
) -> list[np.ndarray]:
    """Central differences of the full inner-loop-then-outer-loss pipeline."""
    if not step > 0:
        raise ValueError("finite-difference step must be > 0")
    flat = ad.flatten(phi)
    if flat.size > 64:
        raise ValueError(f"finite differences limited to 64 coordinates, got {flat.size}")
    out = np.zeros_like(flat)
    for i in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = pipeline_value(problem, theta0, ad.unflatten(hi, phi), inner_batches, outer_batch, config)
        f_lo = pipeline_value(problem, theta0, ad.unflatten(lo, phi), inner_batches, outer_batch, config)
        out[i] = (f_hi - f_lo) / (2 * step)
    return ad.unflatten(out, phi)


# ----------------------------------------------------------------- training


@dataclass
class TraceRecord:
    step: int
    inner_loss: float
    outer_loss: float
    selection_pct: float | None
    wall_ms: float | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class BilevelState:
    theta: list[np.ndarray]
    phi: list[np.ndarray]
    inner_optimizer: Any = None
    outer_optimizer: Any = None
    step: int = 0
    seed: int = 0


@dataclass
class BilevelResult:
    theta: list[np.ndarray]
    phi: list[np.ndarray]
    trace: list[TraceRecord]
    inner_losses: list[float] = field(default_factory=list)


def batch_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent inner and outer batch generators derived from one seed."""
    inner, outer = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(inner), np.random.default_rng(outer)


def bilevel_train(
    problem,
    state: BilevelState,
    config: HypergradConfig,
    n_outer: int,
    patience: int | None = None,
    record_timing: bool = False,
    on_step: Callable[[TraceRecord, list, list], None] | None = None,
) -> BilevelResult:
    """Alternate ``K`` inner steps and one hypergradient step on ``phi``.

    ``problem`` must also provide ``sample_inner_batch(rng)`` and
    ``sample_outer_batch(rng)``; ``selection_pct(theta, phi)`` is recorded when
    present.  ``theta`` is warm-started across outer iterations; the inner
    optimizer is reset before each inner loop unless ``carry_inner_state``.
    ``selection_pct`` is measured with the ``phi`` used by that step's inner
    loop, so step 0 reports the initial selection.  ``on_step(record, theta,
    phi)`` is called after every outer step.  Stops after ``n_outer`` steps,
    or earlier when the outer loss has not improved for ``patience`` steps.
    """
    inner_rng, outer_rng = batch_streams(config.seed)
    inner_opt = state.inner_optimizer or make_optimizer(config.inner_optimizer, config.inner_lr)
    outer_opt = state.outer_optimizer or make_optimizer(config.outer_optimizer, config.outer_lr)
    theta, phi = _copy(state.theta), _copy(state.phi)
    trace: list[TraceRecord] = []
    all_inner: list[float] = []
    best, since_best = np.inf, 0
    select = getattr(problem, "selection_pct", None)
    for step in range(n_outer):
        t0 = time.perf_counter()
        if not config.carry_inner_state:
            inner_opt.reset()
        batches = [problem.sample_inner_batch(inner_rng) for _ in range(config.K)]
        outer_batch = problem.sample_outer_batch(outer_rng)
        try:
            theta, losses = inner_loop(problem, theta, phi, batches, config, inner_opt)
            out_value = outer_loss(problem, theta, outer_batch)
        except (BilevelDivergence, NonFiniteError) as exc:
            raise BilevelDivergence(f"outer step {step}: {exc}", trace) from exc
        if not np.isfinite(out_value):
            raise BilevelDivergence(f"non-finite outer loss at outer step {step}", trace)
        all_inner.extend(losses)
        pct = select(theta, phi) if select is not None else None
        if config.outer_lr > 0:
            hg = hypergrad_ift_neumann(problem, theta, phi, batches[-1], outer_batch, config)
            phi = outer_opt.step(phi, hg)
        rec = TraceRecord(
            step=step,
            inner_loss=losses[-1],
            outer_loss=out_value,
            selection_pct=pct,
            wall_ms=round(1000 * (time.perf_counter() - t0), 3) if record_timing else None,
        )
        trace.append(rec)
        if on_step is not None:
            on_step(rec, theta, phi)
        log.debug("outer step %d: inner %.4f outer %.4f sel %s", step, rec.inner_loss, out_value, pct)
        if patience is not None:
            if out_value < best:
                best, since_best = out_value, 0
            else:
                since_best += 1
                if since_best >= patience:
                    break
    state.theta, state.phi, state.step = theta, phi, state.step + len(trace)
    state.inner_optimizer, state.outer_optimizer = inner_opt, outer_opt
    return BilevelResult(theta, phi, trace, all_inner)


def single_level_train(
    problem,
    theta: Sequence[np.ndarray],
    phi: Sequence[np.ndarray] | None,
    steps: int,
    lr: float,
    optimizer: str = "sgd",
    seed: int = 0,
    reset_every: int | None = None,
) -> tuple[list[np.ndarray], list[float]]:
    """Plain training of ``theta`` on ``problem.inner_loss`` with ``phi`` frozen.

    Batches come from the same inner stream :func:`bilevel_train` uses for
    the same seed, so with a zero outer rate the two produce the same losses.
    """
    inner_rng, _ = batch_streams(seed)
    opt = make_optimizer(optimizer, lr)
    theta = _copy(theta)
    phi = list(phi or [])
    losses = []
    for k in range(steps):
        if reset_every and k % reset_every == 0:
            opt.reset()
        batch = problem.sample_inner_batch(inner_rng)
        value, grads = inner_step(problem, theta, phi, batch)
        losses.append(value)
        theta = opt.step(theta, grads)
    return theta, losses


def instruction_tuning_train(
    theta: Sequence[np.ndarray],
    tasks,
    mode: str,
    epochs: float,
    lr: float = 0.1,
    optimizer: str = "sgd",
    batch_size: int = 16,
    seed: int = 0,
    exemplars: dict | None = None,
    distractors: dict | None = None,
    frozen: tuple | None = None,
) -> tuple[list[np.ndarray], list[float]]:
    """Single-level instruction tuning on every task in ``tasks``.

    ``mode`` is one of ``definition``, ``exemplar_task``, ``exemplar_instance``,
    ``blank``, ``distractors`` or ``learned+definition``; the last needs
    ``frozen=(kind, params, pools)`` with fixed instruction parameters.
    """
    from .objectives import InstructionProblem

    tasks = list(tasks)
    n_instances = sum(len(t.instances) for t in tasks)
    steps = int(np.ceil(epochs * n_instances / batch_size))
    phi_arrays = None
    if mode == "learned+definition":
        if frozen is None:
            raise ValueError("learned+definition needs frozen instruction parameters")
        kind, params, pools = frozen
        problem = InstructionProblem(
            tasks, [], mode, kind, params, pools=pools, batch_size=batch_size, exemplars=exemplars or {}
        )
        phi_arrays = params.arrays()
    else:
        problem = InstructionProblem(
            tasks,
            [],
            mode,
            exemplars=exemplars or {},
            distractors=distractors or {},
            batch_size=batch_size,
        )
    return single_level_train(problem, theta, phi_arrays, steps, lr, optimizer, seed)
