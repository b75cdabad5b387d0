"""Desk-scale multitask fine-tuning of adapters on a frozen linear layer.

Tasks regress ``x @ (base + delta_t)`` from short token sequences. Every
task's inputs share the same Gaussian token distribution plus a task key
direction, so task identity is recoverable from the tokens but a single
input-independent weight update cannot fit all tasks at once.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .baselines import GatedMoeFfn, LoraMixture, PlainLora
from .omni import TEXT, VISUAL, TokenBatch, init_omni
from .serialization import model_from_dict, model_to_dict

logger = logging.getLogger(__name__)

ARMS = ("omni-smola", "plain-lora", "gated-moe", "lora-mixture")
_SPLITS = {"train": 0, "val": 1}


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, arm=None):
        where = f" in arm {arm!r}" if arm else ""
        super().__init__(f"loss became non-finite at step {step}{where}")
        self.step = step
        self.arm = arm


@dataclass
class SyntheticTask:
    task_id: int
    target_map: np.ndarray
    modality_profile: float
    noise_std: float
    base: np.ndarray = field(repr=False)
    key: np.ndarray = field(repr=False)
    seed: int = 0
    tokens_per_example: int = 2

    def example(self, split, index, stream=0):
        """One (TokenBatch, target) pair, regenerated from
        (seed, task, split, stream, index)."""
        rng = nk.Rng(self.seed).spawn(self.task_id, _SPLITS[split], stream, index)
        n, d1 = self.tokens_per_example, self.base.shape[0]
        x = rng.normal((n, d1)) + self.key
        n_visual = int(round(self.modality_profile * n))
        modality = [VISUAL] * n_visual + [TEXT] * (n - n_visual)
        y = nk.matmul(x, self.base) + nk.matmul(x, self.target_map)
        if self.noise_std > 0:
            y = y + rng.normal(y.shape, std=self.noise_std)
        return TokenBatch(x, modality), y

    def batch(self, split, start, size, stream=0):
        return [self.example(split, start + i, stream) for i in range(size)]


def make_mixture(num_tasks, d_in, d_out, seed, task_rank=2, key_scale=2.0,
                 delta_scale=1.0, noise_std=0.0, modality_profile=0.5,
                 tokens_per_example=2, conflict="orthogonal", base=None):
    """Synthetic task list sharing one frozen base.

    ``conflict="orthogonal"`` gives each task a rank-``task_rank`` update
    ``A_t @ B_t.T`` whose input factors ``A_t`` are mutually orthogonal (and
    orthogonal to the task keys); ``"opposed"`` additionally pairs tasks so
    that task ``2k+1`` uses the negated update of task ``2k``. ``delta_scale
    = 0`` yields tasks that the base fits exactly.
    """
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    rng = nk.Rng(seed)
    if base is None:
        base = rng.normal((d_in, d_out), std=1.0 / math.sqrt(d_in))
    base = nk.as_matrix(base, "base")
    needed = num_tasks * (task_rank + 1)
    if needed > d_in:
        raise ValueError(f"d_in={d_in} too small for {num_tasks} tasks of rank {task_rank}")
    # one orthonormal frame: first num_tasks columns are keys, the rest input factors
    frame, _ = np.linalg.qr(rng.normal((d_in, needed)))
    frame = frame * np.sign(np.diag(frame[:needed]))
    tasks = []
    for t in range(num_tasks):
        key = key_scale * frame[:, t]
        if conflict == "opposed" and t % 2 == 1:
            delta = -tasks[t - 1].target_map
        elif conflict in ("orthogonal", "opposed"):
            lo = num_tasks + t * task_rank
            a = frame[:, lo:lo + task_rank]
            b = rng.normal((d_out, task_rank), std=delta_scale)
            delta = a @ b.T
        else:
            raise ValueError(f"unknown conflict mode {conflict!r}")
        tasks.append(SyntheticTask(t, delta, modality_profile, noise_std, base, key,
                                   seed, tokens_per_example))
    return tasks


# -- loss -----------------------------------------------------------------------

def task_loss(model, examples, with_grad=False):
    """Mean squared error over every output entry of a task batch.

    With ``with_grad`` also returns the summed parameter gradients.
    """
    total = 0.0
    count = sum(y.size for _, y in examples)
    grads = None
    for batch, target in examples:
        pred, cache = model.forward(batch)
        resid = pred - target
        total += float(np.sum(resid * resid))
        if with_grad:
            g, _ = model.backward(cache, (2.0 / count) * resid)
            if grads is None:
                grads = g
            else:
                for k in grads:
                    grads[k] = grads[k] + g[k]
    loss = total / count
    return (loss, grads) if with_grad else loss


def multitask_loss(model, batch_per_task):
    """Unit-weight sum of per-task MSE. Returns ``(total, per_task)``."""
    if not batch_per_task:
        raise ValueError("need at least one task batch")
    per_task = [task_loss(model, ex) for ex in batch_per_task]
    return float(sum(per_task)), per_task


# -- training ---------------------------------------------------------------

def base_digest(base):
    return hashlib.sha256(np.ascontiguousarray(base).tobytes()).hexdigest()


@dataclass
class TrainState:
    model: object
    velocity: dict
    step: int = 0
    best_validation: float = -math.inf
    best_step: int = -1
    best_checkpoint: dict | None = None
    log: list = field(default_factory=list)
    base_hash: str = ""

    def to_dict(self):
        return {
            "model": model_to_dict(self.model),
            "velocity": {k: {"shape": list(v.shape), "csv": nk.matrix_to_csv(v.reshape(1, -1))}
                         for k, v in self.velocity.items()},
            "step": self.step,
            "best_validation": self.best_validation,
            "best_step": self.best_step,
            "best_checkpoint": self.best_checkpoint,
            "log": self.log,
            "base_hash": self.base_hash,
        }

    @classmethod
    def from_dict(cls, doc, base):
        model = model_from_dict(doc["model"], base)
        velocity = {k: nk.matrix_from_csv(v["csv"]).reshape(v["shape"])
                    for k, v in doc["velocity"].items()}
        return cls(model, velocity, doc["step"], doc["best_validation"], doc["best_step"],
                   doc["best_checkpoint"], doc["log"], doc["base_hash"])

    def best_model(self, base):
        return model_from_dict(self.best_checkpoint, base)


def evaluate(model, tasks, val_examples):
    per_task = [task_loss(model, t.batch("val", 0, val_examples)) for t in tasks]
    return per_task, -float(np.mean(per_task))


def train(model, tasks, steps, lr, eval_every=100, seed=0, batch_size=4,
          val_examples=16, momentum=0.9, state=None, arm=None, on_eval=None):
    """Momentum gradient descent on adapter parameters only.

    Batches for step ``s`` are examples ``[s * batch_size, (s+1) * batch_size)``
    of each task's training stream ``seed``, so a run resumed from ``state`` sees
    exactly the data an uninterrupted run would. Validation (average negative
    MSE over tasks) runs at step 0, every ``eval_every`` steps and at the
    last step; the best-scoring parameters are kept in the state.
    """
    if not lr >= 0:
        raise ValueError("lr must be nonnegative")
    if state is None:
        state = TrainState(model, {k: np.zeros_like(v) for k, v in model.params().items()},
                           base_hash=base_digest(model.base))
    model = state.model
    if base_digest(model.base) != state.base_hash:
        raise RuntimeError("frozen base weight changed between checkpoints")

    def record():
        per_task, score = evaluate(model, tasks, val_examples)
        if not all(math.isfinite(v) for v in per_task):
            raise TrainingDiverged(state.step, arm)
        entry = {"step": state.step, "per_task_loss": per_task, "avg": float(np.mean(per_task))}
        state.log.append(entry)
        if on_eval is not None:
            on_eval(entry)
        if score > state.best_validation:
            state.best_validation = score
            state.best_step = state.step
            state.best_checkpoint = model_to_dict(model)
        logger.debug("step %d avg loss %.6g", state.step, entry["avg"])

    # divergence is detected explicitly, so overflow warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        if not state.log or state.log[-1]["step"] != state.step:
            record()
        while state.step < steps:
            grads = None
            for t in tasks:
                examples = t.batch("train", state.step * batch_size, batch_size, stream=seed)
                loss, g = task_loss(model, examples, with_grad=True)
                if not math.isfinite(loss):
                    raise TrainingDiverged(state.step, arm)
                if grads is None:
                    grads = g
                else:
                    for k in grads:
                        grads[k] = grads[k] + g[k]
            params = model.params()
            for k, v in state.velocity.items():
                v *= momentum
                v += grads[k]
                params[k] = params[k] - lr * v
            model.set_params(params)
            state.step += 1
            if state.step % eval_every == 0 or state.step == steps:
                record()
    if base_digest(model.base) != state.base_hash:
        raise RuntimeError("frozen base weight was modified during training")
    return state


def save_state(path, state):
    with open(path, "w") as fh:
        json.dump(state.to_dict(), fh)


def load_state(path, base):
    with open(path) as fh:
        return TrainState.from_dict(json.load(fh), base)


# -- arms -------------------------------------------------------------------

def omni_param_count(d_in, d_out, num_experts, rank):
    return 3 * (num_experts * d_in + 1 + num_experts * rank * (d_in + d_out))


def make_arm(name, base, num_experts=8, rank=2, seed=0, budget=None):
    """Adapter for one experiment arm, sized to roughly ``budget`` trainable
    parameters (default: the Omni adapter's count)."""
    base = nk.as_matrix(base, "base")
    d1, d2 = base.shape
    if budget is None:
        budget = omni_param_count(d1, d2, num_experts, rank)
    if name == "omni-smola":
        return init_omni(base, num_experts, rank, seed=seed)
    if name == "plain-lora":
        r = max(1, min(d1, d2, round(budget / (d1 + d2))))
        return PlainLora.init(base, r, seed=seed)
    if name == "gated-moe":
        hidden = max(1, round((budget - num_experts * d1) / (num_experts * (d1 + d2))))
        return GatedMoeFfn.init(base, num_experts, hidden, seed=seed)
    if name == "lora-mixture":
        r = max(1, min(d1, d2, round((budget - num_experts * d1) / (num_experts * (d1 + d2)))))
        return LoraMixture.init(base, num_experts, r, seed=seed)
    raise ValueError(f"unknown arm {name!r}; choose from {ARMS}")


def param_count(model):
    return int(sum(v.size for v in model.params().values()))
