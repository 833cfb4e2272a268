"""Joint multi-task training.

Each batch slot draws its task through a two-level plan (a coin between
the compositional group and the generation/editing group, then uniform
within the group) so the four tasks arrive in equal proportion in the
joint mode. The restricted modes used for comparisons draw from a subset.

Condition dropout is one categorical draw per sample: keep everything,
drop the conditioning latent, drop the multimodal instruction, or drop
both. The two frozen encoders are fingerprinted at the start of training
and re-checked against bit drift at every checkpoint and at the end.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .checkpoints import (
    decode_rng,
    encode_rng,
    load_module,
    load_optimizer,
    load_tensors,
    module_tensors,
    optimizer_tensors,
    save_tensors,
)
from .config import ConfigError, RunConfig, config_from_dict, config_hash, config_to_dict
from .diffusion import training_loss
from .forge import TASKS, ExhaustedDataset
from .model import EditorModel

REFERENCE_LR = 1e-5  # published regime; the default here is larger on purpose

MODES = ("joint", "only_subject", "only_edit", "only_compositional", "subject_plus_edit")

_MODE_POOLS = {
    "only_subject": ("subject_gen",),
    "only_edit": ("edit",),
    "only_compositional": ("comp_add", "comp_replace"),
    "subject_plus_edit": ("subject_gen", "edit"),
}


class NonFiniteLoss(RuntimeError):
    """Training loss left the finite range; diagnostics are dumped first."""


def split_by_task(samples: list) -> dict:
    pools = {t: [] for t in TASKS}
    for s in samples:
        if s.task not in pools:
            raise ValueError(f"unknown task {s.task!r}")
        pools[s.task].append(s)
    return pools


class SamplingPlan:
    """Maps a training mode to per-slot task draws."""

    def __init__(self, mode: str, group_a: tuple, group_b: tuple, p_group_a: float = 0.5):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        self.group_a = tuple(group_a)
        self.group_b = tuple(group_b)
        self.p_group_a = p_group_a

    def tasks_used(self) -> tuple:
        if self.mode == "joint":
            return self.group_a + self.group_b
        return _MODE_POOLS[self.mode]

    def draw_task(self, rng: np.random.Generator) -> str:
        if self.mode == "joint":
            group = self.group_a if rng.random() < self.p_group_a else self.group_b
        else:
            group = _MODE_POOLS[self.mode]
        return group[rng.integers(len(group))]

    def draw_batch(self, pools: dict, batch_size: int, rng: np.random.Generator) -> list:
        batch = []
        for _ in range(batch_size):
            task = self.draw_task(rng)
            pool = pools.get(task, ())
            if not pool:
                raise ExhaustedDataset(f"no {task!r} samples available for mode {self.mode!r}")
            batch.append(pool[rng.integers(len(pool))])
        return batch


class DropoutPolicy:
    """Single categorical draw per sample over the four dropout outcomes."""

    def __init__(self, p_cond: float, p_mm: float, p_both: float):
        p_none = 1.0 - p_cond - p_mm - p_both
        if min(p_cond, p_mm, p_both, p_none) < 0.0:
            raise ValueError(f"dropout probabilities invalid: {p_cond}, {p_mm}, {p_both}")
        self.probs = np.array([p_none, p_cond, p_mm, p_both])
        self.flags = ((False, False), (True, False), (False, True), (True, True))

    def apply(self, samples: list, rng: np.random.Generator) -> list:
        out = []
        for s in samples:
            k = int(rng.choice(4, p=self.probs))
            drop_cond, drop_mm = self.flags[k]
            if drop_cond or drop_mm:
                s = dataclasses.replace(s, drop_cond_input=drop_cond, drop_mm=drop_mm)
            out.append(s)
        return out


class Trainer:
    def __init__(self, cfg: RunConfig, model: EditorModel, samples: list, run_dir):
        self.cfg = cfg
        self.model = model
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        t = cfg.train
        self.pools = split_by_task(samples)
        self.plan = SamplingPlan(t.mode, t.group_a, t.group_b, t.p_group_a)
        for task in self.plan.tasks_used():
            if not self.pools[task]:
                raise ExhaustedDataset(f"mode {t.mode!r} needs {task!r} samples but the dataset has none")
        self.dropout = DropoutPolicy(t.p_drop_cond, t.p_drop_mm, t.p_drop_both)
        self.params = list(model.trainable_parameters())
        self.opt = torch.optim.AdamW(self.params, lr=t.lr, weight_decay=t.weight_decay)
        self.np_rng = np.random.default_rng(t.seed)
        self.torch_gen = torch.Generator().manual_seed(t.seed)
        self.step_num = 0
        self.history = []  # (step, loss) pairs at log_every resolution
        self._fingerprint = model.frozen_fingerprint()
        self._n_samples = len(samples)
        self._feat_cache = {}  # frozen-encoder outputs per sample id

    # ----- integrity -----

    def check_frozen(self):
        if not torch.equal(self.model.frozen_fingerprint(), self._fingerprint):
            raise RuntimeError("frozen encoder weights drifted during training")

    # ----- manifest -----

    def write_manifest(self, dataset_hash: Optional[str] = None, extra: Optional[dict] = None):
        t = self.cfg.train
        manifest = {
            "config": config_to_dict(self.cfg),
            "config_hash": config_hash(self.cfg),
            "mode": t.mode,
            "n_samples": self._n_samples,
            "steps_planned": t.steps,
            "lr": t.lr,
            "reference_lr": REFERENCE_LR,
            "lr_note": (
                "matches the reference regime"
                if t.lr == REFERENCE_LR
                else f"lr {t.lr} deviates from the reference {REFERENCE_LR} to fit the small-scale budget"
            ),
        }
        if dataset_hash is not None:
            manifest["dataset_hash"] = dataset_hash
        if extra:
            manifest.update(extra)
        with open(self.run_dir / "manifest.json", "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        return manifest

    # ----- single step -----

    def _lr_at(self, step: int) -> float:
        """Learning rate for a given step, a pure function of the step index
        so resumed runs retrace the same schedule."""
        t = self.cfg.train
        if t.lr_schedule == "constant":
            return t.lr
        if t.lr_schedule == "cosine":
            frac = min(step / max(t.steps, 1), 1.0)
            return t.lr * (0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * frac)))
        raise ConfigError(f"unknown lr_schedule {t.lr_schedule!r}, expected 'constant' or 'cosine'")

    def train_step(self) -> float:
        t = self.cfg.train
        batch = self.plan.draw_batch(self.pools, t.batch_size, self.np_rng)
        batch = self.dropout.apply(batch, self.np_rng)
        enc = self.model.prepare_batch(batch, cache=self._feat_cache)
        B = enc["x0"].shape[0]
        steps_t = torch.randint(0, self.model.schedule.n_steps, (B,), generator=self.torch_gen)
        noise = torch.randn(enc["x0"].shape, generator=self.torch_gen)
        loss = training_loss(
            self.model.denoiser,
            self.model.schedule,
            enc["x0"],
            enc["cond_latent"],
            steps_t,
            enc["cond_tokens"],
            enc["cond_pad_mask"],
            noise=noise,
        )
        if not torch.isfinite(loss):
            self._dump_nonfinite(batch, steps_t, loss)
            raise NonFiniteLoss(f"loss became non-finite at step {self.step_num}")
        self.opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(self.params, t.grad_clip)
        lr = self._lr_at(self.step_num)
        for group in self.opt.param_groups:
            group["lr"] = lr
        self.opt.step()
        self.step_num += 1
        return float(loss.detach())

    def _dump_nonfinite(self, batch, steps_t, loss):
        dump = {
            "step": self.step_num,
            "loss": repr(float(loss.detach())),
            "tasks": [s.task for s in batch],
            "sample_ids": [s.sample_id for s in batch],
            "timesteps": steps_t.tolist(),
            "grad_norms": {
                n: float(p.grad.norm()) for n, p in self.model.named_parameters() if p.grad is not None
            },
        }
        with open(self.run_dir / "nonfinite_dump.json", "w", encoding="utf-8") as f:
            json.dump(dump, f, indent=2)

    # ----- loop -----

    def train(self, n_steps: Optional[int] = None, log=None) -> dict:
        t = self.cfg.train
        n_steps = t.steps if n_steps is None else n_steps
        target = self.step_num + n_steps
        running = []
        while self.step_num < target:
            loss = self.train_step()
            running.append(loss)
            if self.step_num % t.log_every == 0 or self.step_num == target:
                avg = sum(running) / len(running)
                self.history.append((self.step_num, avg))
                running = []
                if log is not None:
                    log(self.step_num, avg)
            if t.ckpt_every and self.step_num % t.ckpt_every == 0 and self.step_num < target:
                self.save_checkpoint(self.run_dir / f"ckpt_{self.step_num:06d}.sdt")
        self.check_frozen()
        final = self.run_dir / "ckpt_final.sdt"
        self.save_checkpoint(final)
        return {
            "steps": self.step_num,
            "final_loss": self.history[-1][1] if self.history else None,
            "checkpoint": str(final),
        }

    # ----- persistence -----

    def save_checkpoint(self, path):
        self.check_frozen()
        tensors = module_tensors(self.model)
        opt_tensors, opt_aux = optimizer_tensors(self.opt)
        tensors.update(opt_tensors)
        meta = {
            "kind": "trainer_state",
            "config": config_to_dict(self.cfg),
            "step": self.step_num,
            "history": self.history,
            "opt_aux": opt_aux,
            "rng": encode_rng(self.torch_gen, self.np_rng),
        }
        save_tensors(path, tensors, meta)

    @classmethod
    def resume(cls, path, samples: list, run_dir=None) -> "Trainer":
        """Rebuild a trainer mid-run; continues bit-identically."""
        from .backbones import build_backbones, freeze
        from .model import EditorModel

        tensors, meta = load_tensors(path)
        if meta.get("kind") != "trainer_state":
            raise ValueError(f"not a trainer checkpoint: {path}")
        cfg = config_from_dict(meta["config"])
        ae, sem = build_backbones(cfg.backbone, seed=0)
        model = EditorModel(cfg, ae, sem)
        load_module(model, {k: v for k, v in tensors.items() if not k.startswith("opt.")})
        freeze(model.ae)
        freeze(model.sem)
        trainer = cls(cfg, model, samples, run_dir or Path(path).parent)
        trainer._fingerprint = model.frozen_fingerprint()
        load_optimizer(trainer.opt, tensors, meta["opt_aux"])
        decode_rng(meta["rng"], trainer.torch_gen, trainer.np_rng)
        trainer.step_num = meta["step"]
        trainer.history = [tuple(h) for h in meta["history"]]
        return trainer
