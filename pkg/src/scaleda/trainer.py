"""Alternating three-flow adversarial training.

Each iteration draws a labelled source batch (scale theta) and an unlabelled
target batch (scale sigma), derives the target resized to theta, and then

1. updates the generator on ``seg + lambda_f * adv_feat + lambda_s * adv_scale``
   with both discriminators frozen,
2. updates the feature discriminator on source (z=1) vs resized target (z=0),
3. updates the scale discriminator on resized target (z=1) vs native target (z=0).

With ``feat_target="native"`` the feature discriminator sees the unresized
target instead, which is the plain single-discriminator baseline.

The discriminator logits on generator outputs are computed once and reused:
generator gradients are taken w.r.t. generator parameters only and
discriminator gradients w.r.t. discriminator parameters only, all before any
optimizer step. That is value-identical to running the phases back to back
on detached predictions, because no phase changes another phase's inputs.
"""
from __future__ import annotations

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
import torch.nn as nn

from .adversary import Discriminator, LossWeights, bce_logits, fool_loss_logits, seg_loss, total_gen_loss
from .core import Dataset, SOURCE_LABEL, TARGET_LABEL
from .metrics import EvalReport, evaluate
from .resample import match_scale_batch
from .scenegen import CLASS_NAMES, read_dataset
from .segnet import SegNet, SegNetConfig, load_state, save as save_segnet

log = logging.getLogger(__name__)

STATE_VERSION = 1


class NonFiniteLoss(RuntimeError):
    pass


class FreezeViolation(AssertionError):
    pass


@dataclass(frozen=True)
class OptimizerSpec:
    g_lr: float = 2.5e-4
    g_momentum: float = 0.9
    g_weight_decay: float = 1e-4
    d_lr: float = 1e-4
    d_betas: tuple[float, float] = (0.9, 0.999)
    power: float = 0.9

    def __post_init__(self):
        vals = (self.g_lr, self.g_momentum, self.g_weight_decay, self.d_lr, self.power) + tuple(self.d_betas)
        if any(v <= 0 for v in vals):
            raise ValueError("optimizer hyperparameters must be positive")


@dataclass
class TrainConfig:
    source_dir: str = ""
    target_dir: str = ""
    val_dir: Optional[str] = None
    max_iter: int = 3000
    batch_size: int = 4
    seed: int = 0
    lambda_f: float = 0.005
    lambda_s: float = 0.005
    enable_d_feat: bool = True
    enable_d_scale: bool = True
    enable_sam: bool = True
    decoder: str = "skip"
    feat_target: str = "matched"
    eval_interval: int = 500
    checkpoint_dir: Optional[str] = None
    resume: bool = False
    augment: bool = True
    check_freeze: bool = False
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)

    def validate(self) -> list[str]:
        problems = []
        if self.max_iter < 0:
            problems.append("max_iter must be >= 0")
        if self.batch_size < 2:
            problems.append("batch_size must be >= 2 (batch statistics)")
        if self.decoder not in ("skip", "plain"):
            problems.append("decoder must be 'skip' or 'plain'")
        if self.feat_target not in ("matched", "native"):
            problems.append("feat_target must be 'matched' or 'native'")
        if self.eval_interval < 1:
            problems.append("eval_interval must be >= 1")
        try:
            LossWeights(self.lambda_f, self.lambda_s)
        except ValueError as e:
            problems.append(str(e))
        return problems

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_f, self.lambda_s)


@dataclass
class IterationTrace:
    iter: int
    l_seg: float
    l_adv_feat: float
    l_adv_scale: float
    l_d_feat: float
    l_d_scale: float
    lr_g: float
    lr_d: float


def lr_at(base: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    """Polynomial decay ``base * (1 - iteration / max_iter) ** power``."""
    if iteration < 0 or iteration > max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    if max_iter == 0:
        return base
    return base * (1.0 - iteration / max_iter) ** power


def _snapshot(modules: dict[str, Optional[nn.Module]]):
    return [(f"{m}.{n}", p, p.detach().clone())
            for m, mod in modules.items() if mod is not None
            for n, p in mod.named_parameters()]


@contextmanager
def freeze_guard(phase: str, frozen: dict[str, Optional[nn.Module]], enabled: bool = True) -> Iterator[None]:
    """Raise FreezeViolation if any parameter of ``frozen`` changes inside the block."""
    snap = _snapshot(frozen) if enabled else []
    yield
    for name, param, before in snap:
        if not torch.equal(param.detach(), before):
            raise FreezeViolation(f"{phase} phase modified frozen parameter {name}")


def _stream_rng(seed: int, stream: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, stream, *key])


def sample_indices(n: int, batch: int, iteration: int, seed: int, stream: int) -> np.ndarray:
    """Infinite shuffled sampler as a pure function of the iteration number."""
    pos = iteration * batch + np.arange(batch)
    epochs = pos // n
    out = np.empty(batch, np.int64)
    for e in np.unique(epochs):
        perm = _stream_rng(seed, stream, int(e)).permutation(n)
        sel = epochs == e
        out[sel] = perm[pos[sel] % n]
    return out


def _augment(images: np.ndarray, labels: Optional[np.ndarray], seed: int, stream: int, iteration: int):
    ops = _stream_rng(seed, stream + 100, iteration).integers(0, 8, len(images))
    imgs, labs = [], []
    for i, op in enumerate(ops):
        k, flip = int(op) % 4, op >= 4
        im = np.rot90(images[i], k, axes=(-2, -1))
        if flip:
            im = im[..., ::-1]
        imgs.append(im)
        if labels is not None:
            lb = np.rot90(labels[i], k, axes=(-2, -1))
            labs.append(lb[..., ::-1] if flip else lb)
    return np.ascontiguousarray(np.stack(imgs)), (np.ascontiguousarray(np.stack(labs)) if labels is not None else None)


def _stack(ds: Dataset) -> np.ndarray:
    shapes = {t.shape for t in ds.tiles}
    if len(shapes) != 1:
        raise ValueError(f"training tiles must share one size, got {sorted(shapes)}")
    return np.stack([t.chw() for t in ds.tiles]).astype(np.float32)


def _generator_param_groups(g: nn.Module, spec: OptimizerSpec):
    decay, no_decay = [], []
    for name, p in g.named_parameters():
        # conv weights decay; biases and batch-norm affine terms do not
        (decay if p.dim() > 1 else no_decay).append(p)
    return [
        {"params": decay, "weight_decay": spec.g_weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


class Trainer:
    def __init__(self, config: TrainConfig, source: Dataset, target: Dataset, val: Optional[Dataset] = None):
        problems = config.validate()
        if problems:
            raise ValueError("invalid train config: " + "; ".join(problems))
        if source.masks is None:
            raise ValueError("source dataset must be labelled")
        self.config = config
        self.source, self.target, self.val = source, target, val
        self.num_classes = source.num_classes
        self.theta = source.gsd_m
        self.sigma = target.gsd_m
        self.src_images = _stack(source)
        self.src_labels = np.stack([np.asarray(m.labels) for m in source.masks]).astype(np.int64)
        self.tgt_images = _stack(target)
        self.uses_target = config.enable_d_feat or config.enable_d_scale

        k = self.num_classes
        self.g = SegNet(SegNetConfig(num_classes=k, use_sam=config.enable_sam, decoder=config.decoder, seed=config.seed))
        self.d_feat = Discriminator(k, seed=config.seed + 1) if config.enable_d_feat else None
        self.d_scale = Discriminator(k, seed=config.seed + 2) if config.enable_d_scale else None
        spec = config.optimizer
        self.opt_g = torch.optim.SGD(_generator_param_groups(self.g, spec), lr=spec.g_lr,
                                     momentum=spec.g_momentum, nesterov=True)
        self.opt_d_feat = torch.optim.Adam(self.d_feat.parameters(), lr=spec.d_lr, betas=spec.d_betas) if self.d_feat else None
        self.opt_d_scale = torch.optim.Adam(self.d_scale.parameters(), lr=spec.d_lr, betas=spec.d_betas) if self.d_scale else None
        self.iteration = 0
        self.trace: list[IterationTrace] = []
        self.history: list[dict] = []
        self.best_miou = -math.inf

    # -- batches ---------------------------------------------------------
    def batch(self, iteration: int):
        cfg = self.config
        si = sample_indices(len(self.src_images), cfg.batch_size, iteration, cfg.seed, 0)
        xs, ys = self.src_images[si], self.src_labels[si]
        xt = None
        if self.uses_target:
            ti = sample_indices(len(self.tgt_images), cfg.batch_size, iteration, cfg.seed, 1)
            xt = self.tgt_images[ti]
        if cfg.augment:
            xs, ys = _augment(xs, ys, cfg.seed, 0, iteration)
            if xt is not None:
                xt, _ = _augment(xt, None, cfg.seed, 1, iteration)
        return xs, ys, xt

    # -- one iteration ---------------------------------------------------
    def _set_lrs(self) -> tuple[float, float]:
        spec, cfg = self.config.optimizer, self.config
        lr_g = lr_at(spec.g_lr, self.iteration, cfg.max_iter, spec.power)
        lr_d = lr_at(spec.d_lr, self.iteration, cfg.max_iter, spec.power)
        for grp in self.opt_g.param_groups:
            grp["lr"] = lr_g
        for opt in (self.opt_d_feat, self.opt_d_scale):
            if opt is not None:
                for grp in opt.param_groups:
                    grp["lr"] = lr_d
        return lr_g, lr_d

    def _check(self, **terms) -> None:
        for name, value in terms.items():
            if not math.isfinite(value):
                raise NonFiniteLoss(f"non-finite {name} ({value}) at iteration {self.iteration}")

    @staticmethod
    def _step(opt, params, grads) -> None:
        for p, g in zip(params, grads):
            p.grad = None if g is None else g
        opt.step()

    def train_step(self, xs: np.ndarray, ys: np.ndarray, xt: Optional[np.ndarray]) -> IterationTrace:
        cfg = self.config
        lr_g, lr_d = self._set_lrs()
        g, d_feat, d_scale = self.g, self.d_feat, self.d_scale
        g.train()
        x_s = torch.from_numpy(xs)
        y_s = torch.from_numpy(ys)

        # (1) matched-scale target
        x_tt = x_ts = None
        if xt is not None:
            x_ts = torch.from_numpy(xt)
            if self.d_scale is not None or cfg.feat_target == "matched":
                x_tt = torch.from_numpy(np.ascontiguousarray(match_scale_batch(xt, self.sigma, self.theta)))

        # (2) generator objective
        p_s = torch.softmax(g(x_s), dim=1)
        l_seg = seg_loss(p_s, y_s)
        zero = torch.zeros((), dtype=l_seg.dtype)
        l_adv_feat = l_adv_scale = zero
        p_tt = p_ts = p_feat = logit_f_t = logit_s_ts = None
        native_feat = cfg.feat_target == "native"
        if d_scale is not None or (d_feat is not None and not native_feat):
            p_tt = torch.softmax(g(x_tt), dim=1)
        if d_scale is not None or (d_feat is not None and native_feat):
            p_ts = torch.softmax(g(x_ts), dim=1)
        if d_feat is not None:
            # the plain single-discriminator baseline compares against the unresized target
            p_feat = p_ts if native_feat else p_tt
            logit_f_t = d_feat(p_feat)
            l_adv_feat = fool_loss_logits(logit_f_t)
        if d_scale is not None:
            logit_s_ts = d_scale(p_ts)
            l_adv_scale = fool_loss_logits(logit_s_ts)
        l_gen = total_gen_loss(l_seg, l_adv_feat, l_adv_scale, cfg.weights)
        self._check(l_seg=l_seg.item(), l_adv_feat=l_adv_feat.item(), l_adv_scale=l_adv_scale.item())

        g_params = list(g.parameters())
        need_d = d_feat is not None or d_scale is not None
        g_grads = torch.autograd.grad(l_gen, g_params, retain_graph=need_d, allow_unused=True)

        # (3)/(4) discriminator objectives on generator outputs, G held fixed
        l_d_feat = l_d_scale = zero
        df_grads = ds_grads = None
        if d_feat is not None:
            l_d_feat = 0.5 * (bce_logits(d_feat(p_s.detach()), SOURCE_LABEL) + bce_logits(logit_f_t, TARGET_LABEL))
            df_grads = torch.autograd.grad(l_d_feat, list(d_feat.parameters()), retain_graph=d_scale is not None)
        if d_scale is not None:
            l_d_scale = 0.5 * (bce_logits(d_scale(p_tt.detach()), SOURCE_LABEL) + bce_logits(logit_s_ts, TARGET_LABEL))
            ds_grads = torch.autograd.grad(l_d_scale, list(d_scale.parameters()))
        self._check(l_d_feat=l_d_feat.item(), l_d_scale=l_d_scale.item())

        guard = cfg.check_freeze
        with freeze_guard("G", {"d_feat": d_feat, "d_scale": d_scale}, guard):
            self._step(self.opt_g, g_params, g_grads)
        if d_feat is not None:
            with freeze_guard("D_feat", {"g": g, "d_scale": d_scale}, guard):
                self._step(self.opt_d_feat, list(d_feat.parameters()), df_grads)
        if d_scale is not None:
            with freeze_guard("D_scale", {"g": g, "d_feat": d_feat}, guard):
                self._step(self.opt_d_scale, list(d_scale.parameters()), ds_grads)

        tr = IterationTrace(self.iteration, l_seg.item(), l_adv_feat.item(), l_adv_scale.item(),
                            l_d_feat.item(), l_d_scale.item(), lr_g, lr_d)
        self.trace.append(tr)
        self.iteration += 1
        return tr

    def step(self) -> IterationTrace:
        return self.train_step(*self.batch(self.iteration))

    # -- state -----------------------------------------------------------
    def modules(self) -> dict[str, Optional[nn.Module]]:
        return {"g": self.g, "d_feat": self.d_feat, "d_scale": self.d_scale}

    def state_dict(self) -> dict:
        state = {
            "state_version": STATE_VERSION,
            "iteration": self.iteration,
            "config": _config_dict(self.config),
            "trace": [asdict(t) for t in self.trace],
            "history": self.history,
            "best_miou": self.best_miou,
            "opt_g": self.opt_g.state_dict(),
        }
        for name, mod in self.modules().items():
            if mod is not None:
                state[name] = mod.state_dict()
        for name in ("opt_d_feat", "opt_d_scale"):
            opt = getattr(self, name)
            if opt is not None:
                state[name] = opt.state_dict()
        return state

    def load_state_dict(self, state: dict) -> None:
        if state.get("state_version") != STATE_VERSION:
            raise ValueError(f"unsupported training state version {state.get('state_version')!r}")
        for name, mod in self.modules().items():
            if mod is not None:
                if name not in state:
                    raise KeyError(f"training state lacks {name!r}")
                load_state(mod, state[name])
        self.opt_g.load_state_dict(state["opt_g"])
        for name in ("opt_d_feat", "opt_d_scale"):
            opt = getattr(self, name)
            if opt is not None:
                opt.load_state_dict(state[name])
        self.iteration = int(state["iteration"])
        self.trace = [IterationTrace(**t) for t in state["trace"]]
        self.history = list(state["history"])
        self.best_miou = float(state["best_miou"])

    def evaluate(self, dataset: Optional[Dataset] = None) -> EvalReport:
        ds = dataset if dataset is not None else self.val
        return evaluate(self.g, ds, CLASS_NAMES[: ds.num_classes] if ds.num_classes == len(CLASS_NAMES) else ())


def _config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["optimizer"]["d_betas"] = list(cfg.optimizer.d_betas)
    return d


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    opt = dict(d.pop("optimizer", {}) or {})
    if "d_betas" in opt:
        opt["d_betas"] = tuple(opt["d_betas"])
    return TrainConfig(**d, optimizer=OptimizerSpec(**opt))


@dataclass
class RunResult:
    trainer: Trainer
    final_checkpoint: Optional[Path]
    trace_path: Optional[Path]
    history: list[dict]


def run_datasets(config: TrainConfig, source: Dataset, target: Dataset, val: Optional[Dataset] = None,
                 until: Optional[int] = None, verbose: bool = False) -> RunResult:
    """Train on in-memory datasets; ``until`` stops early (for interruption/resume)."""
    tr = Trainer(config, source, target, val)
    ckdir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    trace_path = None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
        trace_path = ckdir / "trace.jsonl"
        last = ckdir / "last.pt"
        if config.resume and last.is_file():
            tr.load_state_dict(torch.load(last, map_location="cpu", weights_only=False))
            log.info("resumed from %s at iteration %d", last, tr.iteration)
        # the state's trace is authoritative; rewrite so the file never holds orphaned lines
        with open(trace_path, "w") as fh:
            for t in tr.trace:
                fh.write(json.dumps(asdict(t)) + "\n")
        if tr.iteration == 0:
            torch.save(tr.state_dict(), last)

    stop = config.max_iter if until is None else min(until, config.max_iter)
    fh = open(trace_path, "a") if trace_path else None
    try:
        while tr.iteration < stop:
            t = tr.step()
            if fh:
                fh.write(json.dumps(asdict(t)) + "\n")
                fh.flush()
            if tr.iteration % config.eval_interval == 0 or tr.iteration == config.max_iter:
                _checkpoint(tr, ckdir, verbose)
    finally:
        if fh:
            fh.close()

    final = None
    if ckdir is not None and tr.iteration == config.max_iter:
        final = ckdir / "final.pt"
        save_segnet(tr.g, final, extra={"iteration": tr.iteration})
        (ckdir / "history.json").write_text(json.dumps(tr.history, indent=2))
    return RunResult(tr, final, trace_path, tr.history)


def _checkpoint(tr: Trainer, ckdir: Optional[Path], verbose: bool) -> None:
    entry = {"iter": tr.iteration}
    if tr.val is not None:
        rep = tr.evaluate()
        entry.update(miou=rep.miou, per_class_iou=rep.per_class_iou)
        if rep.miou > tr.best_miou:
            tr.best_miou = rep.miou
            if ckdir is not None:
                save_segnet(tr.g, ckdir / "best.pt", extra={"iteration": tr.iteration, "miou": rep.miou})
    tr.history.append(entry)
    if verbose:
        last = tr.trace[-1]
        msg = f"iter {tr.iteration:6d}  l_seg {last.l_seg:.4f}  l_adv_feat {last.l_adv_feat:.4f}  l_adv_scale {last.l_adv_scale:.4f}"
        if "miou" in entry:
            msg += f"  mIoU {100 * entry['miou']:.2f}"
        print(msg, flush=True)
    if ckdir is not None:
        torch.save(tr.state_dict(), ckdir / "last.pt")


def run(config: TrainConfig, until: Optional[int] = None, verbose: bool = False) -> RunResult:
    """Load the configured dataset directories and train."""
    source = read_dataset(config.source_dir)
    target = read_dataset(config.target_dir, with_masks=False)
    val = read_dataset(config.val_dir) if config.val_dir else None
    return run_datasets(config, source, target, val, until=until, verbose=verbose)
