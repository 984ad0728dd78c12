"""Loss functions, Adam, and the alternating adversarial training loop.

Per batch the discriminator is stepped first (on a detached synthesis), then
the generator, optionally through the freshly updated discriminator.  All
stochasticity derives from (seed, epoch), so runs are reproducible and a
checkpoint written at an epoch boundary resumes bit-for-bit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import PairedSample, TaskSpec, denormalize, sample_arrays
from .discriminator import PatchDiscriminator
from .generator import Generator, GeneratorConfig, build_generator
from .layers import Module, Parameter
from .metrics import MetricReport, ImageMetrics, build_report, psnr, ssim
from .tensor import ConfigError, NumericError, Tape, Tensor, backward

__all__ = [
    "TrainConfig",
    "Adam",
    "generator_loss",
    "discriminator_loss",
    "train",
    "refresh_norm_statistics",
    "TrainResult",
    "TrainingDiverged",
    "evaluate_model",
    "synthesize",
]

LOSS_MODES = ("literal", "conventional")


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_pix: float = 100.0
    lambda_adv: float = 1.0
    epochs: int = 60
    batch_size: int = 1
    seed: int = 0
    checkpoint_every: int = 10          # epochs
    loss_mode: str = "literal"
    max_iterations: "int | None" = None
    disc_base_width: int = 64
    flip_augment: bool = False
    validate_every: int = 1             # epochs
    # optional quality target on the training set: stop once reached
    target_train_psnr: "float | None" = None
    target_train_ssim: "float | None" = None
    target_check_every: int = 100       # iterations
    refresh_norm_stats: bool = True     # pin running stats to the population before evals

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.lambda_pix < 0 or self.lambda_adv < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.epochs < 1:
            raise ConfigError("need at least one epoch")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")


class TrainingDiverged(Exception):
    def __init__(self, message: str, last_checkpoint: "Path | None"):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


# -- optimizer -----------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a named parameter set; one shared step counter."""

    def __init__(self, params: dict[str, Parameter], learning_rate: float,
                 beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros(p.shape, dtype=p.data.dtype) for n, p in self.params.items()}
        self.v = {n: np.zeros(p.shape, dtype=p.data.dtype) for n, p in self.params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"NaN/Inf gradient for parameter '{name}'")
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.assign(p.data - update)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for n in self.params:
            out[f"{prefix}m.{n}"] = self.m[n]
            out[f"{prefix}v.{n}"] = self.v[n]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str, step_count: int) -> None:
        for n in self.params:
            self.m[n] = arrays[f"{prefix}m.{n}"].astype(self.m[n].dtype)
            self.v[n] = arrays[f"{prefix}v.{n}"].astype(self.v[n].dtype)
        self.step_count = step_count


# -- losses --------------------------------------------------------------------


def _scalar(value: float, dtype) -> Tensor:
    return Tensor._wrap(np.asarray(value, dtype=dtype))


def generator_loss(y_syn: Tensor, y_act: Tensor, d_scores_syn: "Tensor | None",
                   d_scores_act: "Tensor | None", lambda_pix: float,
                   lambda_adv: float, mode: str = "literal") -> tuple[Tensor, dict]:
    """Pixel term plus adversarial term.

    "literal" mode scores the synthesis against both discriminator terms with
    a negative sign (the generator maximizes the discriminator's objective);
    "conventional" mode is the usual least-squares orientation pushing
    synthetic scores toward the real label (0 here).
    """
    dt = y_syn.dtype
    l1 = T.reduce_mean(T.absolute(T.sub(y_syn, y_act)))
    loss = T.mul(_scalar(lambda_pix, dt), l1)
    parts = {"l1": float(l1.data), "adv_g": 0.0}
    if lambda_adv > 0 and d_scores_syn is not None:
        one = _scalar(1.0, dt)
        syn_gap = T.sub(d_scores_syn, one)
        if mode == "literal":
            act_term = T.reduce_mean(T.mul(d_scores_act, d_scores_act))
            syn_term = T.reduce_mean(T.mul(syn_gap, syn_gap))
            adv = T.neg(T.add(act_term, syn_term))
        elif mode == "conventional":
            adv = T.reduce_mean(T.mul(d_scores_syn, d_scores_syn))
        else:
            raise ConfigError(f"unknown loss mode '{mode}'")
        parts["adv_g"] = float(adv.data)
        loss = T.add(loss, T.mul(_scalar(lambda_adv, dt), adv))
    parts["loss_g"] = float(loss.data)
    return loss, parts


def discriminator_loss(d_scores_act: Tensor, d_scores_syn: Tensor) -> Tensor:
    """Real scores are pushed toward 0, synthetic scores toward 1."""
    dt = d_scores_act.dtype
    one = _scalar(1.0, dt)
    gap = T.sub(d_scores_syn, one)
    return T.add(
        T.reduce_mean(T.mul(d_scores_act, d_scores_act)),
        T.reduce_mean(T.mul(gap, gap)),
    )


# -- evaluation helpers -----------------------------------------------------------


def refresh_norm_statistics(generator: Generator, samples: list[PairedSample],
                            task: TaskSpec) -> None:
    """Recompute batch-norm running statistics from the full sample set.

    Running statistics updated online lag the weights they normalize for.
    One forward pass over all samples with momentum forced to 1 pins the
    running statistics to the population statistics of the current weights,
    so eval-mode synthesis matches what training-mode batches saw.
    """
    from .layers import BatchNorm2D

    norms = [m for m in generator.modules() if isinstance(m, BatchNorm2D)]
    if not norms:
        return
    was_training = generator.training
    generator.train()
    saved = [bn.momentum for bn in norms]
    for bn in norms:
        bn.momentum = 1.0
    try:
        stack = np.stack([sample_arrays(s, task)[0] for s in samples])
        generator(Tensor(stack.astype(generator.config.dtype)))
    finally:
        for bn, m in zip(norms, saved):
            bn.momentum = m
        generator.train(was_training)


def synthesize(generator: Generator, source_stack: np.ndarray) -> np.ndarray:
    """Eval-mode forward pass on a (I, H, W) stack -> (1, H, W) synthesis."""
    was_training = generator.training
    generator.eval()
    try:
        y = generator(Tensor(source_stack.astype(generator.config.dtype)))
    finally:
        generator.train(was_training)
    return y.data


def evaluate_model(generator: Generator, samples: list[PairedSample], task: TaskSpec,
                   target_range: tuple[float, float]) -> MetricReport:
    lo, hi = target_range
    rows = []
    for s in samples:
        x, y = sample_arrays(s, task)
        y_hat = synthesize(generator, x)
        rows.append(
            ImageMetrics(
                ident=f"{s.subject}/{s.index}",
                psnr=psnr(denormalize(y_hat[0], lo, hi), denormalize(y[0], lo, hi), hi - lo),
                ssim=ssim(denormalize(y_hat[0], lo, hi), denormalize(y[0], lo, hi), hi - lo),
            )
        )
    return build_report(str(task), rows)


# -- training loop ------------------------------------------------------------------


@dataclass
class TrainResult:
    iterations: int
    epochs_run: int
    log_path: Path
    final_checkpoint: "Path | None"
    last_train_report: "MetricReport | None" = None
    stopped_on_target: bool = False


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _stack_batch(samples, task, idxs, flip_mask):
    xs, ys = [], []
    for pos, i in enumerate(idxs):
        x, y = sample_arrays(samples[i], task)
        if flip_mask is not None and flip_mask[pos]:
            x, y = np.flip(x, axis=-1).copy(), np.flip(y, axis=-1).copy()
        xs.append(x)
        ys.append(y)
    return Tensor(np.stack(xs)), Tensor(np.stack(ys))


def _checkpoint_arrays(gen, disc, adam_g, adam_d):
    arrays = {f"gen.{n}": p.data for n, p in gen.named_parameters()}
    arrays.update({f"gen.buf.{n}": b for n, b in gen.named_buffers()})
    if disc is not None:
        arrays.update({f"disc.{n}": p.data for n, p in disc.named_parameters()})
        arrays.update({f"disc.buf.{n}": b for n, b in disc.named_buffers()})
    arrays.update(adam_g.state_arrays("opt_g."))
    if adam_d is not None:
        arrays.update(adam_d.state_arrays("opt_d."))
    return arrays


def save_training_checkpoint(path, gen, disc, adam_g, adam_d, meta: dict) -> None:
    save_checkpoint(path, _checkpoint_arrays(gen, disc, adam_g, adam_d), meta)


def restore_training_checkpoint(path, gen, disc, adam_g, adam_d) -> dict:
    from .checkpoint import restore_module

    arrays, meta = load_checkpoint(path)
    restore_module(gen, arrays, "gen.")
    if disc is not None:
        restore_module(disc, arrays, "disc.")
    adam_g.load_state(arrays, "opt_g.", meta["adam_g_steps"])
    if adam_d is not None:
        adam_d.load_state(arrays, "opt_d.", meta["adam_d_steps"])
    return meta


def train(generator: Generator, discriminator: "PatchDiscriminator | None",
          train_samples: list[PairedSample], val_samples: list[PairedSample],
          task: TaskSpec, target_range: tuple[float, float], config: TrainConfig,
          out_dir, dataset_hash: str = "", resume_from=None) -> TrainResult:
    if not train_samples:
        raise ConfigError("training set is empty")
    if config.lambda_adv > 0 and discriminator is None:
        raise ConfigError("adversarial weight set but no discriminator supplied")

    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "metrics.jsonl"

    adam_g = Adam({n: p for n, p in generator.named_parameters()},
                  config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    adam_d = None
    if discriminator is not None:
        adam_d = Adam({n: p for n, p in discriminator.named_parameters()},
                      config.learning_rate, config.beta1, config.beta2, config.adam_eps)

    start_epoch = 1
    iteration = 0
    if resume_from is not None:
        meta = restore_training_checkpoint(resume_from, generator, discriminator, adam_g, adam_d)
        start_epoch = meta["epoch"] + 1
        iteration = meta["iteration"]

    meta_base = {
        "task": str(task),
        "target_range": list(target_range),
        "gen_config": generator.config.to_dict(),
        "train_config": asdict(config),
        "dataset_hash": dataset_hash,
    }
    adversarial = config.lambda_adv > 0 and discriminator is not None
    generator.train()
    if discriminator is not None:
        discriminator.train()

    last_ckpt: "Path | None" = Path(resume_from) if resume_from is not None else None
    last_train_report: "MetricReport | None" = None
    stopped = False
    epoch = start_epoch - 1

    with open(log_path, "a") as log:

        def emit(record: dict) -> None:
            log.write(json.dumps(record, sort_keys=True) + "\n")
            log.flush()

        def write_ckpt(name: str, at_epoch: int) -> Path:
            path = ckpt_dir / name
            meta = dict(meta_base, epoch=at_epoch, iteration=iteration,
                        adam_g_steps=adam_g.step_count,
                        adam_d_steps=adam_d.step_count if adam_d else 0)
            save_training_checkpoint(path, generator, discriminator if adversarial else None,
                                     adam_g, adam_d if adversarial else None, meta)
            return path

        def check_quality_target() -> "MetricReport":
            if config.refresh_norm_stats:
                refresh_norm_statistics(generator, train_samples, task)
            report = evaluate_model(generator, train_samples, task, target_range)
            emit({"kind": "target_check", "iteration": iteration,
                  "train_psnr": report.psnr_mean, "train_ssim": report.ssim_mean})
            return report

        try:
            for epoch in range(start_epoch, config.epochs + 1):
                rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch]))
                for idxs in _batches(len(train_samples), config.batch_size, rng):
                    flip_mask = (rng.random(len(idxs)) < 0.5) if config.flip_augment else None
                    x, y_act = _stack_batch(train_samples, task, idxs, flip_mask)
                    iteration += 1

                    tape_g = Tape()
                    with tape_g:
                        y_syn = generator(x)

                    if adversarial:
                        with Tape() as tape_d:
                            d_act = discriminator(y_act, x)
                            d_syn_frozen = discriminator(y_syn.detach(), x)
                            loss_d = discriminator_loss(d_act, d_syn_frozen)
                        grads_d = backward(tape_d, loss_d)
                        adam_d.step({n: grads_d[p.value.grad_id].data
                                     for n, p in adam_d.params.items()
                                     if p.value.grad_id in grads_d})
                        with tape_g:
                            d_syn = discriminator(y_syn, x)
                            d_act_g = discriminator(y_act, x)
                        loss_d_value = float(loss_d.data)
                    else:
                        d_syn = d_act_g = None
                        loss_d_value = 0.0

                    with tape_g:
                        loss_g, parts = generator_loss(
                            y_syn, y_act, d_syn, d_act_g,
                            config.lambda_pix, config.lambda_adv, config.loss_mode)
                    if not np.isfinite(loss_g.data):
                        raise NumericError("generator loss became non-finite")
                    grads_g = backward(tape_g, loss_g)
                    adam_g.step({n: grads_g[p.value.grad_id].data
                                 for n, p in adam_g.params.items()
                                 if p.value.grad_id in grads_g})

                    emit({"kind": "iter", "epoch": epoch, "iteration": iteration,
                          "loss_d": loss_d_value, **parts})

                    has_target = (config.target_train_psnr is not None
                                  or config.target_train_ssim is not None)
                    if has_target and iteration % config.target_check_every == 0:
                        last_train_report = check_quality_target()
                        ok_psnr = (config.target_train_psnr is None
                                   or last_train_report.psnr_mean >= config.target_train_psnr)
                        ok_ssim = (config.target_train_ssim is None
                                   or last_train_report.ssim_mean >= config.target_train_ssim)
                        stopped = ok_psnr and ok_ssim
                    if stopped or (config.max_iterations is not None
                                   and iteration >= config.max_iterations):
                        break

                if val_samples and (epoch % config.validate_every == 0 or epoch == config.epochs):
                    if config.refresh_norm_stats:
                        refresh_norm_statistics(generator, train_samples, task)
                    report = evaluate_model(generator, val_samples, task, target_range)
                    emit({"kind": "epoch", "epoch": epoch, "iteration": iteration,
                          "val_psnr": report.psnr_mean, "val_ssim": report.ssim_mean})
                if epoch % config.checkpoint_every == 0:
                    last_ckpt = write_ckpt(f"ckpt_epoch_{epoch:05d}.ckpt", epoch)
                if stopped or (config.max_iterations is not None
                               and iteration >= config.max_iterations):
                    break
        except NumericError as err:
            emit({"kind": "abort", "epoch": epoch, "iteration": iteration, "reason": str(err)})
            raise TrainingDiverged(str(err), last_ckpt) from err

        if config.refresh_norm_stats:
            refresh_norm_statistics(generator, train_samples, task)
        final = write_ckpt("final.ckpt", epoch)
        emit({"kind": "done", "epochs_run": epoch, "iterations": iteration})

    return TrainResult(iterations=iteration, epochs_run=epoch, log_path=log_path,
                       final_checkpoint=final, last_train_report=last_train_report,
                       stopped_on_target=stopped)
