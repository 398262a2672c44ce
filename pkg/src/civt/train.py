"""Training, evaluation, and logit collection.

One loop serves every family and distillation mode.  Determinism
contract: all randomness (batch order, augmentation, mixup) comes from
Generators seeded with (seed, epoch)-derived keys, teacher logits are
computed on exactly the student's augmented input batch, and nothing in
the recorded metrics depends on wall clock, so a rerun with the same
config produces byte-identical metrics and checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import data as datamod
from .config import RunConfig
from .distill import civt_loss
from .errors import ConfigError, NumericsError
from .layers import Module
from .models import TokenLogits, build
from .optim import AdamW
from .tensor import Tensor, no_grad


@dataclass
class TrainResult:
    model: Module
    history: list
    norm_mean: np.ndarray
    norm_std: np.ndarray
    config: RunConfig


def prepare_data(cfg: RunConfig):
    """Load train/test splits plus normalization stats (computed if unset)."""
    if cfg.dataset == "synth":
        train = datamod.synth_generate(cfg.synth_spec("train"))
        test = datamod.synth_generate(cfg.synth_spec("test"))
    else:
        train = datamod.load_cifar10(cfg.data_dir, "train")
        test = datamod.load_cifar10(cfg.data_dir, "test")
    if cfg.norm_mean:
        mean = np.asarray(cfg.norm_mean, dtype=np.float32)
        std = np.asarray(cfg.norm_std, dtype=np.float32)
    else:
        mean, std = datamod.channel_stats(train.images)
    return train, test, mean, std


def _forward_tokens(model: Module, x: Tensor) -> TokenLogits:
    out = model(x)
    return out if isinstance(out, TokenLogits) else TokenLogits(class_logits=out)


def evaluate(model: Module, images: np.ndarray, labels: np.ndarray,
             mean: np.ndarray, std: np.ndarray, batch_size: int = 256) -> float:
    """Plain accuracy of class-logit argmax (lowest index wins ties)."""
    correct = 0
    for idx in datamod.batches(len(labels), batch_size, 0, 0, shuffle=False):
        x = Tensor(datamod.normalize(images[idx], mean, std))
        with no_grad():
            logits = _forward_tokens(model, x).class_logits.data
        correct += int(np.sum(np.argmax(logits, axis=-1) == labels[idx]))
    return correct / len(labels)


def evaluate_report(model: Module, dataset: datamod.Dataset, mean, std,
                    batch_size: int = 256) -> dict:
    """Accuracy plus per-class recall and the confusion matrix."""
    classes = model.spec.classes
    confusion = np.zeros((classes, classes), dtype=np.int64)
    for idx in datamod.batches(len(dataset), batch_size, 0, 0, shuffle=False):
        x = Tensor(datamod.normalize(dataset.images[idx], mean, std))
        with no_grad():
            logits = _forward_tokens(model, x).class_logits.data
        pred = np.argmax(logits, axis=-1)
        np.add.at(confusion, (dataset.labels[idx], pred), 1)
    support = confusion.sum(axis=1)
    recall = np.where(support > 0, confusion.diagonal() / np.maximum(support, 1), 0.0)
    return {
        "n": int(len(dataset)),
        "accuracy": float(confusion.diagonal().sum() / max(1, len(dataset))),
        "per_class_recall": recall,
        "support": support,
        "confusion": confusion,
    }


def collect_logits(model: Module, images: np.ndarray, mean, std,
                   batch_size: int = 256) -> dict:
    """Token name -> (N, K) logits over a whole split (no grad)."""
    rows: dict[str, list] = {}
    for idx in datamod.batches(images.shape[0], batch_size, 0, 0, shuffle=False):
        x = Tensor(datamod.normalize(images[idx], mean, std))
        with no_grad():
            toks = _forward_tokens(model, x).tokens()
        for name, t in toks.items():
            rows.setdefault(name, []).append(t.data)
    return {name: np.concatenate(chunks) for name, chunks in rows.items()}


def _teacher_families(teachers) -> list:
    return [t.spec.family for t in teachers]


def order_teachers(mode: str, teachers: list) -> list:
    """Put teachers in the order the loss expects.

    cross_bias needs exactly one cnn and one inn teacher and routes
    (conv token -> cnn, inv token -> inn); other modes keep given order.
    """
    if mode == "cross_bias":
        fams = _teacher_families(teachers)
        if sorted(fams) != ["cnn", "inn"]:
            raise ConfigError(
                f"cross_bias needs one cnn and one inn teacher, got {fams or 'none'}")
        return sorted(teachers, key=lambda t: t.spec.family)  # cnn first, inn second
    return list(teachers)


def train_run(cfg: RunConfig, teachers: list | None = None, log=None,
              data=None) -> TrainResult:
    """Run the full training loop described by ``cfg``.

    ``teachers`` are frozen models whose logits advise the student per
    the distillation mode.  ``log`` (if given) receives progress lines;
    timing only ever goes through ``log``, never into the history.
    ``data`` overrides the config's dataset with in-memory splits
    (train_dataset, test_dataset_or_None).
    """
    cfg.validate()
    teachers = order_teachers(cfg.mode, list(teachers or []))
    dcfg = cfg.distill_config()
    need = dcfg.teachers_required()
    if len(teachers) != need:
        raise ConfigError(f"mode '{cfg.mode}' needs {need} teachers, got {len(teachers)}")
    for t in teachers:
        if t.spec.classes != cfg.classes or t.spec.image_size != cfg.image_size:
            raise ConfigError(
                f"teacher ({t.spec.family}, {t.spec.classes} classes, "
                f"{t.spec.image_size}px) does not match run "
                f"({cfg.classes} classes, {cfg.image_size}px)")
        t.set_requires_grad(False)

    if data is None:
        train, test, mean, std = prepare_data(cfg)
    else:
        train, test = data
        if cfg.norm_mean:
            mean = np.asarray(cfg.norm_mean, dtype=np.float32)
            std = np.asarray(cfg.norm_std, dtype=np.float32)
        else:
            mean, std = datamod.channel_stats(train.images)
    model = build(cfg.model_spec(), seed=cfg.seed)
    named = list(model.named_parameters())
    opt = AdamW(named, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                weight_decay=cfg.weight_decay)
    sched = cfg.schedule()
    n = len(train)
    bs = cfg.batch_size
    steps_per_epoch = math.ceil(n / bs)
    flip = cfg.augment == "crop_flip"
    pad = max(1, cfg.image_size // 10)

    history = []
    for epoch in range(cfg.epochs):
        rng_aug = np.random.default_rng([cfg.seed, epoch, 101])
        sum_loss = 0.0
        sum_parts: dict[str, float] = {}
        sum_correct = 0
        lr = 0.0
        for step, idx in enumerate(datamod.batches(n, bs, cfg.seed, epoch)):
            imgs = train.images[idx]
            labels = train.labels[idx]
            if cfg.augment != "none":
                imgs = datamod.augment(imgs, rng_aug, pad=pad, flip=flip)
            if cfg.mixup_alpha > 0:
                targets = datamod.one_hot(labels, cfg.classes)
                imgs, targets = datamod.mixup(imgs, targets, cfg.mixup_alpha, rng_aug)
            else:
                targets = labels
            x = Tensor(datamod.normalize(imgs, mean, std))

            teacher_logits = []
            with no_grad():
                for t in teachers:
                    teacher_logits.append(_forward_tokens(t, x).class_logits.data)

            outputs = _forward_tokens(model, x)
            loss, parts = civt_loss(outputs, targets, teacher_logits, dcfg)
            loss_val = float(loss.item())
            if not math.isfinite(loss_val):
                raise NumericsError(
                    f"non-finite loss at epoch {epoch} step {step}: {loss_val}")
            opt.zero_grad()
            loss.backward()
            lr = sched.lr_at(epoch + step / steps_per_epoch)
            opt.step(lr)

            b = len(idx)
            sum_loss += loss_val * b
            for key, val in parts.items():
                sum_parts[key] = sum_parts.get(key, 0.0) + val * b
            pred = np.argmax(outputs.class_logits.data, axis=-1)
            sum_correct += int(np.sum(pred == labels))

        test_acc = (evaluate(model, test.images, test.labels, mean, std)
                    if test is not None and len(test) else float("nan"))
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": sum_loss / n,
            "train_acc": sum_correct / n,
            "test_acc": test_acc,
            "ce": sum_parts.get("ce", 0.0) / n,
            "kl_conv": (sum_parts.get("kl_conv", sum_parts.get("kl_0", 0.0))) / n,
            "kl_inv": (sum_parts.get("kl_inv", sum_parts.get("kl_1", 0.0))) / n,
        }
        history.append(row)
        if log:
            log(f"epoch {epoch}: loss {row['train_loss']:.4f} "
                f"train_acc {row['train_acc']:.4f} test_acc {test_acc:.4f} lr {lr:.2e}")

    return TrainResult(model=model, history=history, norm_mean=mean,
                       norm_std=std, config=cfg)


CSV_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "test_acc",
               "ce", "kl_conv", "kl_inv")


def history_to_csv(history: list) -> str:
    """Render epoch rows with full-precision, locale-free floats."""
    lines = [",".join(CSV_COLUMNS)]
    for row in history:
        cells = []
        for col in CSV_COLUMNS:
            v = row[col]
            cells.append(str(v) if isinstance(v, int) else repr(float(v)))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
