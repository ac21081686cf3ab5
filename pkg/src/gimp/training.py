"""Training loops: supervised gene pre-training, GiMP pre-training and fine-tuning.

Randomness comes from named substreams of ``cfg.seed``:

* ``init``         parameter initialisation (see :meth:`GiMPModel.build`)
* ``gene-batching`` minibatch order for gene pre-training
* ``batching``     balanced pre-training batches (a persistent generator)
* ``masking``      window start and mask draw, keyed by (epoch, batch, position)
* ``finetune``     fine-tuning sample order (a persistent generator)
"""

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, masked_abs_sum, mean
from .config import rng_stream
from .data import balanced_batches
from .errors import ConfigError, NumericError
from .gene_encoder import pretrain_gene_supervised
from .head import evaluate, finetune_step
from .model import GiMPModel
from .mpm import apply_mask, masked_input, mask_count, sample_window
from .nn import AdamW, cosine_lr
from .triplet import batch_triplet_loss, build_cls_pat

log = logging.getLogger(__name__)

PRETRAIN_GROUPS = ("aggregator", "decoder")
FINETUNE_GROUPS = ("aggregator", "head")


@dataclass
class StepLosses:
    L_pre: float
    L_tri: float
    L_rec: float
    n_triplets: int = 0
    n_masked: int = 0


# ---------------------------------------------------------------------------
# gene encoder
# ---------------------------------------------------------------------------


def pretrain_genes(model, train_pairs, cfg):
    """Supervised GroupMSA pre-training on the training split, then freeze it."""
    genes = np.stack([p.gene.values for p in train_pairs])
    labels = [p.label for p in train_pairs]
    model.freeze("gene_encoder", False)
    res = pretrain_gene_supervised(
        genes, labels, model.gene_encoder, cfg.num_classes, cfg.gene_epochs, lr=cfg.gene_lr,
        batch_size=cfg.batch_size, weight_decay=cfg.weight_decay,
        rng=rng_stream(cfg.seed, "gene-batching"), min_lr=cfg.lr_min)
    model.freeze("gene_encoder")
    return res.accuracy


# ---------------------------------------------------------------------------
# GiMP pre-training
# ---------------------------------------------------------------------------


def pretrain_groups(cfg):
    return PRETRAIN_GROUPS if cfg.use_mpm else ("aggregator",)


def make_windows(batch, cfg, rngs, mask_embedding):
    """Sample one window per pair and (with MPM) its mask; returns stacked arrays."""
    windows, masks = [], []
    for pair, rng in zip(batch, rngs):
        w, start = sample_window(pair.patches, cfg.window_len, rng)
        if cfg.use_mpm:
            masks.append(apply_mask(w, cfg.mask_ratio, rng, mask_embedding, start).mask)
        else:
            masks.append(np.zeros(cfg.window_len, dtype=bool))
        windows.append(w)
    return np.stack(windows), np.stack(masks)


def pretrain_objective(model, windows, masks, cls_ge, labels, cfg):
    """L_pre = L_tri + L_rec for a batch of prepared windows.

    L_rec is the per-window masked L1 sum averaged over the batch; L_tri is the
    mean hinge over all mined triplets. Returns tensors ``(L_pre, L_tri,
    L_rec)`` and the triplet count.
    """
    if not (cfg.use_mpm or cfg.use_triplet):
        raise ConfigError("pre-training needs at least one of use_mpm / use_triplet")
    if cfg.use_mpm:
        inp = masked_input(windows, masks, model.decoder.mask_embedding)
    else:
        inp = windows
    cls_img, tokens = model.aggregator(inp)
    L_rec = Tensor(0.0)
    if cfg.use_mpm:
        rec = model.decoder(tokens)
        L_rec = mean(masked_abs_sum(rec, windows, masks))
    L_tri, n_tri = Tensor(0.0), 0
    if cfg.use_triplet:
        L_tri, n_tri = batch_triplet_loss(build_cls_pat(cls_img, cls_ge), labels, cfg.delta, cfg.mining)
    return add(L_tri, L_rec), L_tri, L_rec, n_tri


def pretrain_step(batch, model, cfg, optimizer, lr, rngs):
    """One GiMP pre-training step on a list of pairs; the gene encoder must be frozen."""
    if not model.frozen["gene_encoder"]:
        raise ConfigError("the gene encoder must be frozen before GiMP pre-training")
    ids = [p.patient_id for p in batch]
    try:
        windows, masks = make_windows(batch, cfg, rngs, model.decoder.mask_embedding)
        cls_ge = model.gene_tokens(np.stack([p.gene.values for p in batch]))
        labels = np.array([p.label for p in batch])
        L_pre, L_tri, L_rec, n_tri = pretrain_objective(model, windows, masks, cls_ge, labels, cfg)
        if not np.isfinite(L_pre.data):
            raise NumericError(f"non-finite pre-training loss {float(L_pre.data)}")
        optimizer.zero_grad()
        if L_pre.requires_grad:
            L_pre.backward()
        optimizer.step(lr)
    except NumericError as exc:
        raise NumericError(f"{exc} [samples: {', '.join(ids)}]") from exc
    return StepLosses(L_pre.item(), L_tri.item(), L_rec.item(), n_tri, int(masks.sum()))


def make_pretrain_optimizer(model, cfg):
    return AdamW(model.trainable(pretrain_groups(cfg)), lr=cfg.lr, weight_decay=cfg.weight_decay)


def pretrain(model, train_pairs, cfg, start_epoch=0, optimizer=None, batch_rng=None, on_epoch=None,
             stop_epoch=None):
    """Run GiMP pre-training epochs ``start_epoch .. cfg.pretrain_epochs - 1``.

    ``on_epoch(record, optimizer, batch_rng)`` is called after every epoch,
    which is where callers checkpoint. ``stop_epoch`` ends the run early (as
    an interruption would) without changing the schedule. Returns the list of
    epoch records.
    """
    model.freeze("gene_encoder")
    optimizer = optimizer or make_pretrain_optimizer(model, cfg)
    batch_rng = batch_rng or rng_stream(cfg.seed, "batching")
    labels = [p.label for p in train_pairs]
    history = []
    for epoch in range(start_epoch, _stop(stop_epoch, cfg.pretrain_epochs)):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, cfg.pretrain_epochs, cfg.lr, cfg.lr_min)
        steps = []
        for b, idx in enumerate(balanced_batches(labels, cfg.batch_size, batch_rng)):
            batch = [train_pairs[i] for i in idx]
            rngs = [rng_stream(cfg.seed, "masking", epoch, b, j) for j in range(len(batch))]
            steps.append(pretrain_step(batch, model, cfg, optimizer, lr, rngs))
        per_masked = mask_count(cfg.window_len, cfg.mask_ratio) if cfg.use_mpm else 0
        rec = {
            "stage": "pretrain",
            "epoch": epoch,
            "lr": lr,
            "L_pre": float(np.mean([s.L_pre for s in steps])),
            "L_tri": float(np.mean([s.L_tri for s in steps])),
            "L_rec": float(np.mean([s.L_rec for s in steps])),
            "L_rec_per_masked": float(np.mean([s.L_rec for s in steps]) / per_masked) if per_masked else 0.0,
            "steps": len(steps),
            "seconds": time.perf_counter() - t0,
        }
        log.info("pretrain epoch %d L_pre %.4f L_tri %.4f L_rec/|M| %.4f", epoch, rec["L_pre"],
                 rec["L_tri"], rec["L_rec_per_masked"])
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec, optimizer, batch_rng)
    return history


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class FinetuneState:
    best_acc: float = -1.0
    best_epoch: int = -1
    best_params: dict = field(default_factory=dict)


def make_finetune_optimizer(model, cfg):
    return AdamW(model.trainable(FINETUNE_GROUPS), lr=cfg.lr, weight_decay=cfg.weight_decay)


def snapshot(model, groups=FINETUNE_GROUPS):
    return {g: copy.deepcopy(model.group(g).state_dict()) for g in groups}


def finetune(model, train_pairs, val_pairs, cfg, start_epoch=0, optimizer=None, order_rng=None,
             state=None, on_epoch=None, stop_epoch=None):
    """Fine-tune aggregator + head, keeping the parameters with the best validation accuracy.

    After the last epoch the model holds the best-on-validation parameters
    (first epoch wins ties). A run cut short by ``stop_epoch`` keeps the
    current parameters so that it can be resumed. Returns ``(history, state)``.
    """
    model.freeze("gene_encoder")
    optimizer = optimizer or make_finetune_optimizer(model, cfg)
    order_rng = order_rng or rng_stream(cfg.seed, "finetune")
    state = state or FinetuneState()
    history = []
    stop = _stop(stop_epoch, cfg.finetune_epochs)
    for epoch in range(start_epoch, stop):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, cfg.finetune_epochs, cfg.lr, cfg.lr_min)
        order = order_rng.permutation(len(train_pairs))
        losses = []
        for s in range(0, len(order), cfg.accumulate):
            batch = [train_pairs[i] for i in order[s:s + cfg.accumulate]]
            losses.append(finetune_step(batch, model, optimizer, lr) * len(batch))
        val = evaluate(val_pairs, model)
        if val.accuracy > state.best_acc:
            state.best_acc, state.best_epoch = val.accuracy, epoch
            state.best_params = snapshot(model)
        rec = {
            "stage": "finetune",
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.sum(losses) / len(train_pairs)),
            "val_loss": val.loss,
            "val_accuracy": val.accuracy,
            "best_epoch": state.best_epoch,
            "seconds": time.perf_counter() - t0,
        }
        log.info("finetune epoch %d loss %.4f val_acc %.4f", epoch, rec["train_loss"], val.accuracy)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec, optimizer, order_rng, state)
    if stop == cfg.finetune_epochs:
        restore_best(model, state)
    return history, state


def _stop(stop_epoch, total):
    return total if stop_epoch is None else min(int(stop_epoch), total)


def restore_best(model, state):
    for g, params in state.best_params.items():
        model.group(g).load_state_dict(params)


# ---------------------------------------------------------------------------
# whole pipeline
# ---------------------------------------------------------------------------


@dataclass
class PipelineResult:
    model: GiMPModel
    gene_accuracy: list
    pretrain_history: list
    finetune_history: list
    best_val_accuracy: float
    test_accuracy: float
    test_report: object
    seconds: float


def run_pipeline(dataset, cfg, pretrain_enabled=True, gene_state=None):
    """Gene pre-training, GiMP pre-training, fine-tuning and test evaluation.

    ``dataset`` must already hold z-scored, padded genes. Passing
    ``gene_state`` reuses a trained, frozen gene encoder instead of training
    one.
    """
    t0 = time.perf_counter()
    model = GiMPModel.build(cfg)
    train, val, test = dataset.split("train"), dataset.split("val"), dataset.split("test")
    if gene_state is None:
        gene_acc = pretrain_genes(model, train, cfg)
    else:
        model.gene_encoder.load_state_dict(gene_state)
        gene_acc = []
    model.freeze("gene_encoder")
    pre_hist = pretrain(model, train, cfg) if pretrain_enabled else []
    ft_hist, state = finetune(model, train, val, cfg)
    report = evaluate(test, model)
    return PipelineResult(model, gene_acc, pre_hist, ft_hist, state.best_acc, report.accuracy,
                          report, time.perf_counter() - t0)
