"""Self-supervised pretraining, reconstruction evaluation, and fine-tuning.

Each epoch resamples segments per recording, shuffles them, and groups
every batch by mask target so samples sharing a plan run as one batched
forward/backward. The optimizer step is the single serialization point;
validation passes run under no_grad with their own seed stream, so the
parameter trajectory is identical with or without a validation split.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import (CohortSplit, MaskPlan, NetworkAtlas, ParcelTimeSeries,
                   SegmentSpec, align_to_networks, make_mask_plan,
                   make_random_mask_plan, sample_segments, split_subjects,
                   tokenize)
from .model import (AttnRecord, ModelConfig, ModelState, classify_logits_batch,
                    decode_cross_batch, decode_self_batch, embed_batch,
                    encode_batch, init_model, recon_loss_batch)
from .optim import LrSchedule, adamw_step, init_optimizer, wsd_lr
from .seeding import rng_for

log = logging.getLogger(__name__)

CLASS_NAMES = ("CN", "MCI", "AD")
CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    peak_lr: float = 1e-3
    warmup_frac: float = 0.1
    stable_frac: float = 0.6
    decay_frac: float = 0.3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    mask_mode: str | None = None          # None -> use the model config's mode
    random_mask_count: int | None = None  # None -> mean network mask size
    seed: int = 0
    patience: int = 10
    eval_every: int = 1
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class TrainHistory:
    steps: list[tuple[int, float, float]] = field(default_factory=list)  # step, loss, lr
    val: list[tuple[int, float]] = field(default_factory=list)           # epoch, metric
    wall_time_s: float = 0.0
    best_epoch: int = -1
    diverged: bool = False


@dataclass
class PretrainResult:
    state: ModelState        # best-validation checkpoint
    last_state: ModelState   # parameters after the final step
    history: TrainHistory
    split: CohortSplit


@dataclass
class ReconReport:
    per_network_r: np.ndarray     # (N,) mean Pearson r of masked reconstruction
    token_counts: np.ndarray      # (N,) tokens contributing to each mean
    skipped_tokens: int           # zero-variance pairs left out


@dataclass
class FinetuneResult:
    state: ModelState
    history: TrainHistory
    split: CohortSplit
    report: "object"              # analysis.ClassificationReport
    flags: list[str] = field(default_factory=list)


def draw_mask_targets(rng: np.random.Generator, n_networks: int, count: int) -> np.ndarray:
    """Uniform target network per sample."""
    return rng.integers(0, n_networks, size=count)


@dataclass
class _Prepped:
    recordings: list[ParcelTimeSeries]
    aligned: list[np.ndarray]
    keys: list[str]
    grid_template: "object"
    plans: list[MaskPlan]
    atlas: NetworkAtlas
    spec: SegmentSpec


def _prepare(recordings: list[ParcelTimeSeries], atlas: NetworkAtlas,
             spec: SegmentSpec) -> _Prepped:
    kept, aligned, keys = [], [], []
    for rec in recordings:
        if rec.values.shape[0] < spec.T:
            log.warning("recording %s/%d shorter than %d timesteps; skipped",
                        rec.subject_id, rec.session_index, spec.T)
            continue
        kept.append(rec)
        aligned.append(align_to_networks(rec.values, atlas))
        keys.append(f"{rec.subject_id}/{rec.session_index}")
    if not kept:
        raise ValueError("no recording is long enough for the segment spec")
    template = tokenize(aligned[0][:spec.T], spec, atlas)
    plans = [make_mask_plan(atlas, template, net)
             for net in range(atlas.network_count)]
    return _Prepped(kept, aligned, keys, template, plans, atlas, spec)


def _epoch_tokens(prep: _Prepped, indices: list[int], seed: int, tag: str,
                  epoch: int) -> tuple[np.ndarray, np.ndarray]:
    """Tokenized segments for one epoch: (n, S, dim) plus recording index."""
    toks, owner = [], []
    for i in indices:
        rng = rng_for(seed, tag, prep.keys[i], epoch)
        for seg in sample_segments(prep.aligned[i], prep.spec, rng):
            toks.append(tokenize(seg, prep.spec, prep.atlas).flat())
        owner.extend([i] * prep.spec.segments_per_recording)
    return np.stack(toks), np.asarray(owner)


def _forward_group(state: ModelState, tokens: np.ndarray, masked_idx: np.ndarray,
                   unmasked_idx: np.ndarray, prep: _Prepped, rng=None) -> Tensor:
    emb = embed_batch(state, tokens)
    z = encode_batch(state, emb, unmasked_idx, rng=rng)
    if state.config.decoder_mode == "cross":
        pred = decode_cross_batch(state, z, masked_idx, rng=rng)
    else:
        pred = decode_self_batch(state, z, masked_idx, rng=rng)
    if masked_idx.ndim == 1:
        truth = tokens[:, masked_idx, :]
    else:
        truth = np.take_along_axis(tokens, masked_idx[:, :, None], axis=1)
    return recon_loss_batch(pred, truth, masked_idx, prep.atlas, prep.spec)


def _batch_loss(state: ModelState, tokens: np.ndarray, prep: _Prepped,
                mask_mode: str, rng: np.random.Generator,
                random_count: int, train_rng=None) -> Tensor:
    """Mean masked-reconstruction loss of one batch (grouped by plan)."""
    b = tokens.shape[0]
    if mask_mode == "network":
        targets = draw_mask_targets(rng, prep.atlas.network_count, b)
        sizes = {p.n_masked for p in prep.plans}
        if len(sizes) == 1:
            # equal-width networks: one fused group with per-sample indices
            masked = np.stack([prep.plans[t].masked_indices for t in targets])
            unmasked = np.stack([prep.plans[t].unmasked_indices for t in targets])
            per_sample = _forward_group(state, tokens, masked, unmasked, prep,
                                        rng=train_rng)
            return ad.mean(per_sample)
        pieces = []
        for net in range(prep.atlas.network_count):
            members = np.flatnonzero(targets == net)
            if members.size == 0:
                continue
            plan = prep.plans[net]
            pieces.append(_forward_group(state, tokens[members],
                                         plan.masked_indices,
                                         plan.unmasked_indices, prep,
                                         rng=train_rng))
        per_sample = ad.concat(pieces, axis=0) if len(pieces) > 1 else pieces[0]
    else:
        total = prep.grid_template.token_count
        masked = np.stack([np.sort(rng.choice(total, size=random_count, replace=False))
                           for _ in range(b)])
        all_idx = np.arange(total)
        unmasked = np.stack([np.setdiff1d(all_idx, row, assume_unique=True)
                             for row in masked])
        per_sample = _forward_group(state, tokens, masked, unmasked, prep,
                                    rng=train_rng)
    return ad.mean(per_sample)


def _val_loss(state: ModelState, prep: _Prepped, indices: list[int],
              seed: int, mask_mode: str, random_count: int) -> float:
    """Deterministic validation loss (fixed segments, cycled targets)."""
    losses = []
    with ad.no_grad():
        for i in indices:
            rng = rng_for(seed, "val-segments", prep.keys[i])
            segs = sample_segments(prep.aligned[i], prep.spec, rng)
            toks = np.stack([tokenize(s, prep.spec, prep.atlas).flat() for s in segs])
            for k in range(toks.shape[0]):
                if mask_mode == "network":
                    plan = prep.plans[k % prep.atlas.network_count]
                else:
                    plan = make_random_mask_plan(
                        prep.grid_template, random_count,
                        rng_for(seed, "val-mask", prep.keys[i], k))
                per = _forward_group(state, toks[k:k + 1], plan.masked_indices,
                                     plan.unmasked_indices, prep)
                losses.append(float(per.data[0]))
    return float(np.mean(losses))


def _trainable(state: ModelState, exclude_prefixes=()) -> dict[str, Tensor]:
    return {k: v for k, v in state.params.items()
            if not any(k.startswith(p) for p in exclude_prefixes)}


def pretrain(recordings: list[ParcelTimeSeries], atlas: NetworkAtlas,
             spec: SegmentSpec, model_config: ModelConfig,
             train_config: TrainConfig,
             split: CohortSplit | None = None) -> PretrainResult:
    """Masked-reconstruction pretraining with best-validation selection."""
    cfg = train_config
    prep = _prepare(recordings, atlas, spec)
    if split is None:
        split = split_subjects(prep.recordings, cfg.split_ratios, cfg.seed)
    train_idx = [i for i, r in enumerate(prep.recordings) if r.subject_id in split.train]
    val_idx = [i for i, r in enumerate(prep.recordings) if r.subject_id in split.val]
    if not train_idx:
        raise ValueError("train split is empty")
    mask_mode = cfg.mask_mode or model_config.mask_mode
    random_count = cfg.random_mask_count or max(
        1, round(prep.grid_template.token_count / atlas.network_count))

    state = init_model(model_config, seed=cfg.seed)
    params = _trainable(state, exclude_prefixes=("cls.",))
    opt = init_optimizer(params, base_lr=cfg.peak_lr, betas=cfg.betas,
                         eps=cfg.eps, weight_decay=cfg.weight_decay)
    n_samples = len(train_idx) * spec.segments_per_recording
    steps_per_epoch = -(-n_samples // cfg.batch_size)
    schedule = LrSchedule(cfg.peak_lr, steps_per_epoch * cfg.epochs,
                          cfg.warmup_frac, cfg.stable_frac, cfg.decay_frac)

    history = TrainHistory()
    best_val = np.inf
    best_params = None
    snapshot = {k: v.data.copy() for k, v in state.params.items()}
    t0 = time.time()
    step = 0
    for epoch in range(cfg.epochs):
        tokens, _ = _epoch_tokens(prep, train_idx, cfg.seed, "train-segments", epoch)
        order = rng_for(cfg.seed, "order", epoch).permutation(tokens.shape[0])
        mask_rng = rng_for(cfg.seed, "mask", epoch)
        try:
            for lo in range(0, tokens.shape[0], cfg.batch_size):
                batch = tokens[order[lo:lo + cfg.batch_size]]
                loss = _batch_loss(state, batch, prep, mask_mode, mask_rng,
                                   random_count)
                lr = wsd_lr(schedule, step)
                loss.backward(params.values())
                grads = {k: p.grad for k, p in params.items()}
                adamw_step(opt, params, grads, lr)
                ad.zero_grads(params.values())
                history.steps.append((step, loss.item(), lr))
                step += 1
        except ArithmeticError as exc:
            log.error("divergence at step %d (%s); restoring last epoch snapshot",
                      step, exc)
            for k, v in snapshot.items():
                state.params[k].data = v
            history.diverged = True
            break
        snapshot = {k: v.data.copy() for k, v in state.params.items()}
        if val_idx and (epoch + 1) % cfg.eval_every == 0:
            vl = _val_loss(state, prep, val_idx, cfg.seed, mask_mode, random_count)
            history.val.append((epoch, vl))
            if vl < best_val:
                best_val = vl
                history.best_epoch = epoch
                best_params = {k: v.data.copy() for k, v in state.params.items()}
    history.wall_time_s = time.time() - t0

    last_state = state.copy()
    if best_params is not None:
        for k, v in best_params.items():
            state.params[k].data = v
    return PretrainResult(state, last_state, history, split)


def evaluate_reconstruction(state: ModelState, recordings: list[ParcelTimeSeries],
                            atlas: NetworkAtlas, spec: SegmentSpec,
                            seed: int = 0, workers: int = 1) -> ReconReport:
    """Per-network mean Pearson r between reconstructed and true tokens.

    Every network is masked in turn for every sampled segment; r is
    computed per masked token over its non-pad values and averaged over
    tokens, segments, and recordings. Zero-variance pairs are skipped
    and tallied.
    """
    prep = _prepare(recordings, atlas, spec)
    n = atlas.network_count
    col_mask = atlas.token_pad_mask(spec)
    n_cols = col_mask.shape[0]

    def one_recording(i: int):
        rng = rng_for(seed, "eval-segments", prep.keys[i])
        segs = sample_segments(prep.aligned[i], prep.spec, rng)
        toks = np.stack([tokenize(s, prep.spec, prep.atlas).flat() for s in segs])
        sums = np.zeros(n)
        counts = np.zeros(n, dtype=np.int64)
        skipped = 0
        with ad.no_grad():
            for net in range(n):
                plan = prep.plans[net]
                emb = embed_batch(state, toks)
                z = encode_batch(state, emb, plan.unmasked_indices)
                if state.config.decoder_mode == "cross":
                    pred = decode_cross_batch(state, z, plan.masked_indices)
                else:
                    pred = decode_self_batch(state, z, plan.masked_indices)
                truth = toks[:, plan.masked_indices, :]
                keep = col_mask[plan.masked_indices % n_cols]      # (M, dim)
                for m in range(plan.n_masked):
                    p = pred.data[:, m, keep[m]]
                    t = truth[:, m, keep[m]]
                    r, ok = _pearson_rows(p, t)
                    sums[net] += r.sum()
                    counts[net] += int(ok.sum())
                    skipped += int((~ok).sum())
        return sums, counts, skipped

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one_recording, range(len(prep.recordings))))
    else:
        results = [one_recording(i) for i in range(len(prep.recordings))]
    sums = np.zeros(n)
    counts = np.zeros(n, dtype=np.int64)
    skipped = 0
    for s, c, k in results:
        sums += s
        counts += c
        skipped += k
    with np.errstate(invalid="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return ReconReport(means, counts, skipped)


def _pearson_rows(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise Pearson r; rows with a zero-variance side are dropped."""
    xc = x - x.mean(axis=-1, keepdims=True)
    yc = y - y.mean(axis=-1, keepdims=True)
    vx = (xc * xc).sum(axis=-1)
    vy = (yc * yc).sum(axis=-1)
    ok = (vx > 0) & (vy > 0)
    r = np.zeros(x.shape[0])
    r[ok] = (xc[ok] * yc[ok]).sum(axis=-1) / np.sqrt(vx[ok] * vy[ok])
    return r[ok], ok


def collect_attention(state: ModelState, recordings: list[ParcelTimeSeries],
                      atlas: NetworkAtlas, spec: SegmentSpec,
                      seed: int = 0) -> dict[int, list[AttnRecord]]:
    """Captured decoder cross-attention per target network (held-out data)."""
    if state.config.decoder_mode != "cross":
        raise ValueError("attention capture requires the cross-attention decoder")
    prep = _prepare(recordings, atlas, spec)
    records: dict[int, list[AttnRecord]] = {net: [] for net in range(atlas.network_count)}
    with ad.no_grad():
        for i in range(len(prep.recordings)):
            rng = rng_for(seed, "eval-segments", prep.keys[i])
            segs = sample_segments(prep.aligned[i], prep.spec, rng)
            toks = np.stack([tokenize(s, prep.spec, prep.atlas).flat() for s in segs])
            for net in range(atlas.network_count):
                plan = prep.plans[net]
                emb = embed_batch(state, toks)
                z = encode_batch(state, emb, plan.unmasked_indices)
                _, attn = decode_cross_batch(state, z, plan.masked_indices,
                                             capture=True)
                for b in range(attn.shape[0]):
                    records[net].append(AttnRecord(attn[b], plan))
    return records


def cross_entropy_batch(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of (B, K) logits against integer labels."""
    b, k = logits.shape
    shift = logits - Tensor(logits.data.max(axis=-1, keepdims=True))
    lse = ad.log(ad.sum_(ad.exp(shift), axis=-1))
    onehot = np.zeros((b, k), dtype=logits.dtype)
    onehot[np.arange(b), labels] = 1.0
    picked = ad.sum_(ad.mul(shift, Tensor(onehot)), axis=-1)
    return ad.mean(lse - picked)


def recording_logits(state: ModelState, prep: _Prepped, idx: int,
                     seed: int) -> np.ndarray:
    """Mean of segment logits for one recording (inference)."""
    rng = rng_for(seed, "val-segments", prep.keys[idx])
    segs = sample_segments(prep.aligned[idx], prep.spec, rng)
    toks = np.stack([tokenize(s, prep.spec, prep.atlas).flat() for s in segs])
    with ad.no_grad():
        logits = classify_logits_batch(state, toks)
    return logits.data.mean(axis=0)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def finetune_classifier(state: ModelState, recordings: list[ParcelTimeSeries],
                        atlas: NetworkAtlas, spec: SegmentSpec,
                        train_config: TrainConfig,
                        frozen_encoder: bool = False,
                        split: CohortSplit | None = None) -> FinetuneResult:
    """Fine-tune for 3-way classification with early stopping on
    validation balanced accuracy; recording-level prediction is the mean
    of segment logits."""
    from .analysis import balanced_accuracy, classification_metrics

    cfg = train_config
    labeled = [r for r in recordings if r.label in CLASS_INDEX]
    if len(labeled) < len(recordings):
        raise ValueError("classification requires CN/MCI/AD labels on every recording")
    prep = _prepare(labeled, atlas, spec)
    if split is None:
        split = split_subjects(prep.recordings, cfg.split_ratios, cfg.seed)
    by_name = {"train": [], "val": [], "test": []}
    for i, rec in enumerate(prep.recordings):
        by_name[split.of(rec.subject_id)].append(i)
    flags = []
    for name, idxs in by_name.items():
        present = {prep.recordings[i].label for i in idxs}
        missing = set(CLASS_NAMES) - present
        if missing:
            flags.append(f"{name} split missing classes: {sorted(missing)}")
            log.warning("%s split missing classes %s", name, sorted(missing))

    state = state.copy()
    if frozen_encoder:
        params = {k: v for k, v in state.params.items() if k.startswith("cls.")}
    else:
        params = {k: v for k, v in state.params.items()
                  if k.startswith(("cls.", "embed.", "pos", "enc."))}
    opt = init_optimizer(params, base_lr=cfg.peak_lr, betas=cfg.betas,
                         eps=cfg.eps, weight_decay=cfg.weight_decay)
    n_samples = len(by_name["train"]) * spec.segments_per_recording
    steps_per_epoch = -(-n_samples // cfg.batch_size)
    schedule = LrSchedule(cfg.peak_lr, steps_per_epoch * cfg.epochs,
                          cfg.warmup_frac, cfg.stable_frac, cfg.decay_frac)

    history = TrainHistory()
    best_bacc = -1.0
    best_params = None
    since_best = 0
    t0 = time.time()
    step = 0
    for epoch in range(cfg.epochs):
        tokens, owner = _epoch_tokens(prep, by_name["train"], cfg.seed,
                                      "cls-segments", epoch)
        labels = np.asarray([CLASS_INDEX[prep.recordings[i].label] for i in owner])
        order = rng_for(cfg.seed, "cls-order", epoch).permutation(tokens.shape[0])
        for lo in range(0, tokens.shape[0], cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            logits = classify_logits_batch(state, tokens[sel])
            loss = cross_entropy_batch(logits, labels[sel])
            lr = wsd_lr(schedule, step)
            loss.backward(params.values())
            grads = {k: p.grad for k, p in params.items()}
            adamw_step(opt, params, grads, lr)
            ad.zero_grads(params.values())
            history.steps.append((step, loss.item(), lr))
            step += 1
        if by_name["val"]:
            preds, truths = _split_predictions(state, prep, by_name["val"], cfg.seed)
            bacc = balanced_accuracy(np.argmax(preds, axis=1), truths)
            history.val.append((epoch, bacc))
            if bacc > best_bacc:
                best_bacc = bacc
                history.best_epoch = epoch
                best_params = {k: v.data.copy() for k, v in state.params.items()}
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
    history.wall_time_s = time.time() - t0
    if best_params is not None:
        for k, v in best_params.items():
            state.params[k].data = v

    eval_idx = by_name["test"] or by_name["val"] or by_name["train"]
    probs, truths = _split_predictions(state, prep, eval_idx, cfg.seed,
                                       as_probs=True)
    report = classification_metrics(probs, truths)
    return FinetuneResult(state, history, split, report, flags)


def _split_predictions(state: ModelState, prep: _Prepped, idxs: list[int],
                       seed: int, as_probs: bool = False):
    rows = [recording_logits(state, prep, i, seed) for i in idxs]
    out = np.stack(rows)
    if as_probs:
        out = _softmax_np(out)
    labels = np.asarray([CLASS_INDEX[prep.recordings[i].label] for i in idxs])
    return out, labels
