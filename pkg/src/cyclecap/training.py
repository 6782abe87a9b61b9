"""Three-stage training: pretrain the English captioner, then train the
German stage with the summed caption likelihood and cycle-consistency losses.

Batches are gradient-accumulation groups: records are sorted by target
length (then image id) so similar lengths batch together, each record's
graph is built at its own true length, and the mean per-record loss drives
one optimizer step. The loss masks PAD targets, so padded inputs never
contribute.

Early stopping follows validation CIDEr computed with greedy (beam 1)
decoding: training stops once the score has failed to improve for more than
``patience`` consecutive validated epochs, and the best-scoring parameters
are restored at the end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cycle import cycle_loss_graph
from .data import PAD_ID, PairRecord, TripleRecord, Vocabulary
from .errors import ConfigError, DataError, DimensionError, NumericError
from .evaluation import cider
from .inference import beam_decode, caption_image
from .models import (ImageCaptioner, ModelBundle, ModelDims, load_into,
                     unroll_captioner, unroll_german)
from .optim import Adam
from .tensor import Tape, Tensor, add, add_n, pick, scale, stack_rows
from .gradcheck import GradCheckResult, check_gradients


@dataclass
class TrainConfig:
    """Optimizer, regularization and schedule knobs plus model sizes.

    ``cycle_weight`` scales the consistency penalty; 0 disables it entirely
    (the dual-attention baseline is exactly that configuration, sharing every
    other code path). ``freeze_part1`` excludes the pretrained stage from the
    optimizer during stage-two training. ``target_nll`` optionally stops a
    run once the per-token training loss drops below it, which is how the
    desk-scale overfitting experiments bound their runtime.
    """

    learning_rate: float = 4e-4
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 20
    dropout: float = 0.5
    cycle_weight: float = 1.0
    squared_cycle: bool = False
    freeze_part1: bool = False
    seed: int = 0
    proj_dim: int = 64
    embed_dim: int = 64
    hidden_dim: int = 64
    attn_dim: int = 64
    validate_every: int = 1
    target_nll: float | None = None

    def check(self) -> None:
        if min(self.learning_rate, self.batch_size, self.max_epochs,
               self.validate_every) <= 0:
            raise ConfigError("learning_rate, batch_size, max_epochs and "
                              "validate_every must be positive")
        if min(self.proj_dim, self.embed_dim, self.hidden_dim, self.attn_dim) <= 0:
            raise ConfigError("model dims must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")
        if self.patience < 0 or self.patience > self.max_epochs:
            raise ConfigError("need 0 <= patience <= max_epochs")
        if self.cycle_weight < 0.0:
            raise ConfigError("cycle_weight must be non-negative")

    def dims(self, feature_dim: int, en_vocab: int, de_vocab: int = 0) -> ModelDims:
        return ModelDims(feature_dim=feature_dim, en_vocab=en_vocab,
                         de_vocab=de_vocab, proj_dim=self.proj_dim,
                         embed_dim=self.embed_dim, hidden_dim=self.hidden_dim,
                         attn_dim=self.attn_dim)


@dataclass
class EpochStats:
    epoch: int
    nll_per_token: float
    cycle: float | None
    val_score: float | None
    is_best: bool

    def to_json(self) -> str:
        return json.dumps({
            "epoch": self.epoch, "nll_per_token": self.nll_per_token,
            "cycle": self.cycle, "val_score": self.val_score,
            "is_best": self.is_best,
        }, sort_keys=True)


@dataclass
class TrainReport:
    phase: str
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_score: float | None = None

    def write(self, path: Path | str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"phase": self.phase, "best_epoch": self.best_epoch,
                                 "best_score": self.best_score},
                                sort_keys=True) + "\n")
            for e in self.epochs:
                fh.write(e.to_json() + "\n")


def nll_loss(logprob_rows: Sequence[Tensor], targets: Sequence[int],
             pad_id: int = PAD_ID) -> tuple[Tensor, int]:
    """Summed negative log-likelihood of the targets; PAD positions are
    excluded from both the sum and the token count."""
    if len(logprob_rows) != len(targets):
        raise DimensionError(f"{len(logprob_rows)} log-prob rows vs "
                             f"{len(targets)} targets")
    picks = [pick(row, int(t)) for row, t in zip(logprob_rows, targets)
             if int(t) != pad_id]
    if not picks:
        raise DataError("no non-PAD targets in sequence")
    return scale(add_n(picks), -1.0), len(picks)


def _batches(records: Sequence, batch_size: int, length_of) -> list[list]:
    order = sorted(records, key=lambda r: (length_of(r), r.image_id))
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


class _EarlyStopper:
    """Tracks the best validation score and the stop condition: stop once the
    score has not improved for more than ``patience`` validated epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = -np.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, score: float) -> bool:
        """Returns True when this epoch is a new best."""
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale > self.patience


def _snapshot(params) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def _greedy_en(captioner: ImageCaptioner, record: PairRecord,
               max_len: int = 50) -> tuple[int, ...]:
    keys = captioner.project(record.features)
    dec = captioner.decoder

    def step(state, prev):
        h, c = state
        logp, h, c, _ = dec.step(keys, h, c, prev)
        return logp.data, (h, c), ()

    return beam_decode(step, dec.initial_state(keys), beam_size=1,
                       max_len=max_len).tokens


def _validate_captioner(captioner: ImageCaptioner, records: Sequence[PairRecord],
                        vocab: Vocabulary) -> float:
    candidates = [vocab.decode(_greedy_en(captioner, r)) for r in records]
    references = [[vocab.decode(r.ids)] for r in records]
    return cider(candidates, references)


def _validate_bundle(bundle: ModelBundle, records: Sequence[TripleRecord],
                     de_vocab: Vocabulary) -> float:
    candidates = []
    for r in records:
        out = caption_image(bundle, r.features, beam_size=1)
        candidates.append(de_vocab.decode(out.de_ids))
    references = [[de_vocab.decode(r.de_ids)] for r in records]
    return cider(candidates, references)


def pretrain_part1(pairs: Sequence[PairRecord], vocab: Vocabulary,
                   feature_dim: int, cfg: TrainConfig,
                   val_pairs: Sequence[PairRecord] | None = None
                   ) -> tuple[ImageCaptioner, TrainReport]:
    """Train the image captioner (projection + soft-attention decoder) with
    teacher forcing. The pair set may be any image-caption collection, not
    just the one later used for the German stage."""
    cfg.check()
    if not pairs:
        raise DataError("pretraining needs a non-empty pair set")
    val = val_pairs if val_pairs is not None else pairs
    model = ImageCaptioner(cfg.dims(feature_dim, len(vocab)), cfg.seed)
    params = model.named_parameters()
    adam = Adam(params, lr=cfg.learning_rate)
    drop_rng = np.random.default_rng(cfg.seed)
    stopper = _EarlyStopper(cfg.patience)
    best_params = _snapshot(params)
    report = TrainReport(phase="part1")

    for epoch in range(1, cfg.max_epochs + 1):
        nll_total, token_total = 0.0, 0
        for batch in _batches(pairs, cfg.batch_size, lambda r: r.steps):
            adam.zero_grad()
            try:
                with Tape() as tape:
                    losses = []
                    for rec in batch:
                        keys = model.project(rec.features)
                        logps, _ = unroll_captioner(model, keys, rec.ids,
                                                    dropout_rate=cfg.dropout,
                                                    rng=drop_rng)
                        loss, ntok = nll_loss(logps, rec.ids[1:])
                        nll_total += loss.item()
                        token_total += ntok
                        losses.append(loss)
                    tape.backward(scale(add_n(losses), 1.0 / len(batch)))
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}") from exc
            adam.step()
        nll_per_token = nll_total / token_total

        score, is_best = None, False
        if epoch % cfg.validate_every == 0 or epoch == cfg.max_epochs:
            score = _validate_captioner(model, val, vocab)
            is_best = stopper.update(epoch, score)
            if is_best:
                best_params = _snapshot(params)
        report.epochs.append(EpochStats(epoch, nll_per_token, None, score, is_best))
        if stopper.should_stop:
            break
        if cfg.target_nll is not None and nll_per_token < cfg.target_nll:
            break

    if stopper.best_epoch:
        load_into(params, best_params)
        report.best_epoch = stopper.best_epoch
        report.best_score = stopper.best_score
    else:
        report.best_epoch = report.epochs[-1].epoch if report.epochs else 0
    return model, report


def train_part2(triples: Sequence[TripleRecord], captioner: ImageCaptioner,
                en_vocab: Vocabulary, de_vocab: Vocabulary, cfg: TrainConfig,
                val_triples: Sequence[TripleRecord] | None = None
                ) -> tuple[ModelBundle, TrainReport]:
    """Train the German stage on triples against a pretrained captioner.

    Per record: teacher-force the German decoder for its likelihood loss and
    its two attention matrices, teacher-force the pretrained English decoder
    on the ground-truth English caption for the third, and add
    ``cycle_weight`` times the consistency loss. With cycle_weight 0 the
    English pass and the consistency graph are skipped entirely. Unless
    ``freeze_part1`` is set, the pretrained parameters stay in the optimizer
    and keep adapting (only the consistency loss reaches them).
    """
    cfg.check()
    if not triples:
        raise DataError("stage-two training needs a non-empty triple set")
    if len(en_vocab) != captioner.dims.en_vocab:
        raise DataError("English vocabulary does not match the captioner")
    val = val_triples if val_triples is not None else triples
    feature_dim = triples[0].features.dim
    if captioner.dims.feature_dim != feature_dim:
        raise DataError(f"captioner expects feature dim "
                        f"{captioner.dims.feature_dim}, triples have {feature_dim}")
    dims = cfg.dims(feature_dim, len(en_vocab), len(de_vocab))
    # work on a private copy so the caller's captioner is never mutated and
    # repeated runs from the same checkpoint stay bit-identical
    part1 = ImageCaptioner(captioner.dims, cfg.seed)
    load_into(part1.named_parameters(),
              {k: p.data for k, p in captioner.named_parameters().items()})
    bundle = ModelBundle(dims, cfg.seed, captioner=part1)

    trainable = dict(bundle.part2_parameters())
    if not cfg.freeze_part1:
        trainable.update(bundle.part1_parameters())
    adam = Adam(trainable, lr=cfg.learning_rate)
    drop_rng = np.random.default_rng(cfg.seed)
    stopper = _EarlyStopper(cfg.patience)
    all_params = bundle.named_parameters()
    best_params = _snapshot(all_params)
    report = TrainReport(phase="part2")
    part1_dropout = 0.0 if cfg.freeze_part1 else cfg.dropout

    for epoch in range(1, cfg.max_epochs + 1):
        nll_total, token_total, cyc_total = 0.0, 0, 0.0
        for batch in _batches(triples, cfg.batch_size, lambda r: r.de_steps):
            adam.zero_grad()
            try:
                with Tape() as tape:
                    losses = []
                    for rec in batch:
                        keys = bundle.captioner.project(rec.features)
                        cap_states = bundle.cap_encoder.encode(rec.en_ids[1:])
                        de_logps, de_regions, de_caption = unroll_german(
                            bundle, keys, cap_states, rec.de_ids,
                            dropout_rate=cfg.dropout, rng=drop_rng)
                        loss, ntok = nll_loss(de_logps, rec.de_ids[1:])
                        nll_total += loss.item()
                        token_total += ntok
                        if cfg.cycle_weight > 0.0:
                            _, en_regions = unroll_captioner(
                                bundle.captioner, keys, rec.en_ids,
                                dropout_rate=part1_dropout, rng=drop_rng)
                            cyc = cycle_loss_graph(
                                stack_rows(de_regions), stack_rows(de_caption),
                                stack_rows(en_regions), squared=cfg.squared_cycle)
                            cyc_total += cyc.item()
                            loss = add(loss, scale(cyc, cfg.cycle_weight))
                        losses.append(loss)
                    tape.backward(scale(add_n(losses), 1.0 / len(batch)))
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}") from exc
            adam.step()
        nll_per_token = nll_total / token_total
        cyc_mean = cyc_total / len(triples) if cfg.cycle_weight > 0.0 else None

        score, is_best = None, False
        if epoch % cfg.validate_every == 0 or epoch == cfg.max_epochs:
            score = _validate_bundle(bundle, val, de_vocab)
            is_best = stopper.update(epoch, score)
            if is_best:
                best_params = _snapshot(all_params)
        report.epochs.append(EpochStats(epoch, nll_per_token, cyc_mean, score, is_best))
        if stopper.should_stop:
            break
        if cfg.target_nll is not None and nll_per_token < cfg.target_nll:
            break

    if stopper.best_epoch:
        load_into(all_params, best_params)
        report.best_epoch = stopper.best_epoch
        report.best_score = stopper.best_score
    else:
        report.best_epoch = report.epochs[-1].epoch if report.epochs else 0
    return bundle, report


def stage2_loss_graph(bundle: ModelBundle, record: TripleRecord,
                      cycle_weight: float, squared: bool = False) -> Tensor:
    """Full per-record stage-two loss in evaluation mode (no dropout); the
    gradient-check suites differentiate through this graph."""
    keys = bundle.captioner.project(record.features)
    cap_states = bundle.cap_encoder.encode(record.en_ids[1:])
    de_logps, de_regions, de_caption = unroll_german(bundle, keys, cap_states,
                                                     record.de_ids)
    loss, _ = nll_loss(de_logps, record.de_ids[1:])
    if cycle_weight > 0.0:
        _, en_regions = unroll_captioner(bundle.captioner, keys, record.en_ids)
        cyc = cycle_loss_graph(stack_rows(de_regions), stack_rows(de_caption),
                               stack_rows(en_regions), squared=squared)
        loss = add(loss, scale(cyc, cycle_weight))
    return loss


def gradient_spot_check(bundle: ModelBundle, record: TripleRecord,
                        cycle_weight: float = 1.0, sample: float = 0.01,
                        seed: int = 0) -> GradCheckResult:
    """Finite-difference check of the composed stage-two loss over a random
    sample of parameter elements."""
    return check_gradients(
        "stage2-loss",
        lambda: stage2_loss_graph(bundle, record, cycle_weight),
        bundle.named_parameters(),
        sample=sample,
        rng=np.random.default_rng(seed),
    )
