"""Training loop with validation-driven checkpointing.

Every val_every iterations the model is scored by detection mAP on the
validation volumes (optionally with sequences censored) and the state is
kept whenever the score improves.  All randomness flows from one seeded
generator, so identical configs reproduce identical loss curves bit for bit.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import detect, fusenet, saliency as saliency_mod
from .preprocess import build_sampler, stack_2p5d
from .seqdrop import DropPolicy, apply_presence, draw_drop_mask, presence_for_inference


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-3
    val_every: int = 200
    val_censor: tuple | None = None
    seed: int = 0
    dropout: DropPolicy | None = None
    oversample_factor: float = 10.0
    saliency_every: int = 10  # 0 disables input-gradient logging

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        return self


@dataclass
class TrainState:
    iteration: int = 0
    best_score: float = -math.inf
    best_iteration: int = -1
    best_state: bytes | None = None
    loss_history: list = field(default_factory=list)   # (iteration, loss)
    val_history: list = field(default_factory=list)    # (iteration, score)
    ledger: saliency_mod.SaliencyLedger | None = None


def _batch_tensors(samples):
    stacks = torch.from_numpy(np.stack([s.stack for s in samples]))
    targets = torch.from_numpy(np.stack([s.target for s in samples]))
    return stacks, targets


def infer_volume(model, volume, sequence_order, censor=None, n_slices=5, chunk=16,
                 upweight=True):
    """Slice-sweep inference to a 3D foreground-probability volume.

    The volume must already be preprocessed.  Censored or missing sequences are
    zeroed; survivors are upweighted by the dropout rule when upweight is true.
    A model trained without the dropout layer has no upweighting to mirror, so
    its censored inputs are plain zeros (pass upweight=False)."""
    available = set(volume.sequences.keys())
    if censor:
        available -= set(censor)
    presence = presence_for_inference(available, sequence_order)
    depth = volume.grid_shape[0]
    samples = [apply_presence(stack_2p5d(volume, z, n_slices, sequence_order), presence)
               for z in range(depth)]
    if not upweight and presence.scale != 1.0:
        for s in samples:
            s.stack /= np.float32(presence.scale)
    model.eval()
    prob = np.empty((depth,) + volume.grid_shape[1:], dtype=np.float32)
    with torch.no_grad():
        for lo in range(0, depth, chunk):
            batch = samples[lo:lo + chunk]
            stacks, _ = _batch_tensors(batch)
            prob[lo:lo + len(batch)] = model(stacks)[:, 1].numpy()
    return prob


def score_probability_volumes(prob_volumes, volumes):
    """Pooled detection mAP of per-patient probability volumes against their GT."""
    reports = []
    for prob, vol in zip(prob_volumes, volumes):
        gt = vol.gt_mask if vol.gt_mask is not None else np.zeros(prob.shape, dtype=bool)
        reports.append(detect.evaluate_volume(prob, gt, vol.spacing_mm))
    return detect.pooled_report(reports).map_score


def validate(model, volumes, censor=None, sequence_order=None, n_slices=5, upweight=True):
    """Full-volume inference over the validation set, scored by pooled mAP.

    Volumes must already be preprocessed (equalized)."""
    if not volumes:
        raise ValueError("validation set is empty")
    if sequence_order is None:
        sequence_order = tuple(volumes[0].sequences.keys())
    probs = [infer_volume(model, v, sequence_order, censor=censor, n_slices=n_slices,
                          upweight=upweight)
             for v in volumes]
    return score_probability_volumes(probs, volumes)


def select_best(candidates):
    """(iteration, score) of the first strict-improvement maximum, mirroring the
    overwrite-on-improvement checkpoint rule."""
    best_it, best = -1, -math.inf
    for it, score in candidates:
        if score > best:
            best_it, best = it, score
    return best_it, best


def train(model, train_volumes, val_volumes, config: TrainConfig,
          sequence_order=None, n_slices=None, log_path=None):
    """Run the optimization loop; returns a TrainState with the best checkpoint.

    train_volumes / val_volumes must already be preprocessed.  Deterministic
    for a fixed config: numpy draws (sampling, dropout) come from one seeded
    generator and torch runs single-threaded.
    """
    config.validate()
    if not val_volumes:
        raise ValueError("validation set must be non-empty")
    torch.set_num_threads(1)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    if sequence_order is None:
        sequence_order = tuple(train_volumes[0].sequences.keys())
    if n_slices is None:
        n_slices = model.config.n_slices
    n_seq = len(sequence_order)

    sampler = build_sampler(train_volumes, config.oversample_factor)
    iters_per_epoch = max(1, math.ceil(len(sampler.entries) / config.batch_size))
    total_iters = config.epochs * iters_per_epoch

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    state = TrainState()
    state.ledger = saliency_mod.SaliencyLedger(sequence_names=tuple(sequence_order),
                                               n_slices=n_slices)
    tied = model.config.sharing == "l2_tied"

    def run_validation(iteration):
        score = validate(model, val_volumes, censor=config.val_censor,
                         sequence_order=sequence_order, n_slices=n_slices,
                         upweight=config.dropout is not None)
        state.val_history.append((iteration, score))
        if score > state.best_score:
            state.best_score = score
            state.best_iteration = iteration
            state.best_state = fusenet.state_bytes(model)
        model.train()

    model.train()
    for it in range(1, total_iters + 1):
        picks = sampler.draw(rng, size=config.batch_size)
        samples = [stack_2p5d(train_volumes[vi], z, n_slices, sequence_order)
                   for vi, z in picks]
        raw_stacks = [s.stack for s in samples]
        if config.dropout is not None:
            presences = [draw_drop_mask(config.dropout, n_seq, rng) for _ in samples]
            samples = [apply_presence(s, p) for s, p in zip(samples, presences)]
        else:
            presences = [s.presence for s in samples]

        stacks, targets = _batch_tensors(samples)
        optimizer.zero_grad()
        probs = model(stacks)
        value = fusenet.cross_entropy_probs(probs, targets)
        if tied:
            value = value + fusenet.tie_penalty(model)
        if not torch.isfinite(value):
            raise RuntimeError(
                f"loss diverged (non-finite) at iteration {it}; "
                f"last losses: {[round(v, 4) for _, v in state.loss_history[-5:]]}")
        value.backward()
        optimizer.step()
        state.iteration = it
        state.loss_history.append((it, float(value.detach())))

        if config.saliency_every and it % config.saliency_every == 0:
            masks = np.stack([saliency_mod._presence_mask(s, p)
                              for s, p in zip(samples, presences)])
            grads = saliency_mod.saliency_batch(
                model, np.stack(raw_stacks),
                np.stack([s.target for s in samples]), masks)
            saliency_mod.accumulate(state.ledger, grads, iteration=it)
            model.train()

        if it % config.val_every == 0:
            run_validation(it)

    if state.iteration % config.val_every != 0:
        run_validation(state.iteration)

    if state.best_state is not None:
        fusenet.load_state_bytes(model, state.best_state)
    model.eval()

    if log_path is not None:
        write_log(state, log_path)
    return state


def write_log(state: TrainState, path):
    """CSV loss/validation log: iteration, loss, val_score (blank between vals)."""
    val_at = dict(state.val_history)
    with open(path, "w", newline="") as f:
        f.write("iteration,loss,val_score\n")
        for it, lv in state.loss_history:
            vs = repr(val_at[it]) if it in val_at else ""
            f.write(f"{it},{lv!r},{vs}\n")
    return path
