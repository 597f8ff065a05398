"""Input-gradient instrumentation: per-iteration and cumulative aggregates of
|dLoss/dInput|, split by sequence and by slice offset.

Gradients are taken at the pre-dropout input, so the channels of a dropped
sequence receive exactly zero through the chain rule of the zero mask, and
the surviving channels carry the upweighting factor.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .fusenet import cross_entropy_probs


@dataclass
class LedgerRow:
    iteration: int
    by_sequence: np.ndarray
    by_offset: np.ndarray
    cum_by_sequence: np.ndarray
    cum_by_offset: np.ndarray


@dataclass
class SaliencyLedger:
    sequence_names: tuple
    n_slices: int
    rows: list = field(default_factory=list)

    @property
    def offsets(self):
        k = self.n_slices // 2
        return list(range(-k, self.n_slices - k))

    def last(self):
        if not self.rows:
            raise ValueError("ledger is empty")
        return self.rows[-1]


def _presence_mask(sample, presence):
    mask = np.zeros(len(sample.sequence_names) * sample.n_slices, dtype=np.float32)
    for i, keep in enumerate(presence.present):
        if keep:
            mask[i * sample.n_slices:(i + 1) * sample.n_slices] = presence.scale
    return mask


def saliency_image(model, sample, presence=None):
    """d(loss)/d(stack) at the pre-dropout stack; shape of sample.stack."""
    presence = presence if presence is not None else sample.presence
    if sample.scale_applied:
        raise ValueError("saliency wants the pre-dropout sample; this one is already scaled")
    grads = saliency_batch(
        model,
        np.ascontiguousarray(sample.stack)[None],
        np.ascontiguousarray(sample.target)[None],
        _presence_mask(sample, presence)[None],
    )
    return grads[0]


def saliency_batch(model, stacks, targets, masks):
    """Batched input gradients: stacks (B,C,H,W), boolean targets (B,H,W),
    per-sample channel masks (B,C) holding 0 for dropped and the upweight
    factor for kept channels."""
    was_training = model.training
    model.eval()
    x = torch.as_tensor(stacks).requires_grad_(True)
    m = torch.as_tensor(masks, dtype=x.dtype)[:, :, None, None]
    probs = model(x * m)
    value = cross_entropy_probs(probs, torch.as_tensor(np.asarray(targets)))
    (grad,) = torch.autograd.grad(value, x)
    if was_training:
        model.train()
    g = grad.detach().numpy()
    if not np.all(np.isfinite(g)):
        raise RuntimeError("non-finite input gradient; training has diverged")
    return g


def channel_sums(saliency_img):
    """Exactly-rounded per-channel sums of |gradient| (float64, fsum)."""
    a = np.abs(np.asarray(saliency_img, dtype=np.float64))
    if a.ndim != 3:
        raise ValueError(f"expected one (C,H,W) saliency image, got shape {a.shape}")
    return np.array([math.fsum(row) for row in a.reshape(a.shape[0], -1)])


def accumulate(ledger: SaliencyLedger, saliency_img, presence=None, iteration=None):
    """Add one saliency image (or a batch, summed) to the ledger.

    Sequence and offset aggregates partition the same per-channel sums, so
    their totals agree; cumulative rows are running sums over iterations."""
    n_seq = len(ledger.sequence_names)
    imgs = np.asarray(saliency_img)
    if imgs.ndim == 3:
        imgs = imgs[None]
    sums = np.zeros(n_seq * ledger.n_slices, dtype=np.float64)
    for img in imgs:
        if img.shape[0] != n_seq * ledger.n_slices:
            raise ValueError(f"saliency image has {img.shape[0]} channels, ledger expects "
                             f"{n_seq * ledger.n_slices}")
        sums += channel_sums(img)
    grid = sums.reshape(n_seq, ledger.n_slices)
    by_seq = np.array([math.fsum(row) for row in grid])
    by_off = np.array([math.fsum(col) for col in grid.T])
    it = iteration if iteration is not None else (
        ledger.rows[-1].iteration + 1 if ledger.rows else 0)
    if ledger.rows:
        cum_seq = ledger.rows[-1].cum_by_sequence + by_seq
        cum_off = ledger.rows[-1].cum_by_offset + by_off
    else:
        cum_seq, cum_off = by_seq.copy(), by_off.copy()
    ledger.rows.append(LedgerRow(int(it), by_seq, by_off, cum_seq, cum_off))
    return ledger


def _columns(ledger):
    cols = ["iteration"]
    cols += [f"seq_{n}" for n in ledger.sequence_names]
    cols += [f"offset_{k}" for k in ledger.offsets]
    cols += [f"cum_seq_{n}" for n in ledger.sequence_names]
    cols += [f"cum_offset_{k}" for k in ledger.offsets]
    return cols


def write_csv(ledger: SaliencyLedger, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(_columns(ledger))
        for r in ledger.rows:
            row = [r.iteration]
            for block in (r.by_sequence, r.by_offset, r.cum_by_sequence, r.cum_by_offset):
                row += [repr(float(v)) for v in block]  # full-precision round trip
            w.writerow(row)
    return path


def read_csv(path, sequence_names=None):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        seq_names = [c[4:] for c in header if c.startswith("seq_")]
        n_slices = sum(1 for c in header if c.startswith("offset_"))
        if sequence_names is not None and list(sequence_names) != seq_names:
            raise ValueError(f"CSV sequences {seq_names} != expected {list(sequence_names)}")
        ledger = SaliencyLedger(sequence_names=tuple(seq_names), n_slices=n_slices)
        ns = len(seq_names)
        for row in reader:
            it = int(row[0])
            vals = [float(v) for v in row[1:]]
            ledger.rows.append(LedgerRow(
                it,
                np.array(vals[:ns]),
                np.array(vals[ns:ns + n_slices]),
                np.array(vals[ns + n_slices:2 * ns + n_slices]),
                np.array(vals[2 * ns + n_slices:]),
            ))
    return ledger


def plot_ledger(ledger: SaliencyLedger, out_dir):
    """Two cumulative line charts (by sequence, by slice offset) plus the raw CSV."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from pathlib import Path

    if not ledger.rows:
        raise ValueError("cannot plot an empty ledger")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    iters = [r.iteration for r in ledger.rows]

    paths = []
    for kind, labels, series in (
        ("sequence", ledger.sequence_names,
         np.stack([r.cum_by_sequence for r in ledger.rows])),
        ("offset", [f"{k:+d}" for k in ledger.offsets],
         np.stack([r.cum_by_offset for r in ledger.rows])),
    ):
        fig, ax = plt.subplots(figsize=(6, 4))
        for j, label in enumerate(labels):
            ax.plot(iters, series[:, j], marker="o" if len(iters) == 1 else None, label=label)
        ax.set_xlabel("iteration")
        ax.set_ylabel("cumulative |input gradient|")
        ax.set_title(f"Cumulative saliency aggregate by {kind}")
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"saliency_by_{kind}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths.append(path)
    csv_path = write_csv(ledger, out_dir / "saliency.csv")
    return {"by_sequence": paths[0], "by_offset": paths[1], "csv": csv_path}
