"""Backpropagation, gradient checking and fine-tuning for the toy model.

Synthetic copy/reverse tasks stand in for speech data: targets are exact
functions of the sources, and token accuracy under teacher forcing is the
quality measure.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .attention import attention_backward
from .errors import ArgumentError, ConfigurationError, TrainingDivergedError
from .layers import flat_outer, layer_norm_backward, log_softmax, mlp_backward
from .model import BOS, EOS, PAD, pad_batch
from .validation import check_count

FIRST_CONTENT_TOKEN = EOS + 1
TRACE_COLUMNS = ("epoch", "split", "loss", "token_accuracy")
DSO_FREEZE = frozenset({"encoder", "cross"})


@dataclass(frozen=True)
class SyntheticTask:
    """Deterministic seq2seq dataset: copy or reverse random token strings."""

    kind: str = "copy"
    vocab_size: int = 64
    seq_len_range: tuple = (1, 16)
    sample_count: int = 2000
    seed: int = 0
    heldout_count: int = 200

    def __post_init__(self):
        if self.kind not in ("copy", "reverse"):
            raise ConfigurationError(f"unknown task kind {self.kind!r}")
        lo, hi = self.seq_len_range
        if not 1 <= lo <= hi:
            raise ConfigurationError("seq_len_range must satisfy 1 <= min <= max")
        if self.vocab_size <= FIRST_CONTENT_TOKEN:
            raise ConfigurationError("vocab_size leaves no content tokens")
        check_count(self.sample_count, "sample_count", minimum=1)

    def target_of(self, source):
        return source.copy() if self.kind == "copy" else source[::-1].copy()

    def samples(self, split="train"):
        """List of ``(source, target)`` int arrays for ``train`` or ``heldout``."""
        stream = {"train": 0, "heldout": 1}[split]
        count = self.sample_count if split == "train" else self.heldout_count
        rng = np.random.default_rng([self.seed, stream])
        lo, hi = self.seq_len_range
        out = []
        for _ in range(count):
            n = int(rng.integers(lo, hi + 1))
            src = rng.integers(FIRST_CONTENT_TOKEN, self.vocab_size, n).astype(np.int64)
            out.append((src, self.target_of(src)))
        return out


@dataclass(frozen=True)
class Batch:
    src: np.ndarray
    src_mask: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray

    @property
    def target_mask(self):
        return self.tgt_out != PAD

    @classmethod
    def from_pairs(cls, pairs):
        src, src_mask = pad_batch([s for s, _ in pairs])
        tgt_in, _ = pad_batch([np.concatenate([[BOS], t]) for _, t in pairs])
        tgt_out, _ = pad_batch([np.concatenate([t, [EOS]]) for _, t in pairs])
        return cls(src, src_mask, tgt_in, tgt_out)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    learning_rate: float = 1e-3
    batch_size: int = 16
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    gradient_clip: float = 1.0
    schedule: str = "cosine"

    def __post_init__(self):
        check_count(self.epochs, "epochs", minimum=1)
        check_count(self.batch_size, "batch_size", minimum=1)
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")

    def rate(self, step, total):
        """Learning rate for optimizer step ``step`` (0-based) of ``total``."""
        if self.schedule == "constant":
            return self.learning_rate
        return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * step / total))


def _cross_entropy(logits, tgt_out):
    mask = tgt_out != PAD
    count = int(mask.sum())
    if count == 0:
        raise ArgumentError("batch has no non-pad target positions")
    if tgt_out.max() >= logits.shape[-1]:
        raise ArgumentError("target id outside the vocabulary")
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, tgt_out[..., None], axis=-1)[..., 0]
    loss = -float(picked[mask].sum()) / count
    probs = np.exp(logp)
    dlogits = probs
    np.put_along_axis(dlogits, tgt_out[..., None],
                      np.take_along_axis(dlogits, tgt_out[..., None], axis=-1) - 1.0, axis=-1)
    dlogits = dlogits * mask[..., None] / count
    correct = int(((logits.argmax(axis=-1) == tgt_out) & mask).sum())
    return loss, dlogits, correct, count


def forward_loss(model, batch):
    """Mean cross-entropy over non-pad target positions."""
    logits = model.forward_batch(batch.src, batch.src_mask, batch.tgt_in)
    return _cross_entropy(logits, batch.tgt_out)[0]


def frozen_names(model, groups):
    """Parameter names covered by freeze groups ``encoder``, ``cross``, ``decoder``."""
    groups = set(groups or ())
    unknown = groups - {"encoder", "cross", "decoder"}
    if unknown:
        raise ConfigurationError(f"unknown freeze groups {sorted(unknown)}")
    out = set()
    for name in model.params:
        if "encoder" in groups and name.startswith("encoder."):
            out.add(name)
        if "cross" in groups and (".cross_attn." in name or ".cross_ln." in name):
            out.add(name)
        if "decoder" in groups and name.startswith("decoder."):
            out.add(name)
    return out


class _Tape:
    def __init__(self, entries):
        self._entries = entries

    def pop(self, kind, name=None):
        got_kind, got_name, cache = self._entries.pop()
        if got_kind != kind or (name is not None and got_name != name):
            raise RuntimeError(f"tape out of order: wanted {kind} {name}, got {got_kind} {got_name}")
        return cache


def backward(model, batch, frozen=()):
    """Loss and analytic gradients for every parameter.

    Parameters
    ----------
    frozen : iterable of str
        Parameter names whose gradient is forced to exactly zero.

    Returns
    -------
    loss : float
    grads : dict of name -> ndarray
    """
    entries = []
    logits = model.forward_batch(batch.src, batch.src_mask, batch.tgt_in, entries)
    loss, dlogits, _, _ = _cross_entropy(logits, batch.tgt_out)
    grads = _backward_from_tape(model, _Tape(entries), dlogits)
    for name in frozen:
        grads[name] = np.zeros_like(grads[name])
    return loss, grads


def _backward_from_tape(model, tape, dlogits):
    p, spec = model.params, model.spec
    grads = {name: np.zeros_like(arr) for name, arr in p.items()}

    def ln(name, dy):
        dx, dg, db = layer_norm_backward(dy, tape.pop("ln", name))
        grads[f"{name}.g"] += dg
        grads[f"{name}.b"] += db
        return dx

    def attn(site, dy):
        dxq, dxkv, g = attention_backward(model.weights(site), tape.pop("attn", site), dy)
        for leaf, val in g.items():
            grads[f"{site}.{leaf}"] += val
        return dxq, dxkv

    def ffn(prefix, dy):
        dx, g = mlp_backward(dy, tape.pop("mlp", prefix),
                             p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.w2"])
        for leaf, val in g.items():
            grads[f"{prefix}.mlp.{leaf}"] += val
        return dx

    final = tape.pop("logits")
    grads["decoder.embed"] += flat_outer(dlogits, final)
    dy = ln("decoder.ln", dlogits @ p["decoder.embed"])
    d_enc = 0.0
    for i in reversed(range(spec.n_decoder_layers)):
        pre = f"decoder.layers.{i}"
        dy = dy + ln(f"{pre}.mlp_ln", ffn(pre, dy))
        dxq, dxkv = attn(f"{pre}.cross_attn", dy)
        d_enc = d_enc + dxkv
        dy = dy + ln(f"{pre}.cross_ln", dxq)
        dxq, dxkv = attn(f"{pre}.self_attn", dy)
        dy = dy + ln(f"{pre}.attn_ln", dxq + dxkv)
    tgt = tape.pop("dec_embed")
    np.add.at(grads["decoder.embed"], tgt, dy)
    grads["decoder.pos"][: tgt.shape[1]] += dy.sum(axis=0)

    tape.pop("enc_out")
    dx = ln("encoder.ln_post", d_enc)
    for i in reversed(range(spec.n_encoder_layers)):
        pre = f"encoder.layers.{i}"
        dx = dx + ln(f"{pre}.mlp_ln", ffn(pre, dx))
        dxq, dxkv = attn(f"{pre}.self_attn", dx)
        dx = dx + ln(f"{pre}.attn_ln", dxq + dxkv)
    src = tape.pop("enc_embed")
    np.add.at(grads["encoder.embed"], src, dx)
    return grads


@dataclass
class GradCheckReport:
    """Analytic vs. central-difference comparison at sampled coordinates."""

    rows: list = field(default_factory=list)
    threshold: float = 1e-3

    @property
    def max_relative_error(self):
        return max((r["relative_error"] for r in self.rows), default=0.0)

    def per_tensor(self):
        out = {}
        for r in self.rows:
            out[r["name"]] = max(out.get(r["name"], 0.0), r["relative_error"])
        return out

    @property
    def flagged(self):
        return [r for r in self.rows if r["relative_error"] > self.threshold]

    @property
    def passed(self):
        return not self.flagged


def relative_error(a, b, floor=1e-6):
    """``|a - b| / max(|a|, |b|, floor)``.

    The floor keeps gradients below the central-difference resolution
    (roughly ``eps * loss / h``, about 1e-10 here) from reading as 100% error.
    """
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_diff_check(model, batch, sample_count=50, seed=0, h=1e-5, threshold=1e-3):
    """Compare analytic gradients with central differences.

    Coordinates are drawn by first picking a parameter tensor uniformly, then
    a flat index inside it, so small tensors (biases, latent factors) are
    covered as often as large ones.
    """
    check_count(sample_count, "sample_count", minimum=1)
    _, grads = backward(model, batch)
    rng = np.random.default_rng(seed)
    names = sorted(n for n, a in model.params.items() if a.size)
    report = GradCheckReport(threshold=threshold)
    for _ in range(sample_count):
        name = names[int(rng.integers(len(names)))]
        arr = model.params[name]
        idx = int(rng.integers(arr.size))
        saved = float(arr.flat[idx])
        arr.flat[idx] = saved + h
        up = forward_loss(model, batch)
        arr.flat[idx] = saved - h
        down = forward_loss(model, batch)
        arr.flat[idx] = saved
        numeric = (up - down) / (2 * h)
        analytic = float(grads[name].flat[idx])
        report.rows.append({"name": name, "index": idx, "analytic": analytic,
                            "numeric": numeric,
                            "relative_error": relative_error(analytic, numeric)})
    return report


def evaluate(model, samples, batch_size=64):
    """Teacher-forced ``(loss, token_accuracy)`` over ``samples``."""
    total_loss, correct, count = 0.0, 0, 0
    for start in range(0, len(samples), batch_size):
        batch = Batch.from_pairs(samples[start : start + batch_size])
        logits = model.forward_batch(batch.src, batch.src_mask, batch.tgt_in)
        loss, _, c, n = _cross_entropy(logits, batch.tgt_out)
        total_loss += loss * n
        correct += c
        count += n
    return total_loss / count, correct / count


class _Adam:
    def __init__(self, cfg):
        self.cfg = cfg
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads, names, lr):
        cfg = self.cfg
        self.t += 1
        if cfg.optimizer == "sgd":
            for n in names:
                params[n] -= lr * grads[n]
            return
        c1 = 1.0 - cfg.beta1**self.t
        c2 = 1.0 - cfg.beta2**self.t
        for n in names:
            g = grads[n]
            m = self.m.setdefault(n, np.zeros_like(g))
            v = self.v.setdefault(n, np.zeros_like(g))
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            params[n] -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def finetune(model, task, cfg, freeze=(), log=None):
    """Train a copy of ``model`` on ``task``.

    Parameters
    ----------
    task : SyntheticTask
    cfg : TrainConfig
    freeze : iterable of {"encoder", "cross", "decoder"}
        Groups left untouched; ``DSO_FREEZE`` keeps the encoder and the
        cross-attention blocks as they were.
    log : callable, optional
        Receives each trace row as it is produced.

    Returns
    -------
    trained : Seq2SeqModel
    trace : list of dict
        Two rows per epoch (``train`` and ``heldout``) with columns
        ``TRACE_COLUMNS``.
    """
    return train_on(model, task.samples("train"), cfg, freeze, task.samples("heldout"), log)


def train_on(model, train, cfg, freeze=(), heldout=None, log=None):
    """:func:`finetune` over explicit ``(source, target)`` lists."""
    if not train:
        raise ArgumentError("training set is empty")
    trained = model.copy()
    frozen = frozen_names(trained, freeze)
    names = [n for n in trained.params if n not in frozen]
    rng = np.random.default_rng(cfg.seed)
    opt = _Adam(cfg)
    trace = []
    step = 0
    total = cfg.epochs * -(-len(train) // cfg.batch_size)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        loss_sum, correct, count = 0.0, 0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = Batch.from_pairs([train[i] for i in order[start : start + cfg.batch_size]])
            entries = []
            logits = trained.forward_batch(batch.src, batch.src_mask, batch.tgt_in, entries)
            loss, dlogits, c, n = _cross_entropy(logits, batch.tgt_out)
            step += 1
            if not np.isfinite(loss):
                raise TrainingDivergedError(step, loss)
            grads = _backward_from_tape(trained, _Tape(entries), dlogits)
            if cfg.gradient_clip:
                norm = np.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in names))
                if norm > cfg.gradient_clip:
                    for k in names:
                        grads[k] *= cfg.gradient_clip / norm
            opt.step(trained.params, grads, names, cfg.rate(step - 1, total))
            loss_sum += loss * n
            correct += c
            count += n
        rows = [{"epoch": epoch, "split": "train", "loss": loss_sum / count,
                 "token_accuracy": correct / count}]
        if heldout:
            h_loss, h_acc = evaluate(trained, heldout)
            rows.append({"epoch": epoch, "split": "heldout", "loss": h_loss,
                         "token_accuracy": h_acc})
        for row in rows:
            trace.append(row)
            if log is not None:
                log(row)
    return trained, trace


def write_trace(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in TRACE_COLUMNS})
