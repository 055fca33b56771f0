"""Analytic KV-cache accounting.

Only cache bytes are modelled (entries x bytes per entry); weights and
activations are ignored, so absolute numbers are lower bounds on real
memory use while orderings and crossover points carry over.
"""

import csv
import io
from dataclasses import dataclass
from fractions import Fraction

from .attention import AttentionConfig
from .errors import ArgumentError
from .model import ModelSpec
from .validation import check_count

BASES = ("key_only", "key_value")
SWEEP_COLUMNS = ("model", "placement", "batch", "seq_len", "source_len", "bytes_total",
                 "bytes_decoder_self", "bytes_cross", "bytes_encoder_self", "oom")


def reduction_ratio(basis, d_model, d_latent, n_preserved):
    """Fractional cache reduction as an exact :class:`~fractions.Fraction`.

    ``key_only`` compares the cached ``d_latent + n_preserved`` entries with
    ``d_model`` per token; ``key_value`` compares them with ``2 * d_model``.

    >>> format_percent(reduction_ratio("key_only", 768, 96, 48))
    '81.25%'
    """
    if basis not in BASES:
        raise ArgumentError(f"basis must be one of {BASES}")
    d_model = check_count(d_model, "d_model", minimum=1)
    d_latent = check_count(d_latent, "d_latent", minimum=0)
    n_preserved = check_count(n_preserved, "n_preserved", minimum=0)
    denom = d_model if basis == "key_only" else 2 * d_model
    kept = d_latent + n_preserved
    if kept > denom:
        raise ArgumentError(f"{kept} cached entries exceed the {basis} basis of {denom}")
    return 1 - Fraction(kept, denom)


def format_percent(frac, digits=2):
    """``Fraction(7, 8) -> '87.50%'``; extra digits are kept when non-zero."""
    pct = frac * 100
    text = f"{float(pct):.{digits}f}"
    exact = Fraction(text)
    while exact != pct and digits < 12:
        digits += 1
        text = f"{float(pct):.{digits}f}"
        exact = Fraction(text)
    return text + "%"


@dataclass(frozen=True)
class CacheFootprint:
    """Per-site cache bytes for one (batch, lengths) operating point."""

    encoder_self: int
    decoder_self: int
    cross: int

    @property
    def total(self):
        return self.encoder_self + self.decoder_self + self.cross


def site_entries(spec):
    """Entries per token per layer at each site kind, plus growth flags."""
    return {
        "encoder_self": (spec.encoder_self.entries_per_token, spec.n_encoder_layers, False),
        "decoder_self": (spec.decoder_self.entries_per_token, spec.n_decoder_layers, True),
        "cross": (spec.cross.entries_per_token, spec.n_decoder_layers, False),
    }


def footprint(spec, batch, generated_len, source_len, bytes_per_entry=2):
    """Cache bytes for ``batch`` sequences.

    The decoder self-attention cache grows with ``generated_len``; encoder
    self-attention and cross-attention caches are written once and scale with
    ``source_len``.
    """
    for name, value in (("batch", batch), ("generated_len", generated_len),
                        ("source_len", source_len), ("bytes_per_entry", bytes_per_entry)):
        check_count(value, name, minimum=0)
    per = site_entries(spec)
    lengths = {"encoder_self": source_len, "decoder_self": generated_len, "cross": source_len}
    out = {k: entries * layers * lengths[k] * batch * bytes_per_entry
           for k, (entries, layers, _) in per.items()}
    return CacheFootprint(**out)


def placement_of(spec):
    kinds = [spec.encoder_self.is_mla, spec.decoder_self.is_mla, spec.cross.is_mla]
    if not any(kinds):
        return "none"
    if kinds == [False, True, False]:
        return "dso"
    if all(kinds):
        return "full"
    return "custom"


def mla_spec(base, placement="dso", d_latent=96, r_per_head=2):
    """Copy of an MHA ``base`` spec with MLA at the sites ``placement`` names."""
    variant = "mla_preserving" if r_per_head else "mla_full"
    cfg = AttentionConfig(base.d_model, base.n_heads, variant, d_latent, r_per_head)
    if placement == "dso":
        return base.with_sites(decoder_self=cfg)
    if placement == "full":
        return base.with_sites(encoder_self=cfg, decoder_self=cfg, cross=cfg)
    raise ArgumentError(f"unknown placement {placement!r}")


def whisper_small_spec():
    """Attention geometry of a Whisper-small-sized model (cache accounting only)."""
    return ModelSpec(d_model=768, n_heads=12, n_encoder_layers=12, n_decoder_layers=12,
                     d_ff=3072, vocab_size=51865, max_source_len=1500, max_target_len=4096)


def sweep(specs, batches, lengths, source_len=1500, bytes_per_entry=2, budget_bytes=None):
    """Grid of cache estimates.

    Parameters
    ----------
    specs : dict of label -> ModelSpec
        Usually ``{"mha": ..., "mla": ...}``.
    batches, lengths : sequence of int
        ``lengths`` are generated (decoder) lengths.
    budget_bytes : int, optional
        Rows whose total exceeds it are flagged ``oom``.

    Returns
    -------
    list of dict with keys ``SWEEP_COLUMNS``
    """
    if not batches or not lengths:
        raise ArgumentError("batches and lengths must be non-empty")
    rows = []
    for label, spec in specs.items():
        for b in batches:
            for n in lengths:
                fp = footprint(spec, b, n, source_len, bytes_per_entry)
                rows.append({
                    "model": label,
                    "placement": placement_of(spec),
                    "batch": b,
                    "seq_len": n,
                    "source_len": source_len,
                    "bytes_total": fp.total,
                    "bytes_decoder_self": fp.decoder_self,
                    "bytes_cross": fp.cross,
                    "bytes_encoder_self": fp.encoder_self,
                    "oom": budget_bytes is not None and fp.total > budget_bytes,
                })
    return rows


def to_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({**row, "oom": int(row["oom"])})
    return buf.getvalue()
