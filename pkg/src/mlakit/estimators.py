"""scikit-learn style wrappers.

``MlaConverter`` learns the per-layer subspace selections in ``fit`` and
applies the joint-SVD conversion in ``transform``. ``Seq2SeqEstimator``
trains (or fine-tunes) the toy model with ``fit`` and decodes with
``predict``. Both inherit ``get_params``/``set_params`` from
``BaseEstimator`` so they clone and grid-search like any other estimator.
"""

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import Checkpoint
from .conversion import ConversionSpec, choose_selections, convert_model
from .errors import ArgumentError
from .memory import reduction_ratio
from .model import ModelSpec, Seq2SeqModel
from .training import TrainConfig, evaluate, train_on
from .validation import check_tokens


def _as_model(obj):
    if isinstance(obj, Checkpoint):
        return obj.to_model()
    if isinstance(obj, Seq2SeqModel):
        return obj
    raise ArgumentError(f"expected a Checkpoint or Seq2SeqModel, got {type(obj).__name__}")


def _check_pairs(X, y, vocab_size):
    if y is None or len(X) != len(y):
        raise ArgumentError("X and y must be sequences of equal length")
    if not len(X):
        raise ArgumentError("X is empty")
    return [(check_tokens(s, vocab_size, "source"), check_tokens(t, vocab_size, "target"))
            for s, t in zip(X, y)]


class MlaConverter(BaseEstimator, TransformerMixin):
    """Convert MHA checkpoints to latent attention.

    Parameters
    ----------
    strategy : {"uniform", "two_norm", "full_compression"}
    d_latent : int
    r_per_head : int
        Preserved frequency subspaces per head (ignored, and forced to 0,
        for ``full_compression``).
    placement : {"dso", "full"}
    """

    def __init__(self, strategy="uniform", d_latent=8, r_per_head=1, placement="dso"):
        self.strategy = strategy
        self.d_latent = d_latent
        self.r_per_head = r_per_head
        self.placement = placement

    def fit(self, X, y=None, calibration=None):
        model = _as_model(X)
        r = 0 if self.strategy == "full_compression" else self.r_per_head
        spec = ConversionSpec(self.strategy, self.d_latent, r, self.placement,
                              tuple(calibration) if calibration is not None else None)
        self.conversion_spec_ = spec
        self.selections_ = choose_selections(model, spec)
        n_preserved = 2 * r * model.spec.n_heads
        self.reduction_ = {
            basis: reduction_ratio(basis, model.spec.d_model, self.d_latent, n_preserved)
            for basis in ("key_only", "key_value")
        }
        return self

    def transform(self, X):
        check_is_fitted(self, "selections_")
        return convert_model(X, self.conversion_spec_, self.selections_)


class Seq2SeqEstimator(BaseEstimator):
    """Train the toy encoder-decoder on ``(source, target)`` token lists.

    When ``init_model`` is given it is fine-tuned instead of a fresh model
    being created; ``freeze`` names parameter groups to keep fixed.
    """

    def __init__(self, d_model=64, n_heads=4, n_encoder_layers=2, n_decoder_layers=2,
                 d_ff=256, vocab_size=64, epochs=20, learning_rate=1e-3, batch_size=16,
                 seed=0, init_model=None, freeze=()):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_encoder_layers = n_encoder_layers
        self.n_decoder_layers = n_decoder_layers
        self.d_ff = d_ff
        self.vocab_size = vocab_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed
        self.init_model = init_model
        self.freeze = freeze

    def _start_model(self):
        if self.init_model is not None:
            return _as_model(self.init_model)
        spec = ModelSpec(d_model=self.d_model, n_heads=self.n_heads,
                         n_encoder_layers=self.n_encoder_layers,
                         n_decoder_layers=self.n_decoder_layers, d_ff=self.d_ff,
                         vocab_size=self.vocab_size)
        return Seq2SeqModel.initialize(spec, self.seed)

    def fit(self, X, y):
        start = self._start_model()
        pairs = _check_pairs(X, y, start.spec.vocab_size)
        cfg = TrainConfig(epochs=self.epochs, learning_rate=self.learning_rate,
                          batch_size=self.batch_size, seed=self.seed)
        self.model_, self.trace_ = train_on(start, pairs, cfg, self.freeze)
        return self

    def predict(self, X, max_len=None):
        check_is_fitted(self, "model_")
        return [self.model_.greedy_decode(s, max_len) for s in X]

    def score(self, X, y):
        """Teacher-forced token accuracy (EOS included)."""
        check_is_fitted(self, "model_")
        return evaluate(self.model_, _check_pairs(X, y, self.model_.spec.vocab_size))[1]
