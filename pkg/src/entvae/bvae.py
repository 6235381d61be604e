"""Beta-VAE classifier: encoder -> 2-D Gaussian latent -> decoder -> 2-class softmax."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .neuralnet import (
    DROPOUT_RATE,
    LEAKY_SLOPE,
    LOG_FLOOR,
    DenseLayer,
    ParameterBuffer,
    cross_entropy_grad_logits,
    dense_forward,
    dropout,
    glorot_init,
    leaky_relu,
    leaky_relu_grad,
    as_scalar,
    one_hot,
    softmax,
)

ENCODER_WIDTHS = (512, 256, 128, 64, 32)
DECODER_WIDTHS = (32, 64, 128, 256, 512)
INPUT_DIMS = (15, 9, 6)
LATENT_DIM = 2
OUTPUT_DIM = 2
CHECKPOINT_VERSION = 1


class TrainingDiagnostic(FloatingPointError):
    """A loss term became non-finite."""


class CheckpointError(ValueError):
    """A checkpoint document violates a shape or config invariant."""


@dataclass(frozen=True)
class BvaeConfig:
    input_dim: int = 15
    encoder_widths: tuple[int, ...] = ENCODER_WIDTHS
    decoder_widths: tuple[int, ...] = DECODER_WIDTHS
    latent_dim: int = LATENT_DIM
    output_dim: int = OUTPUT_DIM
    dropout_rate: float = DROPOUT_RATE
    leaky_slope: float = LEAKY_SLOPE
    r_cat: float = 500.0
    beta: float = 1.0
    latent_head_dropout: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))
        if self.input_dim not in INPUT_DIMS:
            raise ValueError(f"input_dim must be one of {INPUT_DIMS}, got {self.input_dim}")
        if self.latent_dim != LATENT_DIM or self.output_dim != OUTPUT_DIM:
            raise ValueError("latent and output dimensions are fixed at 2")
        if not self.encoder_widths or not self.decoder_widths or min(self.encoder_widths + self.decoder_widths) < 1:
            raise ValueError("hidden widths must be non-empty and positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.leaky_slope <= 0:
            raise ValueError("leaky_slope must be positive")
        if self.r_cat <= 0 or self.beta < 0:
            raise ValueError("need r_cat > 0 and beta >= 0")

    def scaled(self, factor: int) -> "BvaeConfig":
        """Same topology with every hidden width divided by ``factor``."""
        shrink = lambda ws: tuple(max(1, w // factor) for w in ws)
        return BvaeConfig(**{**asdict(self), "encoder_widths": shrink(self.encoder_widths),
                             "decoder_widths": shrink(self.decoder_widths)})


class LatentParams(NamedTuple):
    mu: np.ndarray
    logvar: np.ndarray


class LatentSample(NamedTuple):
    z: np.ndarray
    epsilon: np.ndarray


class LossTerms(NamedTuple):
    total: float
    cat: float
    kl: float


def sample_latent(params: LatentParams, rng: np.random.Generator | None = None,
                  epsilon: np.ndarray | None = None) -> LatentSample:
    """Reparameterized draw z = mu + exp(logvar / 2) * epsilon."""
    if epsilon is None:
        if rng is None:
            raise ValueError("need an rng or a fixed epsilon")
        epsilon = rng.standard_normal(np.shape(params.mu))
    epsilon = np.asarray(epsilon, dtype=float)
    return LatentSample(params.mu + np.exp(0.5 * params.logvar) * epsilon, epsilon)


def kl_divergence(params: LatentParams) -> float:
    """Batch-mean KL(N(mu, exp(logvar)) || N(0, I))."""
    mu, logvar = np.atleast_2d(params.mu), np.atleast_2d(params.logvar)
    per_row = 0.5 * np.sum(np.exp(logvar) + mu * mu - 1.0 - logvar, axis=-1)
    return as_scalar(np.mean(per_row))


def _layer_names(config: BvaeConfig) -> list[str]:
    return ([f"enc{k}" for k in range(len(config.encoder_widths))] + ["mu", "logvar"]
            + [f"dec{k}" for k in range(len(config.decoder_widths))] + ["out"])


def _layer_shapes(config: BvaeConfig) -> list[tuple[int, int]]:
    enc = (config.input_dim,) + config.encoder_widths
    dec = (config.latent_dim,) + config.decoder_widths + (config.output_dim,)
    shapes = list(zip(enc[:-1], enc[1:]))
    shapes += [(enc[-1], config.latent_dim)] * 2
    shapes += list(zip(dec[:-1], dec[1:]))
    return shapes


class BetaVAE:
    """Model parameters live in one flat buffer; ``layers`` hold views into it."""

    def __init__(self, config: BvaeConfig, rng: np.random.Generator | None = None, seed: int | None = None):
        self.config = config
        self.seed = seed
        self.names = _layer_names(config)
        shapes = _layer_shapes(config)
        param_shapes = []
        for s in shapes:
            param_shapes += [s, (s[1],)]
        self.buffer = ParameterBuffer(param_shapes)
        self.grad_flat, self.grad_views = self.buffer.like()
        n_enc = len(config.encoder_widths)
        self.layers: list[DenseLayer] = []
        for k, (name, (fin, fout)) in enumerate(zip(self.names, shapes)):
            w, b = self.buffer.views[2 * k], self.buffer.views[2 * k + 1]
            if rng is not None:
                w[...] = glorot_init(fin, fout, rng)
            if name in ("mu", "logvar"):
                act = "linear"
            elif name == "out":
                act = "softmax"
            else:
                act = "leaky_relu"
            self.layers.append(DenseLayer(w, b, act, config.leaky_slope))
        self.encoder = self.layers[:n_enc]
        self.mu_head, self.logvar_head = self.layers[n_enc], self.layers[n_enc + 1]
        self.decoder = self.layers[n_enc + 2:]
        self.last_output = None

    @property
    def n_parameters(self) -> int:
        return self.buffer.size

    def parameters(self) -> list[np.ndarray]:
        return self.buffer.views

    def copy(self) -> "BetaVAE":
        clone = BetaVAE(self.config, seed=self.seed)
        clone.buffer.flat[...] = self.buffer.flat
        return clone

    # forward ------------------------------------------------------------

    def _check_input(self, x, dtype=float) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=dtype))
        if x.shape[1] != self.config.input_dim:
            raise ValueError(f"input has {x.shape[1]} columns, model expects {self.config.input_dim}")
        return x

    def _stack(self, layers, h, training, rng, cache, last_dropout=True):
        for k, layer in enumerate(layers):
            a = dense_forward(layer, h)
            rate = self.config.dropout_rate if last_dropout or k < len(layers) - 1 else 0.0
            out, mask = dropout(leaky_relu(a, layer.slope), rate, training, rng)
            if cache is not None:
                cache.append((h, a, mask))
            h = out
        return h

    def encode(self, x, training: bool = False, rng: np.random.Generator | None = None,
               _cache: list | None = None, dtype=float) -> LatentParams:
        h = self._stack(self.encoder, self._check_input(x, dtype), training, rng, _cache,
                        last_dropout=self.config.latent_head_dropout)
        if _cache is not None:
            _cache.append(h)
        return LatentParams(dense_forward(self.mu_head, h), dense_forward(self.logvar_head, h))

    def decode_logits(self, z, training=False, rng=None, _cache=None) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z))
        if z.shape[1] != self.config.latent_dim:
            raise ValueError(f"latent input has {z.shape[1]} columns, expected {self.config.latent_dim}")
        h = self._stack(self.decoder[:-1], z, training, rng, _cache)
        if _cache is not None:
            _cache.append(h)
        return dense_forward(self.decoder[-1], h)

    def decode(self, z, training: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        return softmax(self.decode_logits(z, training, rng))

    def latent_mean(self, x) -> np.ndarray:
        return self.encode(x).mu

    def predict_proba(self, x) -> np.ndarray:
        return self.decode(self.latent_mean(x))

    def predict(self, x) -> np.ndarray:
        # argmax ties resolve to class 0
        return np.argmax(self.predict_proba(x), axis=1)

    # loss ---------------------------------------------------------------

    def _forward(self, x, y, r_cat, beta, training, rng, epsilon, dtype=float):
        enc_cache, dec_cache = [], []
        params = self.encode(x, training, rng, enc_cache, dtype)
        with np.errstate(over="ignore", invalid="ignore"):
            kl = kl_divergence(params)
            if not np.isfinite(kl):
                raise TrainingDiagnostic(f"kl loss term is {kl}")
            sample = sample_latent(params, rng, epsilon)
            logits = self.decode_logits(sample.z, training, rng, dec_cache)
        if not np.all(np.isfinite(logits)):
            raise TrainingDiagnostic("categorical loss term is not finite (decoder logits)")
        p = softmax(logits)
        yh = one_hot(y, self.config.output_dim)
        if yh.shape[0] != p.shape[0]:
            raise ValueError(f"{yh.shape[0]} labels for {p.shape[0]} inputs")
        cat = as_scalar(np.mean(-np.sum(yh * np.log(p + LOG_FLOOR), axis=1)))
        if not np.isfinite(cat):
            raise TrainingDiagnostic(f"categorical loss term is {cat}")
        terms = LossTerms(r_cat * cat + beta * kl, cat, kl)
        return terms, (enc_cache, dec_cache, params, sample, p, yh)

    def _resolve(self, r_cat, beta):
        return (self.config.r_cat if r_cat is None else r_cat,
                self.config.beta if beta is None else beta)

    def loss_total(self, x, y, r_cat=None, beta=None, training=False, rng=None, epsilon=None,
                   dtype=float) -> LossTerms:
        """r_cat * cross-entropy + beta * KL, both averaged over the batch."""
        r_cat, beta = self._resolve(r_cat, beta)
        return self._forward(x, y, r_cat, beta, training, rng, epsilon, dtype)[0]

    def loss(self, x, y, **kw) -> float:
        return self.loss_total(x, y, **kw).total

    def backward(self, x, y, r_cat=None, beta=None, epsilon=None, training=False, rng=None):
        """Forward and backward pass; returns (LossTerms, gradient views).

        ``epsilon`` fixes the latent noise; with ``training`` the dropout
        masks come from ``rng`` and are reused on the way back.
        """
        r_cat, beta = self._resolve(r_cat, beta)
        terms, (enc_cache, dec_cache, params, sample, p, yh) = self._forward(
            x, y, r_cat, beta, training, rng, epsilon)
        self.last_output = p
        batch = p.shape[0]
        gv = self.grad_views
        idx = {name: k for k, name in enumerate(self.names)}

        g = cross_entropy_grad_logits(yh, p) * (r_cat / batch)
        k = idx["out"]
        h_last = dec_cache[-1]
        gv[2 * k][...] = h_last.T @ g
        gv[2 * k + 1][...] = g.sum(axis=0)
        g = g @ self.decoder[-1].weights.T
        g = self._backprop_stack(self.decoder[:-1], dec_cache[:-1], g, idx["dec0"])
        g_z = g

        sigma = np.exp(0.5 * params.logvar)
        g_mu = g_z + beta * params.mu / batch
        g_logvar = g_z * sample.epsilon * 0.5 * sigma + beta * 0.5 * (np.exp(params.logvar) - 1.0) / batch
        h_enc = enc_cache[-1]
        for name, gh, layer in (("mu", g_mu, self.mu_head), ("logvar", g_logvar, self.logvar_head)):
            k = idx[name]
            gv[2 * k][...] = h_enc.T @ gh
            gv[2 * k + 1][...] = gh.sum(axis=0)
        g = g_mu @ self.mu_head.weights.T + g_logvar @ self.logvar_head.weights.T
        self._backprop_stack(self.encoder, enc_cache[:-1], g, idx["enc0"])
        return terms, gv

    def loss_and_grads(self, x, y, **kw):
        terms, grads = self.backward(x, y, **kw)
        return terms.total, grads

    def _backprop_stack(self, layers, cache, g, first):
        gv = self.grad_views
        for j in range(len(layers) - 1, -1, -1):
            layer = layers[j]
            h_in, a, mask = cache[j]
            g = g * mask * leaky_relu_grad(a, layer.slope)
            k = first + j
            gv[2 * k][...] = h_in.T @ g
            gv[2 * k + 1][...] = g.sum(axis=0)
            g = g @ layer.weights.T
        return g

    # checkpoint ---------------------------------------------------------

    def to_dict(self) -> dict:
        cfg = asdict(self.config)
        cfg["encoder_widths"] = list(cfg["encoder_widths"])
        cfg["decoder_widths"] = list(cfg["decoder_widths"])
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": cfg,
            "seed": self.seed,
            "layers": [
                {"name": name, "weights": layer.weights.tolist(), "biases": layer.biases.tolist()}
                for name, layer in zip(self.names, self.layers)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BetaVAE":
        if doc.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported format_version {doc.get('format_version')!r}")
        try:
            config = BvaeConfig(**doc["config"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"invalid config: {exc}") from None
        model = cls(config, seed=doc.get("seed"))
        layers = doc.get("layers")
        if not isinstance(layers, list) or len(layers) != len(model.names):
            raise CheckpointError(f"expected {len(model.names)} layers")
        for entry, name, layer in zip(layers, model.names, model.layers):
            if entry.get("name") != name:
                raise CheckpointError(f"layer order: expected {name!r}, got {entry.get('name')!r}")
            w = np.asarray(entry.get("weights"), dtype=float)
            b = np.asarray(entry.get("biases"), dtype=float)
            if w.shape != layer.weights.shape:
                raise CheckpointError(f"layer {name!r}: weights shape {w.shape} != {layer.weights.shape}")
            if b.shape != layer.biases.shape:
                raise CheckpointError(f"layer {name!r}: biases shape {b.shape} != {layer.biases.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise CheckpointError(f"layer {name!r}: non-finite parameters")
            layer.weights[...] = w
            layer.biases[...] = b
        return model

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict()), encoding="utf-8")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "BetaVAE":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from None
        return cls.from_dict(doc)


def build_model(config: BvaeConfig, rng: np.random.Generator, seed: int | None = None) -> BetaVAE:
    """Glorot-uniform weights, zero biases."""
    return BetaVAE(config, rng=rng, seed=seed)
