"""Model assembly: conv encoder, transposed-conv decoder, emotion classifier
with attention pooling and center loss, and the augmentation-type classifier.

Ablation flags select which subnetworks exist; parameter initialization is
keyed by (seed, parameter name) so toggling one component never changes the
initial values of another.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError, ValidationError

ATTENTION_PARAM = "c_e.attention.w"


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple[int, int]
    channels: int
    stride: tuple[int, int] = (1, 1)


DEFAULT_ENCODER = (
    ConvSpec((7, 7), 32, (2, 2)),
    ConvSpec((3, 3), 64, (2, 2)),
    ConvSpec((3, 3), 64, (1, 1)),
    ConvSpec((3, 3), 128, (1, 1)),
)


@dataclass(frozen=True)
class ModelConfig:
    input_mels: int = 128
    input_frames: int = 747
    encoder: tuple[ConvSpec, ...] = DEFAULT_ENCODER
    c_e_units: int = 128
    c_e_dense: int = 128
    n_classes: int = 4
    c_a_units: int = 256
    c_a_dense: int = 128
    c_a_dropout: float = 0.3
    n_aug_classes: int = 4
    use_attention: bool = True
    use_center_loss: bool = True
    use_aux_augtype: bool = True
    use_aux_reconstruction: bool = True
    lambda1: float = 0.5
    lambda2: float = 0.3
    center_alpha: float = 0.5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or not np.isfinite(self.lambda1) \
                or not np.isfinite(self.lambda2):
            raise ValidationError("lambda weights must be finite and non-negative")
        if not 0.0 <= self.c_a_dropout < 1.0:
            raise ValidationError("dropout rate must be in [0, 1)")
        if self.input_mels < 1 or self.input_frames < 1:
            raise ValidationError("input shape must be positive")

    @property
    def uses_aux(self) -> bool:
        return self.use_aux_augtype or self.use_aux_reconstruction

    def shape_trace(self) -> list[tuple[int, int, int]]:
        """(channels, mel bins, frames) after each encoder layer."""
        shapes = [(1, self.input_mels, self.input_frames)]
        for spec in self.encoder:
            c, h, w = shapes[-1]
            kh, kw = spec.kernel
            sh, sw = spec.stride
            ph, pw = kh // 2, kw // 2
            h = (h + 2 * ph - kh) // sh + 1
            w = (w + 2 * pw - kw) // sw + 1
            if h < 1 or w < 1:
                raise ValidationError("encoder downsamples the input away")
            shapes.append((spec.channels, h, w))
        return shapes

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.shape_trace()[-1]

    @property
    def latent_seq_width(self) -> int:
        c, f, _ = self.latent_shape
        return c * f

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = [{"kernel": list(s.kernel), "channels": s.channels,
                         "stride": list(s.stride)} for s in self.encoder]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = tuple(ConvSpec(tuple(s["kernel"]), s["channels"], tuple(s["stride"]))
                             for s in d["encoder"])
        return cls(**d)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:12]


def ablation_config(base: ModelConfig, model_id: int) -> ModelConfig:
    """The five ablation rows: 1 = full model down to 5 = plain CNN-BLSTM."""
    if model_id == 1:
        return replace(base, use_attention=True, use_center_loss=True,
                       use_aux_augtype=True, use_aux_reconstruction=True)
    if model_id == 2:
        return replace(base, use_attention=True, use_center_loss=True,
                       use_aux_augtype=False, use_aux_reconstruction=True)
    if model_id == 3:
        return replace(base, use_attention=True, use_center_loss=True,
                       use_aux_augtype=False, use_aux_reconstruction=False, lambda1=0.0)
    if model_id == 4:
        return replace(base, use_attention=True, use_center_loss=False,
                       use_aux_augtype=False, use_aux_reconstruction=False,
                       lambda1=0.0, lambda2=0.0)
    if model_id == 5:
        return replace(base, use_attention=False, use_center_loss=False,
                       use_aux_augtype=False, use_aux_reconstruction=False,
                       lambda1=0.0, lambda2=0.0)
    raise ValidationError(f"ablation model id must be 1..5, got {model_id}")


def _named_rng(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(name.encode()).digest()
    return np.random.default_rng(np.random.SeedSequence(
        (seed, int.from_bytes(digest[:8], "little"))))


def _lstm_params(seed: int, prefix: str, in_dim: int, units: int) -> dict[str, ad.Tensor]:
    w_x = ad.glorot_uniform((in_dim, 4 * units), _named_rng(seed, f"{prefix}.w_x"))
    rng_h = _named_rng(seed, f"{prefix}.w_h")
    w_h = np.concatenate([ad.orthogonal((units, units), rng_h) for _ in range(4)], axis=1)
    b = np.zeros(4 * units)
    b[units:2 * units] = 1.0  # forget-gate bias
    return {
        f"{prefix}.w_x": ad.Tensor(w_x, requires_grad=True),
        f"{prefix}.w_h": ad.Tensor(w_h, requires_grad=True),
        f"{prefix}.b": ad.Tensor(b, requires_grad=True),
    }


def attention_pool(h: ad.Tensor, w: ad.Tensor) -> tuple[ad.Tensor, np.ndarray]:
    """Softmax-weighted sum over time of (N, T, D) given a d-vector of scores.

    Returns the pooled (N, D) tensor and the realized weights for inspection.
    """
    n, t, d = h.shape
    scores = ad.reshape(ad.matmul(h, ad.reshape(w, (d, 1))), (n, t))
    alpha = ad.softmax(scores, axis=-1)
    weighted = ad.mul(h, ad.reshape(alpha, (n, t, 1)))
    return ad.reduce_sum(weighted, axis=1), alpha.data


def mean_pool(h: ad.Tensor) -> ad.Tensor:
    return ad.reduce_mean(h, axis=1)


class Model:
    """Parameter container plus forward passes for all subnetworks."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        if config.lambda1 > 0 and not config.uses_aux:
            raise ConfigError(
                "model.lambda1: positive weight but both auxiliary tasks are disabled")
        self.config = config
        self.seed = seed
        self.params: dict[str, ad.Tensor] = {}
        self.input_mean = 0.0
        self.input_std = 1.0
        trace = config.shape_trace()

        for i, spec in enumerate(config.encoder):
            c_in = trace[i][0]
            shape = (spec.channels, c_in, *spec.kernel)
            self.params[f"encoder.conv{i}.w"] = ad.Tensor(
                ad.glorot_uniform(shape, _named_rng(seed, f"encoder.conv{i}.w")),
                requires_grad=True)
            self.params[f"encoder.conv{i}.b"] = ad.Tensor(
                np.zeros(spec.channels), requires_grad=True)

        if config.use_aux_reconstruction:
            rev = list(enumerate(config.encoder))[::-1]
            for j, (i, spec) in enumerate(rev):
                c_in, c_out = trace[i + 1][0], trace[i][0]
                shape = (c_in, c_out, *spec.kernel)
                self.params[f"decoder.convt{j}.w"] = ad.Tensor(
                    ad.glorot_uniform(shape, _named_rng(seed, f"decoder.convt{j}.w")),
                    requires_grad=True)
                self.params[f"decoder.convt{j}.b"] = ad.Tensor(
                    np.zeros(c_out), requires_grad=True)

        d_seq = config.latent_seq_width
        self.params.update(_lstm_params(seed, "c_e.lstm_fwd", d_seq, config.c_e_units))
        self.params.update(_lstm_params(seed, "c_e.lstm_bwd", d_seq, config.c_e_units))
        d_out = 2 * config.c_e_units
        if config.use_attention:
            self.params[ATTENTION_PARAM] = ad.Tensor(
                ad.glorot_uniform((d_out,), _named_rng(seed, ATTENTION_PARAM),
                                  fan_in=d_out, fan_out=1),
                requires_grad=True)
        self.params["c_e.dense1.w"] = ad.Tensor(
            ad.glorot_uniform((d_out, config.c_e_dense), _named_rng(seed, "c_e.dense1.w")),
            requires_grad=True)
        self.params["c_e.dense1.b"] = ad.Tensor(np.zeros(config.c_e_dense), requires_grad=True)
        self.params["c_e.out.w"] = ad.Tensor(
            ad.glorot_uniform((config.c_e_dense, config.n_classes),
                              _named_rng(seed, "c_e.out.w")), requires_grad=True)
        self.params["c_e.out.b"] = ad.Tensor(np.zeros(config.n_classes), requires_grad=True)

        if config.use_aux_augtype:
            self.params.update(_lstm_params(seed, "c_a.lstm_fwd", d_seq, config.c_a_units))
            self.params.update(_lstm_params(seed, "c_a.lstm_bwd", d_seq, config.c_a_units))
            d_a = 2 * config.c_a_units
            self.params["c_a.dense1.w"] = ad.Tensor(
                ad.glorot_uniform((d_a, config.c_a_dense), _named_rng(seed, "c_a.dense1.w")),
                requires_grad=True)
            self.params["c_a.dense1.b"] = ad.Tensor(np.zeros(config.c_a_dense), requires_grad=True)
            self.params["c_a.dense2.w"] = ad.Tensor(
                ad.glorot_uniform((config.c_a_dense, config.c_a_dense),
                                  _named_rng(seed, "c_a.dense2.w")), requires_grad=True)
            self.params["c_a.dense2.b"] = ad.Tensor(np.zeros(config.c_a_dense), requires_grad=True)
            self.params["c_a.out.w"] = ad.Tensor(
                ad.glorot_uniform((config.c_a_dense, config.n_aug_classes),
                                  _named_rng(seed, "c_a.out.w")), requires_grad=True)
            self.params["c_a.out.b"] = ad.Tensor(np.zeros(config.n_aug_classes),
                                                 requires_grad=True)

        self.centers = np.zeros((config.n_classes, config.c_e_dense), dtype=np.float32) \
            if config.use_center_loss else None

    # -- parameter bookkeeping ------------------------------------------------

    def param_names(self, group: str | None = None) -> set[str]:
        if group is None:
            return set(self.params)
        return {n for n in self.params if n.startswith(group + ".")}

    def parameter_count(self) -> int:
        count = sum(p.data.size for p in self.params.values())
        if self.centers is not None:
            count += self.centers.size
        return count

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.params.items()}
        if self.centers is not None:
            state["centers"] = self.centers.copy()
        state["input_stats"] = np.array([self.input_mean, self.input_std])
        return state

    def restore(self, state: dict[str, np.ndarray]):
        for name, p in self.params.items():
            p.data = state[name].copy()
        if self.centers is not None:
            self.centers = state["centers"].copy()
        self.input_mean, self.input_std = (float(x) for x in state["input_stats"])

    # -- forward passes --------------------------------------------------------

    def _check_input(self, x: np.ndarray):
        expected = (1, self.config.input_mels, self.config.input_frames)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"model input must be (N, {expected[0]}, {expected[1]}, "
                             f"{expected[2]}), got {x.shape}")

    def encode(self, x, requires_input_grad: bool = False):
        """Run the conv stack; returns (feature map, time-major sequence)."""
        xd = np.asarray(x, dtype=ad.current_dtype())
        self._check_input(xd)
        t = ad.Tensor(xd, requires_grad=requires_input_grad)
        h = ad.scale(ad.add(t, -self.input_mean), 1.0 / self.input_std)
        for i, spec in enumerate(self.config.encoder):
            ph, pw = spec.kernel[0] // 2, spec.kernel[1] // 2
            h = ad.conv2d(h, self.params[f"encoder.conv{i}.w"], spec.stride, (ph, pw))
            h = ad.bias_add(h, self.params[f"encoder.conv{i}.b"], axis=1)
            h = ad.relu(h)
        n = h.shape[0]
        c, f, frames = self.config.latent_shape
        seq = ad.reshape(ad.transpose(h, (0, 3, 1, 2)), (n, frames, c * f))
        return t, h, seq

    def decode(self, latent_map: ad.Tensor) -> ad.Tensor:
        """Reconstruct the (normalized) input from the latent map."""
        trace = self.config.shape_trace()
        rev = list(enumerate(self.config.encoder))[::-1]
        h = latent_map
        for j, (i, spec) in enumerate(rev):
            kh, kw = spec.kernel
            ph, pw = kh // 2, kw // 2
            sh, sw = spec.stride
            target_h, target_w = trace[i][1], trace[i][2]
            in_h, in_w = trace[i + 1][1], trace[i + 1][2]
            oph = target_h - ((in_h - 1) * sh - 2 * ph + kh)
            opw = target_w - ((in_w - 1) * sw - 2 * pw + kw)
            h = ad.conv2d_transpose(h, self.params[f"decoder.convt{j}.w"],
                                    (sh, sw), (ph, pw), (oph, opw))
            h = ad.bias_add(h, self.params[f"decoder.convt{j}.b"], axis=1)
            if j < len(rev) - 1:
                h = ad.relu(h)
        return h

    def normalized_input(self, x_tensor: ad.Tensor) -> ad.Tensor:
        return ad.scale(ad.add(x_tensor, -self.input_mean), 1.0 / self.input_std)

    def classify_emotion(self, seq: ad.Tensor):
        """BLSTM, pooling, dense; returns (logits, deep features for center loss)."""
        fwd = tuple(self.params[f"c_e.lstm_fwd.{k}"] for k in ("w_x", "w_h", "b"))
        bwd = tuple(self.params[f"c_e.lstm_bwd.{k}"] for k in ("w_x", "w_h", "b"))
        out, _ = ad.bilstm(seq, fwd, bwd)
        if self.config.use_attention:
            pooled, _ = attention_pool(out, self.params[ATTENTION_PARAM])
        else:
            pooled = mean_pool(out)
        feats = ad.relu(ad.bias_add(ad.matmul(pooled, self.params["c_e.dense1.w"]),
                                    self.params["c_e.dense1.b"]))
        logits = ad.bias_add(ad.matmul(feats, self.params["c_e.out.w"]),
                             self.params["c_e.out.b"])
        return logits, feats

    def classify_augtype(self, seq: ad.Tensor, train: bool = False,
                         rng: np.random.Generator | None = None) -> ad.Tensor:
        fwd = tuple(self.params[f"c_a.lstm_fwd.{k}"] for k in ("w_x", "w_h", "b"))
        bwd = tuple(self.params[f"c_a.lstm_bwd.{k}"] for k in ("w_x", "w_h", "b"))
        _, last = ad.bilstm(seq, fwd, bwd)
        h = ad.relu(ad.bias_add(ad.matmul(last, self.params["c_a.dense1.w"]),
                                self.params["c_a.dense1.b"]))
        h = ad.dropout(h, self.config.c_a_dropout, train, rng)
        h = ad.relu(ad.bias_add(ad.matmul(h, self.params["c_a.dense2.w"]),
                                self.params["c_a.dense2.b"]))
        return ad.bias_add(ad.matmul(h, self.params["c_a.out.w"]),
                           self.params["c_a.out.b"])

    def predict_emotion(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Eval-mode class probabilities, shape (N, n_classes)."""
        probs = []
        for lo in range(0, x.shape[0], batch_size):
            _, _, seq = self.encode(x[lo:lo + batch_size])
            logits, _ = self.classify_emotion(seq)
            probs.append(ad.softmax(logits).data)
        return np.concatenate(probs, axis=0)


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    return Model(config, seed)
