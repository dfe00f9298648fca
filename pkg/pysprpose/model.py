"""
A small fully-convolutional two-branch regressor trained with manually
derived gradients.

Every stage is three 3x3 convolutions (16, 32, 32 channels) with ReLU,
followed by two 1x1 heads: a sigmoid confidence head (1 channel) and a
linear displacement head (d*K channels).  Stage t > 1 reads the image
concatenated with the previous stage's features; every stage is supervised
with the full loss.  All convolutions are stride 1 and padding preserving, so
output maps have the input's spatial size.

The backbone is a plain convolution stack, not an hourglass network.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit
from tqdm import tqdm

from .decoder import decode
from .encoder import ConfidenceMap, DisplacementMapStack, canonical_mode, encode_scene
from .errors import DataError, TensorFormatError, TrainingDiverged
from .loss import LossConfig, relative_error, total_loss
from .tensorio import atomic_write_bytes, pack_tensor, unpack_tensor

logger = logging.getLogger(__name__)

STAGE_WIDTHS = (16, 32, 32)
INPUT_MEAN = 0.5
INPUT_STD = 1.0

CHECKPOINT_MAGIC = b"SPMC"
CHECKPOINT_VERSION = 1


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def conv3x3(x, w, b):
    """
    Same-padded 3x3 convolution of an (H, W, Cin) array with weights
    (Cin, 3, 3, Cout).
    :return: (output (H, W, Cout), im2col matrix kept for backward)
    """
    h, wd, cin = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(0, 1)).reshape(h * wd, cin * 9)
    out = cols @ w.reshape(cin * 9, -1) + b
    return out.reshape(h, wd, -1), cols


def conv3x3_backward(dy, cols, w, x_shape):
    h, wd, cin = x_shape
    cout = w.shape[-1]
    dy2 = dy.reshape(h * wd, cout)
    dw = (cols.T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ w.reshape(cin * 9, cout).T).reshape(h, wd, cin, 3, 3)
    dxp = np.zeros((h + 2, wd + 2, cin), dtype=dy.dtype)
    for a in range(3):
        for c in range(3):
            dxp[a:a + h, c:c + wd] += dcols[:, :, :, a, c]
    return dxp[1:-1, 1:-1], dw, db


class ToyRegressor(object):
    """
    Multi-stage confidence / displacement regressor.

    Parameters live in an ordered dict keyed 'stage{t}.{layer}.{w|b}'.
    """

    def __init__(self, num_joints, dim=2, stages=2, widths=STAGE_WIDTHS, seed=0, dtype=np.float32,
                 init="glorot"):
        if dim != 2:
            raise ValueError("ToyRegressor predicts 2D maps only, got dim {0}".format(dim))
        if stages < 1:
            raise ValueError("stages must be >= 1, got {0}".format(stages))
        if num_joints < 1:
            raise ValueError("num_joints must be >= 1, got {0}".format(num_joints))
        if init not in ("glorot", "zeros"):
            raise ValueError("init must be 'glorot' or 'zeros', got '{0}'".format(init))
        self.num_joints = int(num_joints)
        self.dim = dim
        self.stages = int(stages)
        self.widths = tuple(int(c) for c in widths)
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.params = OrderedDict()
        rng = np.random.default_rng(seed)
        zeros = init == "zeros"
        for t in range(self.stages):
            cin = 3 if t == 0 else 3 + self.widths[-1]
            for i, cout in enumerate(self.widths):
                self._add(rng, "stage{0}.conv{1}".format(t, i), (cin, 3, 3, cout), cin * 9, cout * 9, zeros)
                cin = cout
            self._add(rng, "stage{0}.conf".format(t), (cin, 1), cin, 1, zeros)
            self._add(rng, "stage{0}.disp".format(t), (cin, dim * self.num_joints), cin,
                      dim * self.num_joints, zeros)

    def _add(self, rng, name, shape, fan_in, fan_out, zeros):
        if zeros:
            self.params[name + ".w"] = np.zeros(shape, dtype=self.dtype)
        else:
            self.params[name + ".w"] = glorot_uniform(rng, shape, fan_in, fan_out, self.dtype)
        self.params[name + ".b"] = np.zeros(shape[-1], dtype=self.dtype)

    @property
    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def architecture(self):
        return {"num_joints": self.num_joints, "dim": self.dim, "stages": self.stages,
                "widths": list(self.widths)}

    def astype(self, dtype):
        clone = ToyRegressor(self.num_joints, self.dim, self.stages, self.widths, self.seed, dtype, init="zeros")
        for name, value in self.params.items():
            clone.params[name] = value.astype(dtype)
        return clone

    def copy(self):
        return self.astype(self.dtype)

    def forward(self, image):
        """
        :param image: (H, W, 3) values in [0, 1]
        :return: (list of (confidence (H, W), displacement (H, W, d*K)) per stage, activation cache)
        """
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise DataError("Expected an (H, W, 3) image, got shape {0}".format(image.shape))
        x0 = (image.astype(self.dtype) - INPUT_MEAN) / INPUT_STD
        h, w = x0.shape[:2]
        outputs, stage_caches = [], []
        feat = None
        for t in range(self.stages):
            x = x0 if t == 0 else np.concatenate([x0, feat], axis=2)
            layers = []
            for i in range(len(self.widths)):
                z, cols = conv3x3(x, self.params["stage{0}.conv{1}.w".format(t, i)],
                                  self.params["stage{0}.conv{1}.b".format(t, i)])
                layers.append((x.shape, cols, z))
                x = np.maximum(z, 0)
            feat = x
            flat = feat.reshape(h * w, -1)
            conf = expit(flat @ self.params["stage{0}.conf.w".format(t)]
                         + self.params["stage{0}.conf.b".format(t)]).reshape(h, w)
            disp = (flat @ self.params["stage{0}.disp.w".format(t)]
                    + self.params["stage{0}.disp.b".format(t)]).reshape(h, w, -1)
            stage_caches.append({"layers": layers, "feat": feat, "conf": conf})
            outputs.append((conf, disp))
        return outputs, {"stages": stage_caches, "shape": (h, w)}

    def backward(self, cache, stage_grads):
        """
        Back-propagate per-stage output gradients.
        :param stage_grads: list of (d loss / d confidence, d loss / d displacement)
        :return: OrderedDict of parameter gradients
        """
        if len(stage_grads) != self.stages:
            raise DataError("Expected {0} stage gradients, got {1}".format(self.stages, len(stage_grads)))
        grads = OrderedDict((name, np.zeros_like(p)) for name, p in self.params.items())
        h, w = cache["shape"]
        carry = None
        for t in reversed(range(self.stages)):
            sc = cache["stages"][t]
            gconf, gdisp = (np.asarray(g, dtype=self.dtype) for g in stage_grads[t])
            feat = sc["feat"]
            flat = feat.reshape(h * w, -1)
            conf = sc["conf"]
            dz_conf = (gconf * conf * (1.0 - conf)).reshape(h * w, 1)
            dz_disp = gdisp.reshape(h * w, -1)
            prefix = "stage{0}.".format(t)
            grads[prefix + "conf.w"] = flat.T @ dz_conf
            grads[prefix + "conf.b"] = dz_conf.sum(axis=0)
            grads[prefix + "disp.w"] = flat.T @ dz_disp
            grads[prefix + "disp.b"] = dz_disp.sum(axis=0)
            dx = (dz_conf @ self.params[prefix + "conf.w"].T
                  + dz_disp @ self.params[prefix + "disp.w"].T).reshape(feat.shape)
            if carry is not None:
                dx = dx + carry
            for i in reversed(range(len(self.widths))):
                x_shape, cols, z = sc["layers"][i]
                name = "{0}conv{1}".format(prefix, i)
                dx, grads[name + ".w"], grads[name + ".b"] = conv3x3_backward(
                    dx * (z > 0), cols, self.params[name + ".w"], x_shape)
            carry = dx[:, :, 3:]
        return grads


def forward(model, image):
    """Per-stage (ConfidenceMap, DisplacementMapStack) for one image."""
    outputs, _ = model.forward(image)
    return [(ConfidenceMap(conf), DisplacementMapStack.dense(disp, dim=model.dim)) for conf, disp in outputs]


def backward(model, image, stage_grads):
    _, cache = model.forward(image)
    return model.backward(cache, stage_grads)


def activation_pattern(cache):
    return np.concatenate([(z > 0).ravel() for sc in cache["stages"] for _, _, z in sc["layers"]])


@dataclass(frozen=True)
class GradientCheckResult:
    max_relative_error: float
    checked: int
    skipped: int


def gradient_check(model, image, targets, loss_cfg=None, samples=50, step=1e-5, seed=0, floor=1e-7,
                   stage_weights=None):
    """
    Central finite differences on a random sample of parameters, in double
    precision.  Samples whose perturbation flips a ReLU are skipped.
    """
    net = model.astype(np.float64)
    image = np.asarray(image, dtype=np.float64)

    def evaluate():
        outputs, cache = net.forward(image)
        value, sg = total_loss(outputs, targets, loss_cfg, stage_weights)
        return value, sg, cache

    _, stage_grads, cache = evaluate()
    analytic = net.backward(cache, stage_grads)
    base = activation_pattern(cache)
    names = list(net.params)
    sizes = np.array([net.params[n].size for n in names])
    rng = np.random.default_rng(seed)
    picks = rng.choice(int(sizes.sum()), size=min(samples, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst, checked, skipped = 0.0, 0, 0
    for flat_index in picks:
        slot = int(np.searchsorted(bounds, flat_index, side="right"))
        name = names[slot]
        offset = int(flat_index - (bounds[slot] - sizes[slot]))
        values = net.params[name].reshape(-1)
        orig = values[offset]
        values[offset] = orig + step
        plus, _, cache_p = evaluate()
        values[offset] = orig - step
        minus, _, cache_m = evaluate()
        values[offset] = orig
        if not (np.array_equal(activation_pattern(cache_p), base)
                and np.array_equal(activation_pattern(cache_m), base)):
            skipped += 1
            continue
        numeric = (plus - minus) / (2.0 * step)
        worst = max(worst, relative_error(float(analytic[name].reshape(-1)[offset]), numeric, floor))
        checked += 1
    logger.debug("Gradient check: %d checked, %d skipped, max rel error %.3g", checked, skipped, worst)
    return GradientCheckResult(max_relative_error=worst, checked=checked, skipped=skipped)


@dataclass(frozen=True)
class TrainConfig:
    """
    RMSprop settings.  The learning rate is multiplied by decay_factor at
    each epoch listed in milestones.
    """
    learning_rate: float = 0.003
    epochs: int = 500
    seed: int = 0
    rho: float = 0.99
    epsilon: float = 1e-8
    milestones: Tuple[int, ...] = ()
    decay_factor: float = 0.5
    loss: LossConfig = field(default_factory=LossConfig)
    stage_weights: Optional[Tuple[float, ...]] = None
    progress: bool = False

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0, got {0}".format(self.learning_rate))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1, got {0}".format(self.epochs))
        if not 0 <= self.rho < 1:
            raise ValueError("rho must be in [0, 1), got {0}".format(self.rho))
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must be in (0, 1], got {0}".format(self.decay_factor))
        object.__setattr__(self, "milestones", tuple(sorted(int(m) for m in self.milestones)))

    def learning_rate_at(self, epoch):
        drops = sum(1 for m in self.milestones if epoch >= m)
        return self.learning_rate * self.decay_factor ** drops


class Trainer(object):

    def __init__(self, model, cfg=None):
        self.logger = logging.getLogger(__name__)
        self.model = model
        self.cfg = cfg or TrainConfig()
        self.mean_square = OrderedDict((n, np.zeros_like(p)) for n, p in model.params.items())

    def loss_and_grads(self, image, targets):
        outputs, cache = self.model.forward(image)
        value, stage_grads = total_loss(outputs, targets, self.cfg.loss, self.cfg.stage_weights)
        return value, self.model.backward(cache, stage_grads)

    def apply(self, grads, lr):
        rho, eps = self.cfg.rho, self.cfg.epsilon
        for name, g in grads.items():
            ms = self.mean_square[name]
            ms *= rho
            ms += (1.0 - rho) * g * g
            self.model.params[name] -= (lr * g / (np.sqrt(ms) + eps)).astype(self.model.dtype)

    def fit(self, dataset):
        """
        One RMSprop step per sample, samples shuffled per epoch with the
        configured seed.
        :return: list with the mean pre-update loss of each epoch
        """
        if not dataset:
            raise ValueError("train_toy needs a non-empty dataset")
        rng = np.random.default_rng(self.cfg.seed)
        history = []
        epochs = tqdm(range(self.cfg.epochs), desc="train", disable=not self.cfg.progress)
        for epoch in epochs:
            lr = self.cfg.learning_rate_at(epoch)
            losses = np.zeros(len(dataset))
            for i in rng.permutation(len(dataset)):
                image, targets = dataset[i]
                value, grads = self.loss_and_grads(image, targets)
                if not math.isfinite(value):
                    raise TrainingDiverged(epoch, value)
                losses[i] = value
                if lr > 0:
                    self.apply(grads, lr)
            mean = float(losses.mean())
            history.append(mean)
            if self.cfg.progress:
                epochs.set_postfix(loss="{0:.5f}".format(mean))
            self.logger.debug("epoch %d lr %.5g loss %.6f", epoch, lr, mean)
        self.logger.info("Trained %d epochs, final loss %.6f", self.cfg.epochs, history[-1])
        return history


def train_toy(model, dataset, cfg=None):
    """
    :param dataset: list of (image, (ConfidenceMap, DisplacementMapStack))
    :return: (model, per-epoch loss history)
    """
    history = Trainer(model, cfg).fit(dataset)
    return model, history


def build_training_set(samples, spec, mode, enc_cfg):
    """
    :param samples: list of (Scene, uint8 image (H, W, 3))
    :return: list of (float image in [0, 1], (ConfidenceMap, DisplacementMapStack))
    """
    mode = canonical_mode(mode)
    out = []
    for scene, image in samples:
        cmap, dstack, _ = encode_scene(scene, spec, mode, enc_cfg)
        out.append((np.asarray(image, dtype=np.float64) / 255.0, (cmap, dstack)))
    return out


def predict(model, image, enc_cfg, spec, mode, nms=None):
    """Decode the last stage's maps into poses."""
    conf, disp = model.forward(image)[0][-1]
    cmap = ConfidenceMap(conf.astype(np.float64))
    dstack = DisplacementMapStack.dense(disp.astype(np.float64), dim=model.dim, mode=canonical_mode(mode))
    return decode(cmap, dstack, enc_cfg, spec, nms)


def save_checkpoint(model, path, epoch=None, extra=None):
    """
    SPMC container: magic, u32 version, u32 header length, JSON header,
    then one SPMT tensor record per parameter in header order.
    """
    header = {"architecture": model.architecture(), "seed": model.seed, "epoch": epoch,
              "parameters": list(model.params)}
    if extra:
        header.update(extra)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(pack_tensor(p) for p in model.params.values())
    atomic_write_bytes(path, CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(raw)) + raw + body)
    logger.info("Wrote checkpoint %s (%d parameters)", path, model.num_parameters)


def load_checkpoint(path, dtype=np.float32):
    """:return: (ToyRegressor, header dict)"""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC or len(data) < 12:
        raise TensorFormatError("{0}: not a model checkpoint".format(path))
    version, size = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise TensorFormatError("{0}: unsupported checkpoint version {1}".format(path, version))
    try:
        header = json.loads(data[12:12 + size].decode("utf-8"))
    except ValueError as e:
        raise TensorFormatError("{0}: bad checkpoint header: {1}".format(path, e))
    arch = header["architecture"]
    model = ToyRegressor(arch["num_joints"], arch["dim"], arch["stages"], tuple(arch["widths"]),
                         seed=header.get("seed", 0), dtype=dtype, init="zeros")
    offset = 12 + size
    for name in header["parameters"]:
        if name not in model.params:
            raise TensorFormatError("{0}: unknown parameter '{1}'".format(path, name))
        tensor, offset = unpack_tensor(data, offset)
        if tensor.shape != model.params[name].shape:
            raise TensorFormatError("{0}: parameter '{1}' has shape {2}, expected {3}".format(
                path, name, tensor.shape, model.params[name].shape))
        model.params[name] = tensor.astype(dtype)
    if offset != len(data):
        raise TensorFormatError("{0}: trailing bytes after the last parameter".format(path))
    return model, header
