"""ColonTCN and MS-ColonTCN: configuration, parameters, forward/backward, profiling.

A stage is ``entry -> L temporal blocks -> 1x1 head -> softmax``. Block ``l``
uses dilation ``2**l``. Refinement stages read the previous stage's class
probabilities and have their own weights.
"""

from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional

import numpy as np

from colontcn import seqcore
from colontcn.seqcore import ConvGrads, ConvParams


@dataclass
class BlockConfig:
    kernel_size: int = 7
    channels: int = 64
    dropout_rate: float = 0.5
    double_conv: bool = True
    residual: bool = True
    weight_norm: bool = True

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 != 1:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def convs_per_block(self):
        return 2 if self.double_conv else 1


@dataclass
class StageConfig:
    levels: int
    input_dim: int
    use_fr: bool = True
    block: BlockConfig = field(default_factory=BlockConfig)
    num_classes: int = 9

    def __post_init__(self):
        if isinstance(self.block, dict):
            self.block = BlockConfig(**self.block)
        if self.levels < 0:
            raise ValueError(f"levels must be >= 0, got {self.levels}")
        if self.input_dim < 1 or self.num_classes < 1:
            raise ValueError("input_dim and num_classes must be positive")

    @property
    def entry(self):
        """Entry layer kind: 'fr' (1x1 conv + ReLU), 'proj' (linear 1x1) or None."""
        if self.use_fr:
            return "fr"
        return None if self.input_dim == self.block.channels else "proj"


@dataclass
class ModelConfig:
    base: StageConfig
    refinement: Optional[StageConfig] = None
    stages: int = 0

    def __post_init__(self):
        if isinstance(self.base, dict):
            self.base = StageConfig(**self.base)
        if isinstance(self.refinement, dict):
            self.refinement = StageConfig(**self.refinement)
        if self.stages < 0:
            raise ValueError(f"refinement stage count must be >= 0, got {self.stages}")
        if self.stages and self.refinement is None:
            raise ValueError("refinement stages requested without a refinement template")
        if self.refinement is not None:
            if self.refinement.input_dim != self.base.num_classes:
                raise ValueError("refinement input_dim must equal the number of classes")
            if self.refinement.num_classes != self.base.num_classes:
                raise ValueError("refinement stages must predict the same classes")

    @classmethod
    def colontcn(
        cls,
        levels=13,
        input_dim=2048,
        channels=64,
        kernel_size=7,
        num_classes=9,
        dropout_rate=0.5,
        double_conv=True,
        residual=True,
        weight_norm=True,
        use_fr=True,
        refinement_levels=None,
        stages=0,
    ):
        block = BlockConfig(kernel_size, channels, dropout_rate, double_conv, residual, weight_norm)
        base = StageConfig(levels, input_dim, use_fr, block, num_classes)
        refinement = None
        if stages:
            refinement = StageConfig(
                levels if refinement_levels is None else refinement_levels,
                num_classes,
                False,
                BlockConfig(**asdict(block)),
                num_classes,
            )
        return cls(base, refinement, stages)

    @classmethod
    def tecno(cls, levels=14, input_dim=2048, channels=64, kernel_size=7, num_classes=9, **kw):
        """Single-conv, non-residual stack (the TeCNO-style TCN of the ablations)."""
        return cls.colontcn(
            levels, input_dim, channels, kernel_size, num_classes,
            double_conv=False, residual=False, **kw,
        )

    @property
    def num_classes(self):
        return self.base.num_classes

    @property
    def input_dim(self):
        return self.base.input_dim

    def stage_configs(self):
        return [self.base] + [self.refinement] * self.stages

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ProbOutput:
    """Per-stage (T, C) class probabilities and their logs, first stage first."""

    probs: List[np.ndarray]
    log_probs: List[np.ndarray]

    @property
    def num_stages(self):
        return len(self.probs)

    @property
    def prediction(self):
        return np.argmax(self.probs[-1], axis=1)


# --------------------------------------------------------------------------
# parameters


def _conv_shapes(prefix, out_ch, in_ch, k, weight_norm):
    shapes = {f"{prefix}.v": (out_ch, in_ch, k), f"{prefix}.b": (out_ch,)}
    if weight_norm:
        shapes[f"{prefix}.g"] = (out_ch,)
    return shapes


def _block_prefix(si, level):
    return f"s{si}.tb{level:02d}"


def param_shapes(config):
    """Name -> shape for every learnable tensor of ``config``."""
    shapes = {}
    for si, sc in enumerate(config.stage_configs()):
        blk, F = sc.block, sc.block.channels
        if sc.entry is not None:
            shapes.update(_conv_shapes(f"s{si}.entry", F, sc.input_dim, 1, False))
        for level in range(sc.levels):
            pre = _block_prefix(si, level)
            shapes.update(_conv_shapes(f"{pre}.conv1", F, F, blk.kernel_size, blk.weight_norm))
            if blk.double_conv:
                shapes.update(_conv_shapes(f"{pre}.conv2", F, F, blk.kernel_size, blk.weight_norm))
        head_in = F if (sc.entry is not None or sc.levels) else sc.input_dim
        shapes.update(_conv_shapes(f"s{si}.head", sc.num_classes, head_in, 1, False))
    return dict(sorted(shapes.items()))


class ModelParams:
    """Named parameter tensors of a model, each with a congruent gradient buffer."""

    def __init__(self, config, tensors):
        expected = param_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ValueError(f"parameter names mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {tensors[name].shape} != {shape}")
        self.config = config
        self.tensors = {n: np.ascontiguousarray(tensors[n], dtype=np.float64) for n in expected}
        self.grads = {n: np.zeros_like(t) for n, t in self.tensors.items()}

    def names(self):
        return list(self.tensors)

    def conv(self, prefix, dilation=1):
        t = self.tensors
        return ConvParams(t[f"{prefix}.v"], t[f"{prefix}.b"], t.get(f"{prefix}.g"), dilation)

    def conv_grads(self, prefix):
        g = self.grads
        return ConvGrads(g[f"{prefix}.v"], g[f"{prefix}.b"], g.get(f"{prefix}.g"))

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0

    def num_scalars(self):
        return sum(t.size for t in self.tensors.values())

    def copy(self):
        return ModelParams(self.config, {n: t.copy() for n, t in self.tensors.items()})

    def flat(self):
        return np.concatenate([self.tensors[n].ravel() for n in self.tensors])

    def flat_grad(self):
        return np.concatenate([self.grads[n].ravel() for n in self.grads])

    def set_flat(self, vec):
        i = 0
        for t in self.tensors.values():
            t[...] = vec[i:i + t.size].reshape(t.shape)
            i += t.size


def init_params(config, rng):
    """Fan-in uniform direction vectors, gains equal to their norms, zero biases."""
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".v"):
            bound = np.sqrt(1.0 / (shape[1] * shape[2]))
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        else:
            tensors[name] = np.zeros(shape)
    for name in list(tensors):
        if name.endswith(".g"):
            v = tensors[name[:-2] + ".v"]
            tensors[name] = np.sqrt(np.einsum("oik,oik->o", v, v))
    return ModelParams(config, tensors)


# --------------------------------------------------------------------------
# forward / backward


def fr_forward(x, p):
    """Feature reduction: 1x1 convolution followed by ReLU."""
    return seqcore.relu(seqcore.conv1d_forward(x, p, weight_norm=False))


def _block_forward(h_prev, level, cfg, conv1, conv2, rng, training):
    if h_prev.shape[1] != cfg.channels:
        raise ValueError(f"block expects {cfg.channels} channels, got {h_prev.shape[1]}")
    rate = cfg.dropout_rate if training else 0.0
    cache = {"h_prev": h_prev, "level": level}
    convs = [conv1, conv2] if cfg.double_conv else [conv1]
    x = h_prev
    for i, p in enumerate(convs):
        p = replace(p, dilation=2 ** level)
        pre = seqcore.conv1d_forward(x, p, cfg.weight_norm)
        out, keep = seqcore.dropout(seqcore.relu(pre), rate, rng, training)
        cache[f"in{i}"], cache[f"pre{i}"], cache[f"keep{i}"] = x, pre, keep
        x = out
    if cfg.residual:
        s = h_prev + x
        cache["sum"] = s
        return seqcore.relu(s), cache
    return x, cache


def _block_backward(cache, grad_h, cfg, convs, grads, rate):
    if cfg.residual:
        grad_s = seqcore.relu_backward(cache["sum"], grad_h)
        grad_prev, grad = grad_s, grad_s
    else:
        grad_prev, grad = 0.0, grad_h
    for i in reversed(range(len(convs))):
        grad = seqcore.dropout_backward(grad, cache[f"keep{i}"], rate)
        grad = seqcore.relu_backward(cache[f"pre{i}"], grad)
        grad, *_ = seqcore.conv1d_backward(cache[f"in{i}"], convs[i], grad, cfg.weight_norm, grads[i])
    return grad_prev + grad


def temporal_block_forward(h_prev, level, cfg, conv1, conv2=None, rng=None, training=False):
    """One temporal block with dilation ``2**level``.

    ``C1 = Dropout(ReLU(conv1(H)))``, ``C2 = Dropout(ReLU(conv2(C1)))`` when
    ``cfg.double_conv``; output ``ReLU(H + C_last)`` when ``cfg.residual``
    else ``C_last``.
    """
    if training and cfg.dropout_rate > 0 and rng is None:
        raise ValueError("training with dropout needs an rng")
    if cfg.double_conv and conv2 is None:
        raise ValueError("double_conv block needs conv2")
    return _block_forward(h_prev, level, cfg, conv1, conv2, rng, training)[0]


def _stage_forward(x, si, sc, params, rng, training):
    blk = sc.block
    cache = {"x": x, "blocks": []}
    h = x
    if sc.entry is not None:
        pre = seqcore.conv1d_forward(h, params.conv(f"s{si}.entry"), weight_norm=False)
        cache["entry_pre"] = pre
        h = seqcore.relu(pre) if sc.entry == "fr" else pre
    for level in range(sc.levels):
        pre = _block_prefix(si, level)
        conv2 = params.conv(f"{pre}.conv2") if blk.double_conv else None
        h, bc = _block_forward(h, level, blk, params.conv(f"{pre}.conv1"), conv2, rng, training)
        cache["blocks"].append(bc)
    cache["head_in"] = h
    logits = seqcore.conv1d_forward(h, params.conv(f"s{si}.head"), weight_norm=False)
    return logits, cache


def _stage_backward(cache, grad_logits, si, sc, params, training):
    blk = sc.block
    rate = blk.dropout_rate if training else 0.0
    grad, *_ = seqcore.conv1d_backward(
        cache["head_in"], params.conv(f"s{si}.head"), grad_logits, False,
        params.conv_grads(f"s{si}.head"),
    )
    for level in reversed(range(sc.levels)):
        pre = _block_prefix(si, level)
        names = [f"{pre}.conv1"] + ([f"{pre}.conv2"] if blk.double_conv else [])
        convs = [params.conv(n, 2 ** level) for n in names]
        grads = [params.conv_grads(n) for n in names]
        grad = _block_backward(cache["blocks"][level], grad, blk, convs, grads, rate)
    if sc.entry is not None:
        if sc.entry == "fr":
            grad = seqcore.relu_backward(cache["entry_pre"], grad)
        grad, *_ = seqcore.conv1d_backward(
            cache["x"], params.conv(f"s{si}.entry"), grad, False, params.conv_grads(f"s{si}.entry")
        )
    return grad


def forward(params, x, rng=None, training=False):
    """Run all stages. Returns ``(ProbOutput, tape)``; pass the tape to :func:`backward`."""
    config = params.config
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise ValueError(f"expected (T, {config.input_dim}) features, got {x.shape}")
    if training and rng is None and any(sc.block.dropout_rate > 0 for sc in config.stage_configs()):
        raise ValueError("training with dropout needs an rng")
    probs, log_probs, caches = [], [], []
    inp = x
    for si, sc in enumerate(config.stage_configs()):
        logits, cache = _stage_forward(inp, si, sc, params, rng, training)
        p = seqcore.softmax_rows(logits)
        probs.append(p)
        log_probs.append(seqcore.log_softmax_rows(logits))
        caches.append(cache)
        inp = p
    return ProbOutput(probs, log_probs), {"caches": caches, "training": training, "probs": probs}


def backward(params, tape, grad_logits):
    """Accumulate parameter gradients given d(loss)/d(logits) for every stage.

    Returns the gradient w.r.t. the input features.
    """
    config = params.config
    stages = config.stage_configs()
    if len(grad_logits) != len(stages):
        raise ValueError(f"need one logits gradient per stage ({len(stages)})")
    carry = None
    for si in reversed(range(len(stages))):
        g = np.array(grad_logits[si], dtype=np.float64)
        if carry is not None:
            g += seqcore.softmax_backward(tape["probs"][si], carry)
        carry = _stage_backward(tape["caches"][si], g, si, stages[si], params, tape["training"])
    return carry


def stage_forward(x, stage_cfg, params, rng=None, training=False, stage_index=0):
    """Class probabilities of one stage (stage ``stage_index`` of ``params``)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != stage_cfg.input_dim:
        raise ValueError(f"expected (T, {stage_cfg.input_dim}) input, got {x.shape}")
    logits, _ = _stage_forward(x, stage_index, stage_cfg, params, rng, training)
    return seqcore.softmax_rows(logits)


def multistage_forward(x, model_cfg, params, rng=None, training=False):
    if model_cfg != params.config:
        raise ValueError("model config does not match the parameters' config")
    return forward(params, x, rng, training)[0]


# --------------------------------------------------------------------------
# profiling


def receptive_field(stage_cfg):
    """Input frames seen by one output frame of a stage."""
    blk = stage_cfg.block
    return 1 + blk.convs_per_block * (blk.kernel_size - 1) * (2 ** stage_cfg.levels - 1)


def count_params(config):
    """Scalar parameter count, by closed form per layer."""
    total = 0
    for sc in config.stage_configs():
        blk, F, C = sc.block, sc.block.channels, sc.num_classes
        if sc.entry is not None:
            total += sc.input_dim * F + F
        per_conv = F * F * blk.kernel_size + F + (F if blk.weight_norm else 0)
        total += sc.levels * blk.convs_per_block * per_conv
        head_in = F if (sc.entry is not None or sc.levels) else sc.input_dim
        total += head_in * C + C
    return total


def estimate_flops(config, T):
    """Forward-pass FLOPs at sequence length ``T``: 2 x convolution multiply-accumulates."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    macs = 0
    for sc in config.stage_configs():
        blk, F = sc.block, sc.block.channels
        if sc.entry is not None:
            macs += sc.input_dim * F
        macs += sc.levels * blk.convs_per_block * F * F * blk.kernel_size
        head_in = F if (sc.entry is not None or sc.levels) else sc.input_dim
        macs += head_in * sc.num_classes
    return 2 * macs * int(T)


# frames at which the 13-level, 64-channel, 2048-d model costs 4.386 GFLOPs
GFLOPS_REFERENCE_T = 2500
