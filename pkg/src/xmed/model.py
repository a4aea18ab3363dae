"""Layer-graph classifier models built from the primitives in ops.

A GraphModel is an ordered list of layer specs plus a flat parameter store.
Layers run strictly in sequence; branching (residual shortcuts, dense-block
concatenation) lives inside composite layer kinds, so a model is fully
described by its spec list and can be serialized as data.

One layer name is designated the capture point: forward() returns that
layer's output activation alongside the logits, and backward_to_capture()
back-propagates a class logit down to it. This is the hook the Grad-CAM
module builds on.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError, StaleCacheError

CONV_KINDS = ("conv", "batchnorm", "relu", "maxpool", "avgpool", "gap",
              "residual_block", "dense_block", "transition")
ALL_KINDS = CONV_KINDS + ("flatten", "dense")


@dataclass
class LayerSpec:
    """One node of the graph: a kind, a unique name, and hyperparameters."""

    name: str
    kind: str
    hp: dict = field(default_factory=dict)


class GraphModel:
    """Sequential layer graph with named parameters and a capture point.

    params holds the trainable tensors, buffers the running statistics;
    both are keyed "<layer>.<local>" in a deterministic order. A model is
    safe to share across threads for inference; training mutates it and
    needs exclusive access.
    """

    def __init__(self, layers, params, buffers, capture_layer, num_classes,
                 input_shape):
        self.layers = list(layers)
        self.params = params
        self.buffers = buffers
        self.capture_layer = capture_layer
        self.num_classes = int(num_classes)
        self.input_shape = tuple(input_shape)
        names = [s.name for s in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate layer names in graph: {names}")
        if capture_layer not in names:
            raise ConfigError(
                f"capture layer {capture_layer!r} is not a layer name")
        kind = self.layers[names.index(capture_layer)].kind
        if kind not in CONV_KINDS:
            raise ConfigError(
                f"capture layer {capture_layer!r} has kind {kind!r}, which "
                "does not produce a feature-map activation")

    # -- parameter plumbing -------------------------------------------------

    def param_count(self):
        return sum(int(p.size) for p in self.params.values())

    def copy_weights(self):
        return ({k: v.copy() for k, v in self.params.items()},
                {k: v.copy() for k, v in self.buffers.items()})

    def set_weights(self, weights):
        params, buffers = weights
        for k in self.params:
            self.params[k][...] = params[k]
        for k in self.buffers:
            self.buffers[k][...] = buffers[k]

    def clone(self):
        m = GraphModel(copy.deepcopy(self.layers),
                       {k: v.copy() for k, v in self.params.items()},
                       {k: v.copy() for k, v in self.buffers.items()},
                       self.capture_layer, self.num_classes, self.input_shape)
        return m

    def with_capture(self, layer_name):
        """Same weights, different Grad-CAM capture layer."""
        return GraphModel(self.layers, self.params, self.buffers,
                          layer_name, self.num_classes, self.input_shape)

    def _bn_params(self, name):
        return ops.BatchNormParams(
            gamma=self.params[name + ".gamma"],
            beta=self.params[name + ".beta"],
            running_mean=self.buffers[name + ".running_mean"],
            running_var=self.buffers[name + ".running_var"])

    # -- execution ----------------------------------------------------------

    def forward(self, batch, mode="infer"):
        """Run all layers in order.

        Returns (logits, captured_activation, caches); caches feed the
        backward passes and are only valid until the next forward call
        mutates the model.
        """
        batch = ops.as_tensor4(batch, "input batch")
        if batch.shape[1:] != self.input_shape:
            raise ShapeError("batch does not match model input shape",
                             got=batch.shape,
                             expected=(batch.shape[0],) + self.input_shape)
        if not np.isfinite(batch).all():
            raise ValueError("input batch contains NaN or Inf")
        x = batch
        captured = None
        caches = []
        for spec in self.layers:
            x, cache = self._layer_forward(spec, x, mode)
            caches.append(cache)
            if spec.name == self.capture_layer:
                captured = x
        return x, captured, caches

    def backward_to_capture(self, caches, class_index):
        """Gradient of logit[class_index] w.r.t. the captured activation.

        Defined for single-image batches (the Grad-CAM case).
        """
        if caches is None or len(caches) != len(self.layers):
            raise StaleCacheError("caches do not match this model's layers")
        head_cache = caches[-1]
        n, k = head_cache.out_shape if hasattr(head_cache, "out_shape") \
            else (None, None)
        if n != 1:
            raise ShapeError("backward_to_capture needs a batch of size 1",
                             got=(n, k), expected=(1, self.num_classes))
        if not 0 <= class_index < self.num_classes:
            raise ValueError(f"class index {class_index} out of range "
                             f"[0,{self.num_classes})")
        grad = np.zeros((1, self.num_classes), dtype=np.float32)
        grad[0, class_index] = 1.0
        stop = [s.name for s in self.layers].index(self.capture_layer)
        for i in range(len(self.layers) - 1, stop, -1):
            grad, _ = self._layer_backward(self.layers[i], grad, caches[i])
        return grad

    def backward(self, caches, grad_logits):
        """Full backward pass; returns {param_name: gradient}."""
        if caches is None or len(caches) != len(self.layers):
            raise StaleCacheError("caches do not match this model's layers")
        grads = {}
        grad = grad_logits
        for spec, cache in zip(reversed(self.layers), reversed(caches)):
            grad, pgrads = self._layer_backward(spec, grad, cache)
            grads.update(pgrads)
        return grads

    # -- per-kind dispatch --------------------------------------------------

    def _layer_forward(self, spec, x, mode):
        kind, name, hp = spec.kind, spec.name, spec.hp
        if kind == "conv":
            return ops.conv2d_forward(x, self.params[name + ".w"],
                                      self.params[name + ".b"],
                                      hp["stride"], hp["padding"])
        if kind == "batchnorm":
            return ops.batchnorm_forward(x, self._bn_params(name), mode)
        if kind == "relu":
            return ops.relu(x)
        if kind == "maxpool":
            return ops.maxpool2d(x, hp["window"], hp["stride"])
        if kind == "avgpool":
            return ops.avgpool2d(x, hp["window"], hp["stride"])
        if kind == "gap":
            return ops.global_avg_pool(x)
        if kind == "flatten":
            shape = x.shape
            return x.reshape(shape[0], -1), shape
        if kind == "dense":
            return ops.dense(x, self.params[name + ".w"],
                             self.params[name + ".b"])
        if kind == "residual_block":
            return self._resblock_forward(spec, x, mode)
        if kind == "dense_block":
            return self._denseblock_forward(spec, x, mode)
        if kind == "transition":
            c1, cache1 = ops.conv2d_forward(x, self.params[name + ".conv.w"],
                                            self.params[name + ".conv.b"],
                                            1, "valid")
            out, cache2 = ops.avgpool2d(c1, 2, 2)
            return out, (cache1, cache2)
        raise ConfigError(f"unknown layer kind {kind!r}")

    def _layer_backward(self, spec, grad, cache):
        kind, name = spec.kind, spec.name
        if kind == "conv":
            gx, gw, gb = ops.conv2d_backward(grad, cache)
            return gx, {name + ".w": gw, name + ".b": gb}
        if kind == "batchnorm":
            gx, gg, gb = ops.batchnorm_backward(grad, cache)
            return gx, {name + ".gamma": gg, name + ".beta": gb}
        if kind == "relu":
            return ops.relu_backward(grad, cache), {}
        if kind == "maxpool":
            return ops.maxpool2d_backward(grad, cache), {}
        if kind == "avgpool":
            return ops.avgpool2d_backward(grad, cache), {}
        if kind == "gap":
            return ops.global_avg_pool_backward(grad, cache), {}
        if kind == "flatten":
            return grad.reshape(cache), {}
        if kind == "dense":
            gx, gw, gb = ops.dense_backward(grad, cache)
            return gx, {name + ".w": gw, name + ".b": gb}
        if kind == "residual_block":
            return self._resblock_backward(spec, grad, cache)
        if kind == "dense_block":
            return self._denseblock_backward(spec, grad, cache)
        if kind == "transition":
            cache1, cache2 = cache
            g = ops.avgpool2d_backward(grad, cache2)
            gx, gw, gb = ops.conv2d_backward(g, cache1)
            return gx, {name + ".conv.w": gw, name + ".conv.b": gb}
        raise ConfigError(f"unknown layer kind {kind!r}")

    # conv-bn-relu-conv-bn branch, identity or 1x1-projected shortcut,
    # add, relu
    def _resblock_forward(self, spec, x, mode):
        name, hp = spec.name, spec.hp
        p = self.params
        b1, cv1 = ops.conv2d_forward(x, p[name + ".conv1.w"],
                                     p[name + ".conv1.b"], hp["stride"], "same")
        b2, cb1 = ops.batchnorm_forward(b1, self._bn_params(name + ".bn1"), mode)
        b3, cr1 = ops.relu(b2)
        b4, cv2 = ops.conv2d_forward(b3, p[name + ".conv2.w"],
                                     p[name + ".conv2.b"], 1, "same")
        b5, cb2 = ops.batchnorm_forward(b4, self._bn_params(name + ".bn2"), mode)
        if hp["project"]:
            short, cpr = ops.conv2d_forward(x, p[name + ".proj.w"],
                                            p[name + ".proj.b"],
                                            hp["stride"], "valid")
        else:
            short, cpr = x, None
        out, crout = ops.relu(ops.residual_add(b5, short))
        return out, (cv1, cb1, cr1, cv2, cb2, cpr, crout)

    def _resblock_backward(self, spec, grad, cache):
        name, hp = spec.name, spec.hp
        cv1, cb1, cr1, cv2, cb2, cpr, crout = cache
        g = ops.relu_backward(grad, crout)
        g_branch, g_short = ops.residual_add_backward(g)
        g1, gg2, gbt2 = ops.batchnorm_backward(g_branch, cb2)
        g2, gw2, gb2 = ops.conv2d_backward(g1, cv2)
        g3 = ops.relu_backward(g2, cr1)
        g4, gg1, gbt1 = ops.batchnorm_backward(g3, cb1)
        gx, gw1, gb1 = ops.conv2d_backward(g4, cv1)
        pgrads = {name + ".conv1.w": gw1, name + ".conv1.b": gb1,
                  name + ".bn1.gamma": gg1, name + ".bn1.beta": gbt1,
                  name + ".conv2.w": gw2, name + ".conv2.b": gb2,
                  name + ".bn2.gamma": gg2, name + ".bn2.beta": gbt2}
        if hp["project"]:
            gxs, gwp, gbp = ops.conv2d_backward(g_short, cpr)
            pgrads[name + ".proj.w"] = gwp
            pgrads[name + ".proj.b"] = gbp
            gx = gx + gxs
        else:
            gx = gx + g_short
        return gx, pgrads

    # each internal layer sees the concat of all earlier features and
    # emits growth_rate new channels (bn-relu-conv, pre-activation)
    def _denseblock_forward(self, spec, x, mode):
        name, hp = spec.name, spec.hp
        p = self.params
        feats = x
        subcaches = []
        for i in range(hp["layers"]):
            ln = f"{name}.l{i}"
            b1, cb = ops.batchnorm_forward(feats, self._bn_params(ln + ".bn"),
                                           mode)
            b2, cr = ops.relu(b1)
            new, cv = ops.conv2d_forward(b2, p[ln + ".conv.w"],
                                         p[ln + ".conv.b"], 1, "same")
            subcaches.append((cb, cr, cv, feats.shape[1]))
            feats = ops.channel_concat([feats, new])
        return feats, subcaches

    def _denseblock_backward(self, spec, grad, cache):
        name = spec.name
        pgrads = {}
        g = grad
        for i in range(len(cache) - 1, -1, -1):
            cb, cr, cv, c_in = cache[i]
            g_prev, g_new = ops.channel_concat_backward(
                g, [c_in, g.shape[1] - c_in])
            g1, gw, gb = ops.conv2d_backward(g_new, cv)
            g2 = ops.relu_backward(g1, cr)
            g3, gg, gbt = ops.batchnorm_backward(g2, cb)
            ln = f"{name}.l{i}"
            pgrads[ln + ".conv.w"] = gw
            pgrads[ln + ".conv.b"] = gb
            pgrads[ln + ".bn.gamma"] = gg
            pgrads[ln + ".bn.beta"] = gbt
            g = g_prev + g3
        return g, pgrads


# -- builders ----------------------------------------------------------------


class _Init:
    """He-normal initializer drawing from one seeded stream in layer order."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.params = {}
        self.buffers = {}

    def conv(self, name, out_c, in_c, k):
        std = np.sqrt(2.0 / (in_c * k * k))
        w = self.rng.standard_normal((out_c, in_c, k, k), dtype=np.float32)
        self.params[name + ".w"] = w * np.float32(std)
        self.params[name + ".b"] = np.zeros(out_c, dtype=np.float32)

    def bn(self, name, c):
        self.params[name + ".gamma"] = np.ones(c, dtype=np.float32)
        self.params[name + ".beta"] = np.zeros(c, dtype=np.float32)
        self.buffers[name + ".running_mean"] = np.zeros(c, dtype=np.float32)
        self.buffers[name + ".running_var"] = np.ones(c, dtype=np.float32)

    def dense(self, name, d, k):
        std = np.sqrt(2.0 / d)
        w = self.rng.standard_normal((d, k), dtype=np.float32)
        self.params[name + ".w"] = w * np.float32(std)
        self.params[name + ".b"] = np.zeros(k, dtype=np.float32)


def build_resnet_mini(stages=(2, 2, 2), base_width=8, num_classes=2,
                      input_shape=(1, 64, 64), seed=0, capture_layer=None):
    """Small residual network: stem conv, per-stage residual blocks, GAP,
    dense head. Stage s uses width base_width*2**s and downsamples by 2
    from the second stage on (1x1 projection shortcut where shape changes).
    """
    stages = list(stages)
    if not stages or min(stages) < 1:
        raise ConfigError(f"stages must be non-empty positive counts: {stages}")
    if base_width < 1:
        raise ConfigError(f"base_width must be >= 1, got {base_width}")
    c_in, h, w = input_shape
    min_side = 2 ** (len(stages) - 1)
    if h < min_side or w < min_side:
        raise ConfigError(
            f"input {h}x{w} too small for {len(stages) - 1} downsampling "
            f"stages (needs >= {min_side}x{min_side})")

    init = _Init(seed)
    layers = [LayerSpec("stem", "conv",
                        {"in_c": c_in, "out_c": base_width, "k": 3,
                         "stride": 1, "padding": "same"}),
              LayerSpec("stem_bn", "batchnorm", {"c": base_width}),
              LayerSpec("stem_relu", "relu")]
    init.conv("stem", base_width, c_in, 3)
    init.bn("stem_bn", base_width)

    width = base_width
    last_block = None
    for si, blocks in enumerate(stages):
        out_w = base_width * 2 ** si
        for bi in range(blocks):
            stride = 2 if (si > 0 and bi == 0) else 1
            project = stride != 1 or width != out_w
            name = f"s{si + 1}b{bi + 1}"
            layers.append(LayerSpec(name, "residual_block",
                                    {"in_c": width, "out_c": out_w,
                                     "stride": stride, "project": project}))
            init.conv(name + ".conv1", out_w, width, 3)
            init.bn(name + ".bn1", out_w)
            init.conv(name + ".conv2", out_w, out_w, 3)
            init.bn(name + ".bn2", out_w)
            if project:
                init.conv(name + ".proj", out_w, width, 1)
            width = out_w
            last_block = name
    layers.append(LayerSpec("gap", "gap"))
    layers.append(LayerSpec("flatten", "flatten"))
    layers.append(LayerSpec("head", "dense", {"d": width, "k": num_classes}))
    init.dense("head", width, num_classes)

    return GraphModel(layers, init.params, init.buffers,
                      capture_layer or last_block, num_classes, input_shape)


def build_densenet_mini(blocks=(4, 4), growth_rate=8, num_classes=2,
                        input_shape=(1, 64, 64), seed=0, capture_layer=None):
    """Small densely connected network: stem conv, dense blocks joined by
    transitions (1x1 conv halving channels + 2x2 average pool), GAP, dense
    head. Each dense-block layer emits growth_rate channels that are
    concatenated onto everything before them.
    """
    blocks = list(blocks)
    if not blocks or min(blocks) < 1:
        raise ConfigError(f"blocks must be non-empty positive counts: {blocks}")
    if growth_rate < 1:
        raise ConfigError(f"growth_rate must be >= 1, got {growth_rate}")
    c_in, h, w = input_shape

    init = _Init(seed)
    width = 2 * growth_rate
    layers = [LayerSpec("stem", "conv",
                        {"in_c": c_in, "out_c": width, "k": 3,
                         "stride": 1, "padding": "same"})]
    init.conv("stem", width, c_in, 3)

    last_block = None
    for di, n_layers in enumerate(blocks):
        name = f"db{di + 1}"
        layers.append(LayerSpec(name, "dense_block",
                                {"in_c": width, "layers": n_layers,
                                 "growth": growth_rate}))
        for li in range(n_layers):
            c = width + li * growth_rate
            init.bn(f"{name}.l{li}.bn", c)
            init.conv(f"{name}.l{li}.conv", growth_rate, c, 3)
        width += n_layers * growth_rate
        last_block = name
        if di < len(blocks) - 1:
            if h < 2 or w < 2:
                raise ConfigError(
                    f"spatial size {h}x{w} too small for transition "
                    f"{di + 1} (2x2 pooling needs >= 2x2)")
            tname = f"t{di + 1}"
            out_c = max(width // 2, 1)
            layers.append(LayerSpec(tname, "transition",
                                    {"in_c": width, "out_c": out_c}))
            init.conv(tname + ".conv", out_c, width, 1)
            width = out_c
            h, w = h // 2, w // 2
    layers.append(LayerSpec("gap", "gap"))
    layers.append(LayerSpec("flatten", "flatten"))
    layers.append(LayerSpec("head", "dense", {"d": width, "k": num_classes}))
    init.dense("head", width, num_classes)

    return GraphModel(layers, init.params, init.buffers,
                      capture_layer or last_block, num_classes, input_shape)
