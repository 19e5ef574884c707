"""Graph GAN that normalises brain graphs towards a fixed template.

Both networks are stacks of edge-conditioned graph convolutions.  A layer
maps node features ``Y`` (n_r x d_in) to

    Y'(i) = 1/|N(i)| * sum_{j in N(i)} Theta_ji Y(j) + b

where ``Theta_ji = F(L(j, i))`` is produced from the scalar edge weight by an
affine filter-generating map, ``N(i)`` holds i and every j with a positive
edge weight towards i, and the result is followed by batch normalisation over
nodes, an activation and dropout.

The normaliser is enc1 (n_r -> h), enc2 (h -> 1) and a decoder (1 + h -> n_r)
that also reads enc1's output through a skip connection.  Its input node
features are the rows of the connectivity matrix.  The discriminator sees the
candidate graph's rows concatenated with the template's rows and reduces its
two layers to a single realness score in (0, 1).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from brainevo import tensor as tn
from brainevo.cbt import Cbt
from brainevo.errors import ContractError, DimensionError, LoadError, TrainingError
from brainevo.graph import BrainGraph, format_number
from brainevo.tensor import Node

logger = logging.getLogger(__name__)

D_CLAMP = 1e-7
MODEL_FORMAT = "brainevo-model-1"


@dataclass
class TrainConfig:
    lam: float = 100.0
    lr_n: float = 0.001
    lr_d: float = 0.01
    beta1: float = 0.5
    beta2: float = 0.999
    epochs: int = 700
    keep_prob: float = 0.9
    hidden: int = 36
    disc_hidden: int = 32
    bn_momentum: float = 0.1
    bn_eval: str = "graph"
    adversarial: str = "saturating"
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError(f"lambda must be >= 0, got {self.lam}")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ContractError(f"epochs must be an integer >= 1, got {self.epochs}")
        if self.lr_n <= 0 or self.lr_d <= 0:
            raise ContractError(f"learning rates must be positive, got {self.lr_n}, {self.lr_d}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ContractError(f"keep probability must lie in (0, 1], got {self.keep_prob}")
        if self.hidden < 1 or self.disc_hidden < 1:
            raise ContractError("hidden widths must be >= 1")
        if self.adversarial not in ("saturating", "non-saturating"):
            raise ContractError(f"adversarial must be 'saturating' or 'non-saturating', got {self.adversarial!r}")
        if self.bn_eval not in ("graph", "running"):
            raise ContractError(f"bn_eval must be 'graph' or 'running', got {self.bn_eval!r}")
        self.epochs = int(self.epochs)


@dataclass
class Pass:
    """How a forward pass behaves.

    In training mode batch statistics are used and dropout masks are drawn
    from ``rng``; with ``update_stats`` the running statistics used in
    evaluation mode are refreshed as well.
    """

    training: bool = False
    rng: Optional[np.random.Generator] = None
    update_stats: bool = False


EVAL = Pass()


def neighborhood(weights: np.ndarray) -> np.ndarray:
    """Row i marks N(i): node i itself plus every j with a positive edge j -> i."""
    mask = (weights.T > 0).astype(np.float64)
    np.fill_diagonal(mask, 1.0)
    return mask


class EdgeConvLayer:
    """Edge-conditioned convolution followed by batch norm, activation and dropout.

    The filter-generating map is ``F(e) = f_bias + e * f_weight``; both are
    stored transposed (d_in x d_out) so that a row feature vector is filtered
    as ``y @ F(e)``.
    """

    def __init__(
        self,
        name: str,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        activation: Optional[str] = "relu",
        batch_norm: bool = True,
        keep_prob: float = 1.0,
    ):
        if activation not in (None, "relu", "sigmoid"):
            raise ContractError(f"unknown activation {activation!r}")
        self.name = name
        self.d_in = d_in
        self.d_out = d_out
        self.activation = activation
        self.use_bn = batch_norm
        self.keep_prob = keep_prob
        scale = 1.0 / np.sqrt(d_in)
        self.f_bias = tn.parameter(rng.normal(0.0, scale, (d_in, d_out)))
        self.f_weight = tn.parameter(rng.normal(0.0, scale, (d_in, d_out)))
        self.bias = tn.parameter(np.zeros((1, d_out)))
        self.gamma = tn.parameter(np.ones((1, d_out)))
        self.beta = tn.parameter(np.zeros((1, d_out)))
        self.running_mean = np.zeros((1, d_out))
        self.running_var = np.ones((1, d_out))
        self.momentum = 0.1
        # "graph": normalise with the current graph's node statistics in every mode;
        # "running": evaluation mode uses running averages collected in training
        self.bn_eval = "graph"

    def parameters(self) -> dict:
        out = {"f_bias": self.f_bias, "f_weight": self.f_weight, "bias": self.bias}
        if self.use_bn:
            out.update(gamma=self.gamma, beta=self.beta)
        return out

    def buffers(self) -> dict:
        return {"running_mean": self.running_mean, "running_var": self.running_var} if self.use_bn else {}

    def filter_matrix(self, edge_value: float) -> np.ndarray:
        """Theta for one edge, shaped d_out x d_in."""
        return (self.f_bias.value + edge_value * self.f_weight.value).T

    def convolve(self, x: Node, weights, mask: np.ndarray) -> Node:
        """Pre-activation output: neighbourhood-averaged filtered features plus bias.

        ``weights`` may be a node so gradients reach the edge features.
        Graph weights are symmetric, so the edge feature L(j, i) is read
        from ``weights[i, j]``.
        """
        if x.shape[1] != self.d_in:
            raise DimensionError(f"{self.name}: node features {x.shape} but layer expects width {self.d_in}")
        if x.shape[0] != mask.shape[0]:
            raise DimensionError(f"{self.name}: node features {x.shape} for a graph of shape {mask.shape}")
        inv_deg = 1.0 / mask.sum(axis=1, keepdims=True)
        avg_self = tn.constant(mask * inv_deg) @ x
        avg_edge = tn.mul(weights, mask * inv_deg) @ x
        return avg_self @ self.f_bias + avg_edge @ self.f_weight + self.bias

    def __call__(self, x: Node, weights, mask: np.ndarray, ctx: Pass = EVAL) -> Node:
        y = self.convolve(x, weights, mask)
        if self.use_bn:
            if ctx.training or self.bn_eval == "graph":
                y = tn.batch_norm(y, self.gamma, self.beta)
                if ctx.training and ctx.update_stats:
                    mu, var = y.stats
                    m = self.momentum
                    self.running_mean = (1 - m) * self.running_mean + m * mu
                    self.running_var = (1 - m) * self.running_var + m * var
            else:
                y = tn.batch_norm(y, self.gamma, self.beta, mean=self.running_mean, var=self.running_var)
        if self.activation == "relu":
            y = tn.relu(y)
        elif self.activation == "sigmoid":
            y = tn.sigmoid(y)
        if ctx.training and self.keep_prob < 1.0:
            if ctx.rng is None:
                raise ContractError(f"{self.name}: training-mode dropout needs a random generator")
            y = tn.dropout(y, tn.dropout_mask(y.shape, self.keep_prob, ctx.rng))
        return y


def edge_conv_forward(
    layer: EdgeConvLayer, features, graph, ctx: Pass = EVAL, pre_activation: bool = False
) -> np.ndarray:
    """Run one layer on a graph; ``pre_activation`` stops before batch norm."""
    w = graph.weights if isinstance(graph, BrainGraph) else np.asarray(graph, dtype=np.float64)
    x = features if isinstance(features, Node) else tn.constant(features)
    mask = neighborhood(w)
    if pre_activation:
        return layer.convolve(x, tn.constant(w), mask).value
    return layer(x, tn.constant(w), mask, ctx).value


class _Net:
    layers: list

    def parameters(self) -> dict:
        return {f"{l.name}.{k}": p for l in self.layers for k, p in l.parameters().items()}

    def buffers(self) -> dict:
        return {f"{l.name}.{k}": b for l in self.layers for k, b in l.buffers().items()}

    def configure_bn(self, momentum: float, bn_eval: str) -> None:
        for l in self.layers:
            l.momentum = momentum
            l.bn_eval = bn_eval


class NormalizerNet(_Net):
    def __init__(self, n_r: int, hidden: int, rng: np.random.Generator, keep_prob: float = 0.9):
        self.n_r = n_r
        self.hidden = hidden
        self.enc1 = EdgeConvLayer("enc1", n_r, hidden, rng, "relu", True, keep_prob)
        self.enc2 = EdgeConvLayer("enc2", hidden, 1, rng, "sigmoid", True, keep_prob)
        self.dec = EdgeConvLayer("dec", 1 + hidden, n_r, rng, "sigmoid", True, 1.0)
        self.layers = [self.enc1, self.enc2, self.dec]
        self.offdiag = 1.0 - np.eye(n_r)

    def _check(self, w) -> None:
        if w.shape != (self.n_r, self.n_r):
            raise DimensionError(f"normalizer expects a {self.n_r}x{self.n_r} graph, got {w.shape}")

    def encode(self, w: Node, ctx: Pass = EVAL) -> tuple[Node, Node]:
        """Return (enc1 output, enc2 output); the latter is the n_r x 1 embedding."""
        self._check(w)
        mask = neighborhood(w.value)
        h1 = self.enc1(w, w, mask, ctx)
        z = self.enc2(h1, w, mask, ctx)
        return h1, z

    def forward(self, w: Node, ctx: Pass = EVAL) -> Node:
        self._check(w)
        mask = neighborhood(w.value)
        h1 = self.enc1(w, w, mask, ctx)
        z = self.enc2(h1, w, mask, ctx)
        raw = self.dec(tn.concat_cols(z, h1), w, mask, ctx)
        return tn.mul(tn.scale(raw + tn.transpose(raw), 0.5), self.offdiag)


class DiscriminatorNet(_Net):
    def __init__(self, n_r: int, hidden: int, rng: np.random.Generator, keep_prob: float = 0.9):
        self.n_r = n_r
        self.hidden = hidden
        self.layer1 = EdgeConvLayer("layer1", 2 * n_r, hidden, rng, "relu", True, keep_prob)
        # no batch norm here: normalising a single column over nodes would fix its mean
        self.layer2 = EdgeConvLayer("layer2", hidden, 1, rng, None, False, 1.0)
        self.layers = [self.layer1, self.layer2]

    def forward(self, candidate: Node, cbt: np.ndarray, ctx: Pass = EVAL) -> Node:
        """Realness score (1x1) of ``candidate``; messages follow the candidate's edges."""
        if candidate.shape != (self.n_r, self.n_r) or cbt.shape != (self.n_r, self.n_r):
            raise DimensionError(
                f"discriminator expects {self.n_r}x{self.n_r} graphs, got {candidate.shape} and {cbt.shape}"
            )
        mask = neighborhood(candidate.value)
        x = tn.concat_cols(candidate, tn.constant(cbt))
        h = self.layer1(x, candidate, mask, ctx)
        h = self.layer2(h, candidate, mask, ctx)
        return tn.sigmoid(tn.mean_rows(h))


@dataclass
class GganModel:
    normalizer: NormalizerNet
    discriminator: DiscriminatorNet
    config: TrainConfig

    @property
    def n_r(self) -> int:
        return self.normalizer.n_r

    def parameters(self) -> dict:
        out = {f"normalizer.{k}": v for k, v in self.normalizer.parameters().items()}
        out.update({f"discriminator.{k}": v for k, v in self.discriminator.parameters().items()})
        return out


def init_model(n_r: int, config: TrainConfig, rng: Optional[np.random.Generator] = None) -> GganModel:
    if rng is None:
        rng = np.random.default_rng(config.seed)
    norm = NormalizerNet(n_r, config.hidden, rng, config.keep_prob)
    disc = DiscriminatorNet(n_r, config.disc_hidden, rng, config.keep_prob)
    norm.configure_bn(config.bn_momentum, config.bn_eval)
    disc.configure_bn(config.bn_momentum, config.bn_eval)
    return GganModel(norm, disc, config)


# ---------------------------------------------------------------------------
# losses


def _weights(g) -> np.ndarray:
    return g.weights if isinstance(g, BrainGraph) else np.asarray(g, dtype=np.float64)


def _template(cbt) -> np.ndarray:
    if isinstance(cbt, Cbt):
        return cbt.template.weights
    return _weights(cbt)


def discriminator_loss(disc: DiscriminatorNet, fake: Node, cbt: np.ndarray, ctx: Pass = EVAL) -> Node:
    """-[log D(cbt) + log(1 - D(fake))]."""
    real = tn.clamp(disc.forward(tn.constant(cbt), cbt, ctx), D_CLAMP, 1 - D_CLAMP)
    score = tn.clamp(disc.forward(fake, cbt, ctx), D_CLAMP, 1 - D_CLAMP)
    return -(tn.log(real) + tn.log(tn.add_scalar(-score, 1.0)))


def normalizer_loss(
    disc: DiscriminatorNet,
    fake: Node,
    target: np.ndarray,
    cbt: np.ndarray,
    lam: float,
    ctx: Pass = EVAL,
    adversarial: str = "saturating",
) -> tuple[Node, Node]:
    """Adversarial term plus ``lam`` times the L1 reconstruction term.

    The saturating term is ``log(1 - D(fake))``; the non-saturating one is
    ``-log D(fake)``.  Returns (total, l1).
    """
    score = tn.clamp(disc.forward(fake, cbt, ctx), D_CLAMP, 1 - D_CLAMP)
    l1 = tn.l1_distance(fake, target)
    if adversarial == "saturating":
        adv = tn.log(tn.add_scalar(-score, 1.0))
    else:
        adv = -tn.log(score)
    return adv + l1 * lam, l1


def losses(
    normalizer: NormalizerNet,
    discriminator: DiscriminatorNet,
    batch: Sequence,
    cbt,
    lam: float = 100.0,
    ctx: Pass = EVAL,
    adversarial: str = "saturating",
) -> tuple[Node, Node, Node]:
    """Batch-averaged (L_D, L_N, L_L1) as 1x1 nodes.

    One normaliser pass per subject feeds all three losses, so gradients of
    L_D also reach the normaliser; the training loop never uses those.
    """
    if not batch:
        raise ContractError("losses need a non-empty batch")
    template = _template(cbt)
    l_d = l_n = l_1 = None
    for g in batch:
        x = _weights(g)
        fake = normalizer.forward(tn.constant(x), ctx)
        d = discriminator_loss(discriminator, fake, template, ctx)
        n, l1 = normalizer_loss(discriminator, fake, x, template, lam, ctx, adversarial)
        l_d = d if l_d is None else l_d + d
        l_n = n if l_n is None else l_n + n
        l_1 = l1 if l_1 is None else l_1 + l1
    k = 1.0 / len(batch)
    return l_d * k, l_n * k, l_1 * k


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class EpochLoss:
    epoch: int
    loss_d: float
    loss_n: float
    loss_l1: float


def train(
    graphs: Sequence,
    cbt,
    config: TrainConfig,
    callback: Optional[Callable[[EpochLoss], None]] = None,
) -> tuple[GganModel, list]:
    """Alternate one discriminator and one normaliser Adam step per subject.

    Subjects are visited in a freshly shuffled order every epoch.  Returns the
    trained model and one :class:`EpochLoss` per epoch.
    """
    if len(graphs) < 2:
        raise ContractError(f"training needs at least 2 subjects, got {len(graphs)}")
    template = _template(cbt)
    xs = [_weights(g) for g in graphs]
    n_r = template.shape[0]
    for s, x in enumerate(xs):
        if x.shape != (n_r, n_r):
            raise DimensionError(f"subject {s} has shape {x.shape}, template is {template.shape}")
    rng = np.random.default_rng(config.seed)
    model = init_model(n_r, config, rng)
    norm, disc = model.normalizer, model.discriminator
    n_params = list(norm.parameters().values())
    d_params = list(disc.parameters().values())
    opt_n = tn.Adam(n_params, config.lr_n, config.beta1, config.beta2)
    opt_d = tn.Adam(d_params, config.lr_d, config.beta1, config.beta2)
    ctx = Pass(training=True, rng=rng, update_stats=True)
    trace = []
    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(3)
        for s in rng.permutation(len(xs)):
            x = xs[s]
            fake = norm.forward(tn.constant(x), ctx).detach()
            l_d = discriminator_loss(disc, fake, template, ctx)
            if not np.isfinite(l_d.item()):
                raise TrainingError(f"non-finite discriminator loss at epoch {epoch}, subject {s}")
            opt_d.step(tn.backward(l_d, d_params))

            fake = norm.forward(tn.constant(x), ctx)
            l_n, l1 = normalizer_loss(disc, fake, x, template, config.lam, ctx, config.adversarial)
            if not np.isfinite(l_n.item()):
                raise TrainingError(f"non-finite normalizer loss at epoch {epoch}, subject {s}")
            opt_n.step(tn.backward(l_n, n_params))
            sums += (l_d.item(), l_n.item(), l1.item())
        sums /= len(xs)
        rec = EpochLoss(epoch, float(sums[0]), float(sums[1]), float(sums[2]))
        trace.append(rec)
        if callback is not None:
            callback(rec)
        if epoch == 1 or epoch % 50 == 0:
            logger.debug("epoch %d L_D=%.5f L_N=%.5f L1=%.5f", epoch, *sums)
    return model, trace


# ---------------------------------------------------------------------------
# inference


def normalize(model, graph) -> BrainGraph:
    """Map ``graph`` through the normaliser in evaluation mode."""
    norm = model.normalizer if isinstance(model, GganModel) else model
    out = norm.forward(tn.constant(_weights(graph)), EVAL).value
    return BrainGraph(np.clip(out, 0.0, 1.0))


def discriminate(model, candidate, cbt) -> float:
    disc = model.discriminator if isinstance(model, GganModel) else model
    x = _weights(candidate)
    return disc.forward(tn.constant(x), _template(cbt), EVAL).item()


def embed(model, graph) -> np.ndarray:
    """Length-n_r embedding from the normaliser's two encoding layers."""
    norm = model.normalizer if isinstance(model, GganModel) else model
    _, z = norm.encode(tn.constant(_weights(graph)), EVAL)
    return z.value[:, 0].copy()


def embed_many(model, graphs: Sequence) -> np.ndarray:
    return np.array([embed(model, g) for g in graphs]).reshape(len(graphs), -1)


# ---------------------------------------------------------------------------
# persistence


def save_model(model: GganModel, path) -> None:
    """Plain-text weights file: config header, then one block per tensor."""
    lines = ["# brainevo model", f"format={MODEL_FORMAT}", f"n_r={model.n_r}"]
    for k, v in asdict(model.config).items():
        lines.append(f"config.{k}={v}")
    tensors = dict(model.parameters())
    tensors = {k: p.value for k, p in tensors.items()}
    for prefix, net in (("normalizer", model.normalizer), ("discriminator", model.discriminator)):
        tensors.update({f"{prefix}.{k}": b for k, b in net.buffers().items()})
    for name in sorted(tensors):
        arr = tensors[name]
        lines.append(f"tensor={name} shape={arr.shape[0]}x{arr.shape[1]}")
        lines.extend(",".join(format_number(v) for v in row) for row in arr)
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path) -> GganModel:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"model file not found: {path}")
    lines = [l for l in path.read_text().splitlines() if l and not l.startswith("#")]
    meta: dict = {}
    tensors: dict = {}
    i = 0
    while i < len(lines):
        line = lines[i]
        if line.startswith("tensor="):
            head = dict(tok.split("=", 1) for tok in line.split())
            rows, cols = (int(v) for v in head["shape"].split("x"))
            block = lines[i + 1:i + 1 + rows]
            arr = np.array([[float(v) for v in r.split(",")] for r in block])
            if arr.shape != (rows, cols):
                raise LoadError(f"{path}: tensor {head['tensor']} has shape {arr.shape}, header says {rows}x{cols}")
            tensors[head["tensor"]] = arr
            i += 1 + rows
        else:
            k, v = line.split("=", 1)
            meta[k] = v
            i += 1
    if meta.get("format") != MODEL_FORMAT:
        raise LoadError(f"{path}: not a {MODEL_FORMAT} file")
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    cfg = {}
    for k, v in meta.items():
        if k.startswith("config."):
            name = k[len("config."):]
            cast = {"int": int, "float": float, "str": str}[getattr(kinds[name], "__name__", kinds[name])]
            cfg[name] = cast(v)
    config = TrainConfig(**cfg)
    model = init_model(int(meta["n_r"]), config, np.random.default_rng(0))
    targets = {}
    for prefix, net in (("normalizer", model.normalizer), ("discriminator", model.discriminator)):
        for layer in net.layers:
            for k, p in layer.parameters().items():
                targets[f"{prefix}.{layer.name}.{k}"] = ("param", p)
            for k in layer.buffers():
                targets[f"{prefix}.{layer.name}.{k}"] = ("buffer", (layer, k))
    missing = sorted(set(targets) - set(tensors))
    if missing:
        raise LoadError(f"{path}: missing tensors {', '.join(missing)}")
    for name, (kind, obj) in targets.items():
        arr = tensors[name]
        if kind == "param":
            if arr.shape != obj.shape:
                raise LoadError(f"{path}: tensor {name} has shape {arr.shape}, expected {obj.shape}")
            obj.value = arr
        else:
            layer, attr = obj
            setattr(layer, attr, arr)
    return model
