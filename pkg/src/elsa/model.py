"""Tiny decoder transformer with frozen weights and attachable adapters.

The base model is random and stays frozen forever; adapters are the only
trainable parameters. Blocks are pre-norm: x += attn(ln(x)), x += mlp(ln(x)).
Mode-B activations slice attention width (whole heads) and MLP width; the
residual stream keeps the full model width throughout.
"""

from dataclasses import dataclass, field

import numpy as np

from . import elastic
from .compress import CalibrationBatch, fake_quant
from .elastic import (
    LAYER_ORDER,
    ElasticAdapter,
    layer_id,
    sample_genome,
    slice_frozen,
)
from .errors import ConfigurationError, ContractError, DivergenceError
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    cross_entropy,
    embedding_lookup,
    gelu,
    layer_norm,
    mask,
    matmul,
    reshape,
    rng_stream,
    scale,
    softmax,
    transpose,
)

NEG_INF = -1e30  # additive mask value; exp() underflows to exactly 0


@dataclass(frozen=True)
class ModelDims:
    vocab: int
    d: int
    head_dim: int
    heads: tuple
    mlp: tuple
    depth: int
    max_seq: int

    def __post_init__(self):
        if self.vocab < 2 or self.d < 1 or self.depth < 1 or self.max_seq < 1:
            raise ConfigurationError(f"bad model dims {self}")
        if len(self.heads) != self.depth or len(self.mlp) != self.depth:
            raise ConfigurationError("per-block dims must match depth")
        for h, f in zip(self.heads, self.mlp):
            if h < 1 or f < 1 or h * self.head_dim > self.d:
                raise ConfigurationError(f"block dims heads={h}, mlp={f} invalid for d={self.d}")

    @classmethod
    def uniform(cls, vocab=64, d=32, heads=4, mlp=128, depth=2, max_seq=8):
        if d % heads != 0:
            raise ConfigurationError(f"d={d} not divisible by heads={heads}")
        return cls(vocab, d, d // heads, (heads,) * depth, (mlp,) * depth, depth, max_seq)

    def to_dict(self):
        return {
            "vocab": self.vocab, "d": self.d, "head_dim": self.head_dim,
            "heads": list(self.heads), "mlp": list(self.mlp),
            "depth": self.depth, "max_seq": self.max_seq,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["vocab"], d["d"], d["head_dim"], tuple(d["heads"]),
                   tuple(d["mlp"]), d["depth"], d["max_seq"])


class AdaptedLinear:
    """A frozen weight matrix, an optional adapter, and compression state."""

    def __init__(self, W, layer_id):
        self.W = W
        self.layer_id = layer_id
        self.adapter = None
        self.mask_arr = None       # 0/1 float mask of W's sparsity pattern
        self.sparsity_level = None
        self.qparams = None        # frozen quantization grid (QA path)
        self.qweights = None       # integer codes, set by a QA merge
        self.capture = None        # list collecting input activations

    def forward(self, X, r_act=None, m_act=None, n_act=None, mode="plain"):
        if self.capture is not None:
            self.capture.append(np.array(X.data, copy=True).reshape(-1, X.data.shape[-1]))
        sliced = (m_act is not None and m_act != self.W.data.shape[0]) or (
            n_act is not None and n_act != self.W.data.shape[1])
        if mode == "qa" and self.qparams is not None:
            if sliced:
                raise ConfigurationError(
                    f"layer {self.layer_id}: quantization-aware forward needs full widths")
            eff = self.W
            if self.adapter is not None:
                prod = self.adapter.product(r_act)
                if self.mask_arr is not None:
                    prod = mask(prod, self.mask_arr)
                eff = add(self.W, prod)
            return matmul(X, fake_quant(eff, self.qparams))
        if mode == "sparsepeft" and self.mask_arr is not None and self.adapter is not None:
            if sliced:
                raise ConfigurationError(
                    f"layer {self.layer_id}: sparsity-preserving forward needs full widths")
            prod = mask(self.adapter.product(r_act), self.mask_arr)
            return add(matmul(X, self.W), matmul(X, prod))
        y = matmul(X, slice_frozen(self, m_act, n_act))
        if self.adapter is not None:
            r = self.adapter.r_max if r_act is None else r_act
            y = add(y, self.adapter.forward(X, r, m_act, n_act))
        return y

    def effective_weight(self):
        """Dense weights the layer multiplies by at full activation (no grad)."""
        w = self.W.data
        if self.qparams is not None:
            with_adapter = w if self.adapter is None else w + _masked_product(self)
            return fake_quant(Tensor(with_adapter), self.qparams).data
        if self.adapter is None:
            return w.copy()
        if self.mask_arr is not None:
            return w + _masked_product(self)
        return w + self.adapter.product().data


def _masked_product(layer):
    prod = layer.adapter.product().data
    return prod * layer.mask_arr if layer.mask_arr is not None else prod


class Block:
    __slots__ = ("ln1_g", "ln1_b", "q", "k", "v", "o", "ln2_g", "ln2_b", "up", "down")

    def __init__(self):
        for name in self.__slots__:
            setattr(self, name, None)

    def attn_layers(self):
        return (self.q, self.k, self.v, self.o)

    def all_layers(self):
        return (self.q, self.k, self.v, self.o, self.up, self.down)


_CAUSAL_CACHE = {}


def _causal_mask(b, h, t):
    base = _CAUSAL_CACHE.get(t)
    if base is None:
        base = np.triu(np.full((t, t), NEG_INF), k=1)
        _CAUSAL_CACHE[t] = base
    return Tensor(np.broadcast_to(base, (b, h, t, t)))


class TinyTransformer:
    def __init__(self, dims):
        self.dims = dims
        self.tok_emb = None
        self.pos_emb = None
        self.blocks = [Block() for _ in range(dims.depth)]
        self.final_ln_g = None
        self.final_ln_b = None
        self.head = None
        self.supernet = None
        self.adapter_mode = "plain"

    @classmethod
    def empty(cls, dims):
        """Structure with zero weights; extraction and loading fill it in."""
        model = cls(dims)
        z = lambda *shape: Tensor(np.zeros(shape))
        model.tok_emb = z(dims.vocab, dims.d)
        model.pos_emb = z(dims.max_seq, dims.d)
        for b, blk in enumerate(model.blocks):
            d_att = dims.heads[b] * dims.head_dim
            blk.ln1_g = Tensor(np.ones(dims.d))
            blk.ln1_b = z(dims.d)
            blk.q = AdaptedLinear(z(dims.d, d_att), layer_id(b, "q"))
            blk.k = AdaptedLinear(z(dims.d, d_att), layer_id(b, "k"))
            blk.v = AdaptedLinear(z(dims.d, d_att), layer_id(b, "v"))
            blk.o = AdaptedLinear(z(d_att, dims.d), layer_id(b, "o"))
            blk.ln2_g = Tensor(np.ones(dims.d))
            blk.ln2_b = z(dims.d)
            blk.up = AdaptedLinear(z(dims.d, dims.mlp[b]), layer_id(b, "up"))
            blk.down = AdaptedLinear(z(dims.mlp[b], dims.d), layer_id(b, "down"))
        model.final_ln_g = Tensor(np.ones(dims.d))
        model.final_ln_b = z(dims.d)
        model.head = AdaptedLinear(z(dims.d, dims.vocab), "head")
        return model

    @classmethod
    def build(cls, dims, seed):
        """Random frozen carrier; draw order is fixed for reproducibility."""
        model = cls.empty(dims)
        rng = rng_stream(seed, 0)
        model.tok_emb = Tensor(rng.normal(0.0, 0.02, (dims.vocab, dims.d)))
        model.pos_emb = Tensor(rng.normal(0.0, 0.02, (dims.max_seq, dims.d)))
        for b, blk in enumerate(model.blocks):
            d_att = dims.heads[b] * dims.head_dim
            for lay, m in ((blk.q, dims.d), (blk.k, dims.d), (blk.v, dims.d), (blk.o, d_att),
                           (blk.up, dims.d), (blk.down, dims.mlp[b])):
                n = lay.W.data.shape[1]
                lay.W = Tensor(rng.normal(0.0, 1.0 / np.sqrt(m), (m, n)))
        model.head.W = Tensor(rng.normal(0.0, 1.0 / np.sqrt(dims.d), (dims.d, dims.vocab)))
        return model

    def adapted_layers(self):
        for blk in self.blocks:
            yield from blk.all_layers()
        yield self.head

    def layers_by_id(self):
        return {lay.layer_id: lay for lay in self.adapted_layers()}

    def attach_adapters(self, cfg, seed=None, rng=None):
        """Create adapters for every target layer; L1 draws follow layer order."""
        if rng is None:
            rng = rng_stream(0 if seed is None else seed, 4)
        self.supernet = cfg
        dims = self.dims
        head_widths = None
        if cfg.mode == "B" and cfg.head_choices and len(cfg.head_choices) > 1:
            head_widths = tuple(h * dims.head_dim for h in cfg.head_choices)
        mlp_widths = None
        if cfg.mode == "B" and cfg.mlp_width_choices and len(cfg.mlp_width_choices) > 1:
            mlp_widths = cfg.mlp_width_choices
        for b, blk in enumerate(self.blocks):
            for name in LAYER_ORDER:
                if name not in cfg.targets:
                    continue
                lay = getattr(blk, name)
                m, n = lay.W.data.shape
                in_ch = out_ch = None
                if name in ("q", "k", "v"):
                    out_ch = head_widths
                elif name == "o":
                    in_ch = head_widths
                elif name == "up":
                    out_ch = mlp_widths
                elif name == "down":
                    in_ch = mlp_widths
                lay.adapter = ElasticAdapter.create(
                    m, n, cfg.rank_choices, cfg.alpha, rng, in_ch, out_ch)
        if "head" in cfg.targets:
            m, n = self.head.W.data.shape
            self.head.adapter = ElasticAdapter.create(
                m, n, cfg.rank_choices, cfg.alpha, rng)

    def _resolve_activation(self, active):
        if active is None:
            return None
        if isinstance(active, elastic.ModelActivation):
            return active
        if self.supernet is None:
            raise ContractError("model has no supernet config; pass activation=None")
        return self.supernet.decode(active)

    def forward(self, tokens, active=None):
        """Logits [B, T, vocab] for integer tokens [B, T]."""
        act = self._resolve_activation(active)
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ContractError(f"tokens must be B x T, got shape {tokens.shape}")
        bsz, t = tokens.shape
        if t > self.dims.max_seq:
            raise ContractError(f"sequence length {t} exceeds max {self.dims.max_seq}")
        dims = self.dims
        mode = self.adapter_mode
        pos = np.broadcast_to(np.arange(t), (bsz, t))
        x = add(embedding_lookup(tokens, self.tok_emb), embedding_lookup(pos, self.pos_emb))
        for b, blk in enumerate(self.blocks):
            h_full, f_full = dims.heads[b], dims.mlp[b]
            h_act = act.heads_for(b, h_full) if act else h_full
            f_act = act.mlp_for(b, f_full) if act else f_full
            if h_act > h_full or f_act > f_full:
                raise ConfigurationError(
                    f"block {b}: activation ({h_act} heads, {f_act} mlp) exceeds "
                    f"({h_full}, {f_full})")
            d_att = h_act * dims.head_dim
            n_qkv = d_att if h_act < h_full else None
            m_o = d_att if h_act < h_full else None
            n_up = f_act if f_act < f_full else None

            def r(lay):
                return act.rank_for(lay.layer_id, None) if act else None

            a = layer_norm(x, blk.ln1_g, blk.ln1_b)
            q = blk.q.forward(a, r(blk.q), None, n_qkv, mode)
            k = blk.k.forward(a, r(blk.k), None, n_qkv, mode)
            v = blk.v.forward(a, r(blk.v), None, n_qkv, mode)
            q4 = transpose(reshape(q, (bsz, t, h_act, dims.head_dim)), (0, 2, 1, 3))
            k4 = transpose(reshape(k, (bsz, t, h_act, dims.head_dim)), (0, 2, 1, 3))
            v4 = transpose(reshape(v, (bsz, t, h_act, dims.head_dim)), (0, 2, 1, 3))
            scores = scale(matmul(q4, transpose(k4, (0, 1, 3, 2))),
                           1.0 / np.sqrt(dims.head_dim))
            att = softmax(add(scores, _causal_mask(bsz, h_act, t)))
            ctx = reshape(transpose(matmul(att, v4), (0, 2, 1, 3)), (bsz, t, d_att))
            x = add(x, blk.o.forward(ctx, r(blk.o), m_o, None, mode))

            mlp_in = layer_norm(x, blk.ln2_g, blk.ln2_b)
            u = blk.up.forward(mlp_in, r(blk.up), None, n_up, mode)
            dn = blk.down.forward(gelu(u), r(blk.down), n_up, None, mode)
            x = add(x, dn)
        x = layer_norm(x, self.final_ln_g, self.final_ln_b)
        r_head = act.rank_for("head", None) if act else None
        return self.head.forward(x, r_head, None, None, mode)

    def adapter_regions(self, active=None):
        """(tensor, region) pairs the optimizer may touch for this activation."""
        act = self._resolve_activation(active)
        dims = self.dims
        regions = []
        for b, blk in enumerate(self.blocks):
            h_full, f_full = dims.heads[b], dims.mlp[b]
            h_act = act.heads_for(b, h_full) if act else h_full
            f_act = act.mlp_for(b, f_full) if act else f_full
            d_att = h_act * dims.head_dim
            n_qkv = d_att if h_act < h_full else None
            n_up = f_act if f_act < f_full else None
            widths = {"q": (None, n_qkv), "k": (None, n_qkv), "v": (None, n_qkv),
                      "o": (n_qkv, None), "up": (None, n_up), "down": (n_up, None)}
            for name in LAYER_ORDER:
                lay = getattr(blk, name)
                if lay.adapter is None:
                    continue
                r_act = act.rank_for(lay.layer_id, lay.adapter.r_max) if act else lay.adapter.r_max
                m_act, n_act = widths[name]
                regions.extend(lay.adapter.slice_params(r_act, m_act, n_act))
        if self.head.adapter is not None:
            r_act = act.rank_for("head", self.head.adapter.r_max) if act else self.head.adapter.r_max
            regions.extend(self.head.adapter.slice_params(r_act))
        return regions

    def clone(self):
        other = TinyTransformer.empty(self.dims)
        other.adapter_mode = self.adapter_mode
        other.supernet = self.supernet
        copy = lambda t: Tensor(np.array(t.data, copy=True), requires_grad=t.requires_grad)
        other.tok_emb, other.pos_emb = copy(self.tok_emb), copy(self.pos_emb)
        other.final_ln_g, other.final_ln_b = copy(self.final_ln_g), copy(self.final_ln_b)
        for src_blk, dst_blk in zip(self.blocks, other.blocks):
            for attr in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
                setattr(dst_blk, attr, copy(getattr(src_blk, attr)))
        for src, dst in zip(self.adapted_layers(), other.adapted_layers()):
            dst.W = copy(src.W)
            dst.sparsity_level = src.sparsity_level
            if src.mask_arr is not None:
                dst.mask_arr = src.mask_arr.copy()
            if src.qparams is not None:
                dst.qparams = src.qparams
            if src.qweights is not None:
                dst.qweights = src.qweights
            if src.adapter is not None:
                ad = src.adapter
                dst.adapter = ElasticAdapter(
                    copy(ad.L1), copy(ad.L2), ad.alpha, ad.rank_choices,
                    ad.in_choices, ad.out_choices)
        return other

    def start_capture(self, layer_ids):
        for lay in self.adapted_layers():
            if lay.layer_id in layer_ids:
                lay.capture = []

    def stop_capture(self):
        out = {}
        for lay in self.adapted_layers():
            if lay.capture is not None:
                out[lay.layer_id] = CalibrationBatch.from_activations(lay.capture)
                lay.capture = None
        return out

    def frozen_tensors(self):
        """name -> Tensor for everything that must never train."""
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb,
               "final_ln.g": self.final_ln_g, "final_ln.b": self.final_ln_b}
        for b, blk in enumerate(self.blocks):
            out[f"block{b}.ln1.g"] = blk.ln1_g
            out[f"block{b}.ln1.b"] = blk.ln1_b
            out[f"block{b}.ln2.g"] = blk.ln2_g
            out[f"block{b}.ln2.b"] = blk.ln2_b
        for lay in self.adapted_layers():
            out[f"{lay.layer_id}.W"] = lay.W
        return out

    def adapter_tensors(self):
        out = {}
        for lay in self.adapted_layers():
            if lay.adapter is not None:
                out[f"{lay.layer_id}.L1"] = lay.adapter.L1
                out[f"{lay.layer_id}.L2"] = lay.adapter.L2
        return out


# ---------------------------------------------------------------------------
# synthetic tasks


@dataclass(frozen=True)
class SyntheticTask:
    kind: str
    vocab: int
    seq_len: int
    seed: int
    train_inputs: np.ndarray
    train_targets: np.ndarray
    val_inputs: np.ndarray
    val_targets: np.ndarray

    @property
    def chance(self):
        return 1.0 / self.vocab

    def to_dict(self):
        return {"kind": self.kind, "vocab": self.vocab, "seq_len": self.seq_len,
                "seed": self.seed, "n_train": len(self.train_inputs),
                "n_val": len(self.val_inputs)}


def make_task(kind, vocab=64, seq_len=4, n_train=2048, n_val=512, seed=0):
    """Deterministic synthetic dataset with disjoint train/val splits."""
    if kind == "modular_add":
        return _modular_add(vocab, n_train, n_val, seed)
    if kind == "copy":
        return _copy_task(vocab, seq_len, n_train, n_val, seed)
    raise ConfigurationError(f"unknown task kind {kind!r}")


def _modular_add(vocab, n_train, n_val, seed):
    """a + b mod (vocab - 2); sequence [a, b, sep]; only the answer scores.

    Pairs are enumerated exactly once, so the two splits are disjoint by
    construction.
    """
    m = vocab - 2
    sep = vocab - 1
    if m < 2:
        raise ConfigurationError(f"vocab {vocab} too small for modular addition")
    if n_train + n_val > m * m:
        raise ConfigurationError(
            f"splits need {n_train + n_val} pairs but only {m * m} exist")
    rng = rng_stream(seed, 3)
    perm = rng.permutation(m * m)
    a, b = perm // m, perm % m
    ans = (a + b) % m
    inputs = np.stack([a, b, np.full_like(a, sep)], axis=1)
    targets = np.stack([np.full_like(a, -1), np.full_like(a, -1), ans], axis=1)
    tr = slice(0, n_train)
    va = slice(n_train, n_train + n_val)
    return SyntheticTask("modular_add", vocab, 4, seed,
                         inputs[tr], targets[tr], inputs[va], targets[va])


def _copy_task(vocab, seq_len, n_train, n_val, seed):
    """Echo k tokens after a separator; the echoed half is supervised."""
    if seq_len < 3 or seq_len % 2 == 0:
        raise ConfigurationError(f"copy task needs odd seq_len >= 3, got {seq_len}")
    k = (seq_len - 1) // 2
    sep = vocab - 1
    need = n_train + n_val
    space = (vocab - 1) ** k
    if need > space:
        raise ConfigurationError(f"splits need {need} sequences but only {space} exist")
    rng = rng_stream(seed, 3)
    seen = {}
    while len(seen) < need:
        batch = rng.integers(0, vocab - 1, (max(need, 256), k))
        for row in batch:
            seen.setdefault(tuple(row.tolist()), None)
            if len(seen) == need:
                break
    payload = np.array(list(seen.keys()), dtype=np.int64)
    seps = np.full((need, 1), sep, dtype=np.int64)
    inputs = np.concatenate([payload, seps, payload[:, :-1]], axis=1)
    ignore = np.full((need, k), -1, dtype=np.int64)
    targets = np.concatenate([ignore, payload], axis=1)
    return SyntheticTask("copy", vocab, seq_len, seed,
                         inputs[:n_train], targets[:n_train],
                         inputs[n_train:], targets[n_train:])


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass
class TrainConfig:
    steps: int
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    warmup_max_steps: int = 0


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    genomes: list = field(default_factory=list)

    @property
    def steps(self):
        return len(self.losses)


class AdamSlices:
    """Adam that touches only the activated slice of each parameter.

    Moment buffers cover the full tensors, but a step reads and writes just
    the regions activated by the sampled genome, so never-activated entries
    stay exactly at initialization.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = {}
        self.t = 0

    def step(self, regions):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for tns, rg in regions:
            if tns.grad is None:
                continue
            mv = self.state.get(id(tns))
            if mv is None:
                mv = (np.zeros_like(tns.data), np.zeros_like(tns.data))
                self.state[id(tns)] = mv
            m, v = mv
            g = tns.grad[rg]
            m[rg] = self.beta1 * m[rg] + (1.0 - self.beta1) * g
            v[rg] = self.beta2 * v[rg] + (1.0 - self.beta2) * g * g
            tns.data[rg] -= self.lr * (m[rg] / bc1) / (np.sqrt(v[rg] / bc2) + self.eps)
            tns.zero_grad()


def default_sampler(cfg, warmup_max_steps=0):
    """Uniform genome per step, optionally preceded by max-genome warmup."""

    def sampler(step, rng):
        if cfg is None:
            return None
        if step < warmup_max_steps:
            return cfg.max_genome()
        return sample_genome(cfg, rng)

    return sampler


def train_adapters(model, task, hp, sampler=None):
    """Adapter-only training; frozen tensors are untouched by construction."""
    if not model.adapter_tensors():
        raise ContractError("model has no adapters to train")
    n_train = len(task.train_inputs)
    if n_train == 0:
        raise ContractError("task has an empty train split")
    if sampler is None:
        sampler = default_sampler(model.supernet, hp.warmup_max_steps)
    batch_rng = rng_stream(hp.seed, 1)
    genome_rng = rng_stream(hp.seed, 2)
    opt = AdamSlices(hp.lr, hp.beta1, hp.beta2, hp.eps)
    log = TrainLog()
    for step in range(hp.steps):
        idx = batch_rng.integers(0, n_train, hp.batch_size)
        genome = sampler(step, genome_rng)
        with Tape():
            logits = model.forward(task.train_inputs[idx], genome)
            loss = cross_entropy(logits, task.train_targets[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(step, value)
            backward(loss)
        opt.step(model.adapter_regions(genome))
        log.losses.append(value)
        log.genomes.append(genome)
    return log


def evaluate(model, inputs, targets, active=None, batch_size=256):
    """Mean loss and exact-match accuracy over supervised positions."""
    if len(inputs) == 0:
        raise ContractError("cannot evaluate an empty split")
    total_nll = 0.0
    correct = 0
    count = 0
    for start in range(0, len(inputs), batch_size):
        xb = inputs[start:start + batch_size]
        yb = targets[start:start + batch_size]
        logits = model.forward(xb, active)
        valid = yb != -1
        k = int(valid.sum())
        if k == 0:
            continue
        loss = cross_entropy(logits, yb)
        total_nll += loss.item() * k
        pred = np.argmax(logits.data, axis=-1)
        correct += int((pred[valid] == yb[valid]).sum())
        count += k
    if count == 0:
        raise ContractError("no supervised positions in the split")
    return {"loss": total_nll / count, "accuracy": correct / count}
