"""Elastic low-rank adapters and the weight-sharing supernet search space.

Mode A adapters are elastic in rank only; Mode B adapters are additionally
elastic in channel widths, which also slices the frozen weight they ride on.
Activating a choice always takes the *leading* slice of the stored factors,
so every sub-configuration shares one set of weights.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError
from .tensor import Tensor, leading_slice, matmul, scale

ATTN_LAYERS = ("q", "k", "v", "o")
MLP_LAYERS = ("up", "down")
LAYER_ORDER = ATTN_LAYERS + MLP_LAYERS


class ElasticAdapter:
    """Two trainable low-rank factors with activatable rank/width slices.

    L1 is m x r_max, L2 is r_max x n. The adapter contribution to a linear
    layer is s * X @ L1 @ L2 with s = alpha / r_max, fixed across activated
    ranks. L2 starts at zero so an untrained adapter is a no-op.
    """

    def __init__(self, L1, L2, alpha, rank_choices, in_choices=None, out_choices=None):
        self.L1 = L1
        self.L2 = L2
        self.alpha = float(alpha)
        self.rank_choices = tuple(sorted(int(r) for r in rank_choices))
        self.in_choices = None if in_choices is None else tuple(sorted(map(int, in_choices)))
        self.out_choices = None if out_choices is None else tuple(sorted(map(int, out_choices)))
        m, r1 = L1.data.shape
        r2, n = L2.data.shape
        if r1 != r2:
            raise ConfigurationError(f"adapter factor shapes disagree: {L1.data.shape} vs {L2.data.shape}")
        if not self.rank_choices or self.rank_choices[-1] != r1:
            raise ConfigurationError(f"max rank choice must equal stored rank {r1}, got {self.rank_choices}")
        if any(r < 1 for r in self.rank_choices):
            raise ConfigurationError(f"rank choices must be positive, got {self.rank_choices}")
        if r1 > min(m, n):
            raise ConfigurationError(f"rank {r1} exceeds layer dims ({m}, {n})")
        for choices, cap, label in ((self.in_choices, m, "in"), (self.out_choices, n, "out")):
            if choices is not None and (choices[0] < 1 or choices[-1] != cap):
                raise ConfigurationError(
                    f"{label}_choices {choices} invalid: max must equal the full dim {cap}"
                )

    @property
    def r_max(self):
        return self.L1.data.shape[1]

    @property
    def mode(self):
        return "B" if (self.in_choices or self.out_choices) else "A"

    @property
    def scaling(self):
        return self.alpha / self.r_max

    @classmethod
    def create(cls, m, n, rank_choices, alpha, rng, in_choices=None, out_choices=None):
        r_max = max(rank_choices)
        L1 = Tensor(rng.normal(0.0, 0.02, (m, r_max)), requires_grad=True)
        L2 = Tensor(np.zeros((r_max, n)), requires_grad=True)
        return cls(L1, L2, alpha, rank_choices, in_choices, out_choices)

    def _validate_widths(self, m_act, n_act):
        m, n = self.L1.data.shape[0], self.L2.data.shape[1]
        for val, full, choices, label in (
            (m_act, m, self.in_choices, "in"),
            (n_act, n, self.out_choices, "out"),
        ):
            if val is None or val == full:
                continue
            if choices is None or val not in choices:
                raise ConfigurationError(
                    f"width {val} not in declared {label}_choices {choices}"
                )

    def forward(self, X, r_act, m_act=None, n_act=None):
        """s * X @ L1[:m_act, :r_act] @ L2[:r_act, :n_act]."""
        if r_act not in self.rank_choices:
            raise ConfigurationError(f"rank {r_act} not in declared choices {self.rank_choices}")
        self._validate_widths(m_act, n_act)
        l1 = leading_slice(self.L1, m_act, r_act)
        l2 = leading_slice(self.L2, r_act, n_act)
        return scale(matmul(matmul(X, l1), l2), self.scaling)

    def product(self, r_act=None, m_act=None, n_act=None):
        """The scaled dense update s * L1 @ L2 over the activated slices."""
        r = self.r_max if r_act is None else r_act
        if r not in self.rank_choices:
            raise ConfigurationError(f"rank {r} not in declared choices {self.rank_choices}")
        self._validate_widths(m_act, n_act)
        l1 = leading_slice(self.L1, m_act, r)
        l2 = leading_slice(self.L2, r, n_act)
        return scale(matmul(l1, l2), self.scaling)

    def slice_params(self, r_act, m_act=None, n_act=None):
        """Optimizer regions: the (rows, cols) extents touched this step."""
        m = self.L1.data.shape[0] if m_act is None else m_act
        n = self.L2.data.shape[1] if n_act is None else n_act
        return (
            (self.L1, (slice(0, m), slice(0, r_act))),
            (self.L2, (slice(0, r_act), slice(0, n))),
        )


def slice_frozen(layer, m_act=None, n_act=None):
    """Leading m_act x n_act view of a layer's frozen weight (Mode B)."""
    return leading_slice(layer.W, m_act, n_act)


@dataclass(frozen=True)
class ElasticDim:
    """One searchable dimension: a layer's rank or a width group's size."""

    name: str
    kind: str  # "rank" | "heads" | "mlp"
    choices: tuple
    block: int = -1  # width dims only

    def __post_init__(self):
        if self.kind not in ("rank", "heads", "mlp"):
            raise ConfigurationError(f"unknown elastic dim kind {self.kind!r}")
        if list(self.choices) != sorted(set(self.choices)):
            raise ConfigurationError(f"choices for {self.name} must be sorted and unique: {self.choices}")


@dataclass(frozen=True)
class ModelActivation:
    """Decoded genome: concrete rank per adapted layer and width per group."""

    ranks: dict = field(default_factory=dict)
    heads: dict = field(default_factory=dict)
    mlp: dict = field(default_factory=dict)

    def rank_for(self, layer_id, default):
        return self.ranks.get(layer_id, default)

    def heads_for(self, block, default):
        return self.heads.get(block, default)

    def mlp_for(self, block, default):
        return self.mlp.get(block, default)


class SupernetConfig:
    """Declares every elastic dimension of a model, in a fixed order.

    The genome is a tuple of choice indices aligned with `dims`. Order:
    for each block, rank dims for the adapted layers (q,k,v,o,up,down as
    configured), then in Mode B the block's head-count dim and MLP-width
    dim; a final rank dim for the output head if it is adapted.
    """

    def __init__(self, mode, dims, targets, rank_choices, alpha,
                 head_choices=None, mlp_width_choices=None, depth=None):
        if mode not in ("A", "B"):
            raise ConfigurationError(f"supernet mode must be 'A' or 'B', got {mode!r}")
        self.mode = mode
        self.dims = tuple(dims)
        self.targets = tuple(targets)
        self.rank_choices = tuple(rank_choices)
        self.alpha = float(alpha)
        self.head_choices = None if head_choices is None else tuple(head_choices)
        self.mlp_width_choices = None if mlp_width_choices is None else tuple(mlp_width_choices)
        self.depth = depth
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate elastic dimension names")

    @property
    def genome_length(self):
        return len(self.dims)

    def space_size(self):
        size = 1
        for d in self.dims:
            size *= len(d.choices)
        return size

    @classmethod
    def build(cls, model_dims, targets=("q", "v", "up", "down"), rank_choices=(8,),
              alpha=16.0, mode="A", head_choices=None, mlp_width_choices=None):
        """Lay out elastic dims for a uniform-width carrier model."""
        targets = tuple(targets)
        for t in targets:
            if t not in LAYER_ORDER + ("head",):
                raise ConfigurationError(f"unknown adapter target {t!r}")
        rank_choices = tuple(sorted(set(int(r) for r in rank_choices)))
        if not rank_choices or rank_choices[0] < 1:
            raise ConfigurationError(f"bad rank choices {rank_choices}")
        if mode == "A" and (head_choices or mlp_width_choices):
            raise ConfigurationError("width choices are a Mode-B feature")

        heads_full = model_dims.heads[0]
        mlp_full = model_dims.mlp[0]
        if mode == "B":
            head_choices = tuple(sorted(set(map(int, head_choices or (heads_full,)))))
            mlp_width_choices = tuple(sorted(set(map(int, mlp_width_choices or (mlp_full,)))))
            if head_choices[0] < 1 or head_choices[-1] != heads_full:
                raise ConfigurationError(
                    f"head choices {head_choices} must end at the full head count {heads_full}"
                )
            if mlp_width_choices[0] < 1 or mlp_width_choices[-1] != mlp_full:
                raise ConfigurationError(
                    f"MLP width choices {mlp_width_choices} must end at the full width {mlp_full}"
                )

        dims = []
        for b in range(model_dims.depth):
            for name in LAYER_ORDER:
                if name in targets:
                    dims.append(ElasticDim(layer_id(b, name), "rank", rank_choices, b))
            if mode == "B":
                if len(head_choices) > 1:
                    dims.append(ElasticDim(f"block{b}.heads", "heads", head_choices, b))
                if len(mlp_width_choices) > 1:
                    dims.append(ElasticDim(f"block{b}.mlp_width", "mlp", mlp_width_choices, b))
        if "head" in targets:
            dims.append(ElasticDim("head", "rank", rank_choices, -1))
        return cls(mode, dims, targets, rank_choices, alpha,
                   head_choices, mlp_width_choices, model_dims.depth)

    def validate(self, genome):
        genome = tuple(int(g) for g in genome)
        if len(genome) != len(self.dims):
            raise ConfigurationError(
                f"genome length {len(genome)} != {len(self.dims)} elastic dims"
            )
        for idx, dim in zip(genome, self.dims):
            if not 0 <= idx < len(dim.choices):
                raise ConfigurationError(
                    f"choice index {idx} out of range for dimension {dim.name} "
                    f"with {len(dim.choices)} choices"
                )
        return genome

    def decode(self, genome):
        genome = self.validate(genome)
        act = ModelActivation()
        for idx, dim in zip(genome, self.dims):
            value = dim.choices[idx]
            if dim.kind == "rank":
                act.ranks[dim.name] = value
            elif dim.kind == "heads":
                act.heads[dim.block] = value
            else:
                act.mlp[dim.block] = value
        return act

    def max_genome(self):
        return tuple(len(d.choices) - 1 for d in self.dims)

    def enumerate_genomes(self):
        return itertools.product(*(range(len(d.choices)) for d in self.dims))

    def to_dict(self):
        return {
            "mode": self.mode,
            "targets": list(self.targets),
            "rank_choices": list(self.rank_choices),
            "alpha": self.alpha,
            "head_choices": None if self.head_choices is None else list(self.head_choices),
            "mlp_width_choices": None if self.mlp_width_choices is None
            else list(self.mlp_width_choices),
        }

    @classmethod
    def from_dict(cls, d, model_dims):
        return cls.build(
            model_dims,
            targets=tuple(d["targets"]),
            rank_choices=tuple(d["rank_choices"]),
            alpha=d["alpha"],
            mode=d["mode"],
            head_choices=d.get("head_choices"),
            mlp_width_choices=d.get("mlp_width_choices"),
        )


def layer_id(block, name):
    if name == "head":
        return "head"
    group = "attn" if name in ATTN_LAYERS else "mlp"
    return f"block{block}.{group}.{name}"


def sample_genome(cfg, rng):
    """One uniform independent choice per elastic dimension."""
    return tuple(int(rng.integers(0, len(d.choices))) for d in cfg.dims)


def heuristic_midpoint(cfg):
    """Median choice per dimension; even counts round down."""
    return tuple((len(d.choices) - 1) // 2 for d in cfg.dims)


def extract_subnet(model, genome):
    """Physically copy the activated slices into a standalone smaller model.

    The result is a plain model whose maximal configuration is exactly the
    activated sub-configuration, with single-choice adapters.
    """
    from . import model as model_mod

    cfg = model.supernet
    if cfg is None:
        raise ContractError("model has no supernet configuration to extract from")
    act = cfg.decode(genome)
    dims = model.dims
    new_heads = tuple(act.heads_for(b, dims.heads[b]) for b in range(dims.depth))
    new_mlp = tuple(act.mlp_for(b, dims.mlp[b]) for b in range(dims.depth))
    new_dims = model_mod.ModelDims(
        vocab=dims.vocab, d=dims.d, head_dim=dims.head_dim,
        heads=new_heads, mlp=new_mlp, depth=dims.depth, max_seq=dims.max_seq,
    )
    new_model = model_mod.TinyTransformer.empty(new_dims)
    new_model.adapter_mode = model.adapter_mode

    def copy_tensor(t):
        return Tensor(np.array(t.data, copy=True), requires_grad=False)

    new_model.tok_emb = copy_tensor(model.tok_emb)
    new_model.pos_emb = copy_tensor(model.pos_emb)
    new_model.final_ln_g = copy_tensor(model.final_ln_g)
    new_model.final_ln_b = copy_tensor(model.final_ln_b)

    new_dims_by_layer = {}
    for b in range(dims.depth):
        d_att = new_heads[b] * dims.head_dim
        new_dims_by_layer.update({
            layer_id(b, "q"): (None, d_att), layer_id(b, "k"): (None, d_att),
            layer_id(b, "v"): (None, d_att), layer_id(b, "o"): (d_att, None),
            layer_id(b, "up"): (None, new_mlp[b]), layer_id(b, "down"): (new_mlp[b], None),
        })

    for old_block, new_block in zip(model.blocks, new_model.blocks):
        for attr in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            setattr(new_block, attr, copy_tensor(getattr(old_block, attr)))

    for old_layer, new_layer in zip(model.adapted_layers(), new_model.adapted_layers()):
        m_act, n_act = new_dims_by_layer.get(old_layer.layer_id, (None, None))
        m = old_layer.W.data.shape[0] if m_act is None else m_act
        n = old_layer.W.data.shape[1] if n_act is None else n_act
        new_layer.W = Tensor(np.array(old_layer.W.data[:m, :n], copy=True))
        if old_layer.mask_arr is not None:
            new_layer.mask_arr = np.array(old_layer.mask_arr[:m, :n], copy=True)
        if old_layer.qparams is not None:
            new_layer.qparams = old_layer.qparams.cols(n)
        ad = old_layer.adapter
        if ad is not None:
            r = act.rank_for(old_layer.layer_id, ad.r_max)
            new_layer.adapter = ElasticAdapter(
                Tensor(np.array(ad.L1.data[:m, :r], copy=True), requires_grad=True),
                Tensor(np.array(ad.L2.data[:r, :n], copy=True), requires_grad=True),
                # keep the shared-training scaling: s = alpha/r_max of the parent
                alpha=ad.scaling * r,
                rank_choices=(r,),
            )
    # the result is static; its adapters carry their own singleton choices
    new_model.supernet = None
    return new_model
