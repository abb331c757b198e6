"""The growing model: per-task experts wired together by task attention.

A ``CilModel`` holds one expert per task.  Each expert owns its patch
embedding, per-block attention and feature-mixing parameters, a task token
with its read-out block, and a classifier slice.  ``add_expert`` freezes
everything that exists and appends a fresh expert, so old outputs are
reproduced bit-for-bit forever after.

Three wirings are supported:

* ``ia``  - experts run independently; features are concatenated.
* ``sta`` - spatial attention runs jointly over the (patch, head) tokens of
  all experts visible to each task, restricted to a configurable set of
  same/different-patch x same/different-head groups.
* ``dne`` - spatial attention stays per-task, and the feature-mixing block
  becomes a task attention block (TAB) that lets the newest expert query
  the per-patch head features of every expert.

Each TAB applies task attention twice per block: once over the post-MHSA
tokens to produce the widened intermediate, once over the intermediates of
all tasks to produce the residual update (head width gamma*D on the way up,
D on the way down).
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import backbone as B
from . import tensor as T
from .config import ConfigError
from .tensor import Tensor

STRATEGIES = ("ia", "sta", "dne")
STA_VARIANTS = ("none", "spdh", "dpdh", "both")
SHARE_MODES = ("s", "f")

CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint container."""


# ----------------------------------------------------------------- layout

@dataclass(frozen=True)
class ExpertLayout:
    """How many spatial-attention heads each task expert owns."""
    heads_per_task: tuple[int, ...]
    head_dim: int
    gamma: int

    def __post_init__(self):
        if any(h < 1 for h in self.heads_per_task):
            raise ConfigError("every expert needs at least one head")

    @property
    def total_heads(self) -> int:
        return sum(self.heads_per_task)

    @property
    def hidden_dim(self) -> int:
        return self.gamma * self.head_dim

    def width(self, task: int) -> int:
        return self.head_dim * self.heads_per_task[task]

    def pool_heads(self, task: int) -> int:
        """Heads visible to ``task``: its own plus all earlier experts'."""
        return sum(self.heads_per_task[: task + 1])

    def head_to_task(self) -> list[int]:
        out = []
        for t, h in enumerate(self.heads_per_task):
            out.extend([t] * h)
        return out


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 16
    patch_size: int = 4
    in_channels: int = 3
    head_dim: int = 16
    gamma: int = 4
    layers: int = 2
    strategy: str = "dne"
    sta_variant: str = "both"
    cta_layers: tuple[bool, ...] | None = None
    cta_in_mhsa: bool = False
    cta_in_fc1: bool = True
    cta_in_fc2: bool = True
    share_q: str = "s"
    share_k: str = "s"
    share_v: str = "f"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.sta_variant not in STA_VARIANTS:
            raise ConfigError(f"unknown sta variant {self.sta_variant!r}")
        for mode in (self.share_q, self.share_k, self.share_v):
            if mode not in SHARE_MODES:
                raise ConfigError(f"share mode must be 's' or 'f', got {mode!r}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.cta_layers is not None and len(self.cta_layers) != self.layers:
            raise ConfigError("cta_layers mask length must equal layer count")

    @property
    def num_patches(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    def cta_mask(self) -> tuple[bool, ...]:
        if self.cta_layers is None:
            return tuple([True] * self.layers)
        return tuple(bool(v) for v in self.cta_layers)


# ----------------------------------------------------------------- TAB params

@dataclass
class TaStageParams:
    """One task-attention application.

    ``wq``/``wk`` are ``None`` on experts that reuse the shared (task-1)
    matrices; ``wv_own`` holds only the value matrices this expert owns --
    the full per-head stack is assembled at forward time.
    """
    ln_gain: Tensor           # (din_head,)
    ln_bias: Tensor
    wq: Tensor | None         # (din_head, attn_dim)
    wk: Tensor | None
    wv_own: Tensor            # (n_own, din_head, dout_head)
    lam: Tensor               # (H_t,) learned per-new-head scale


@dataclass
class TabParams:
    stage1: TaStageParams     # tokens D -> intermediate heads gamma*D
    stage2: TaStageParams     # intermediates gamma*D -> update heads D


@dataclass
class CtaAttentionParams:
    """MHSA variant whose q/k/v projections are task attentions."""
    ta_q: TaStageParams
    ta_k: TaStageParams
    ta_v: TaStageParams
    fuse_w: Tensor
    fuse_b: Tensor


@dataclass
class StaAttentionParams:
    """Per-task piece of the joint wiring: only the fusion layer.

    The q/k/v projections live in one tied set per block (owned by the
    first task, frozen afterwards) so that every head's keys are the same
    function of its tokens.
    """
    fuse_w: Tensor
    fuse_b: Tensor


@dataclass
class BlockStage:
    kind: str                        # "mlp" | "ta"
    mlp: B.MlpStageParams | None = None
    ta: TaStageParams | None = None


@dataclass
class ExpertBlock:
    attn: B.SelfAttentionParams | CtaAttentionParams | StaAttentionParams
    fc1: BlockStage
    fc2: BlockStage


@dataclass
class TaskExpert:
    index: int
    heads: int
    n_classes: int
    embed: B.PatchEmbedParams
    blocks: list[ExpertBlock]
    token: Tensor                    # (1, D*H_t)
    token_block: B.SelfAttentionParams
    head_w: Tensor                   # (D*H_t, n_classes)
    head_b: Tensor


@dataclass
class StageView:
    """A TA stage with sharing resolved: ready-to-run tensors."""
    ln_gain: Tensor
    ln_bias: Tensor
    wq: Tensor
    wk: Tensor
    wv_stacks: list[Tensor]          # concat along head axis gives (H_pool, din, dout)
    lam: Tensor
    attn_dim: int


# ----------------------------------------------------------------- model

class CilModel:
    """The growing class-incremental network."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.experts: list[TaskExpert] = []
        self.pos: Tensor | None = None
        self.tied_attn: list[B.TiedAttentionParams] | None = None
        self.aux_w: Tensor | None = None
        self.aux_b: Tensor | None = None
        self._params: dict[str, Tensor] = {}

    # -- bookkeeping ------------------------------------------------------

    @property
    def task_count(self) -> int:
        return len(self.experts)

    @property
    def layout(self) -> ExpertLayout:
        return ExpertLayout(tuple(e.heads for e in self.experts),
                            self.cfg.head_dim, self.cfg.gamma)

    @property
    def classes_per_task(self) -> list[int]:
        return [e.n_classes for e in self.experts]

    @property
    def total_classes(self) -> int:
        return sum(e.n_classes for e in self.experts)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    def trainable_parameters(self) -> list[Tensor]:
        return [t for t in self._params.values() if t.requires_grad]

    def parameters_with_prefix(self, *prefixes: str) -> list[Tensor]:
        return [t for n, t in self._params.items()
                if t.requires_grad and any(n.startswith(p) for p in prefixes)]

    def freeze_all(self) -> None:
        for t in self._params.values():
            t.requires_grad = False

    def head_to_task(self) -> list[int]:
        return self.layout.head_to_task()

    def _register(self, name: str, tensor: Tensor) -> Tensor:
        self._params[name] = tensor
        return tensor

    def _register_attn(self, prefix: str, p: B.SelfAttentionParams) -> None:
        for f in fields(p):
            self._register(f"{prefix}.{f.name}", getattr(p, f.name))

    def _register_ta(self, prefix: str, p: TaStageParams) -> None:
        self._register(f"{prefix}.ln_gain", p.ln_gain)
        self._register(f"{prefix}.ln_bias", p.ln_bias)
        if p.wq is not None:
            self._register(f"{prefix}.wq", p.wq)
        if p.wk is not None:
            self._register(f"{prefix}.wk", p.wk)
        self._register(f"{prefix}.wv", p.wv_own)
        self._register(f"{prefix}.lam", p.lam)

    def _register_mlp_stage(self, prefix: str, p: B.MlpStageParams) -> None:
        for f in fields(p):
            self._register(f"{prefix}.{f.name}", getattr(p, f.name))

    # -- expansion ----------------------------------------------------------

    def add_expert(self, new_heads: int, new_classes: int) -> "CilModel":
        """Freeze the existing network and append a task expert.

        The new expert gets ``new_heads`` spatial heads, TAB matrices for
        every head it can see (respecting the share modes), a task token,
        a classifier slice of ``new_classes`` outputs, and a fresh
        (new_classes + 1)-way auxiliary head.
        """
        if new_heads < 1:
            raise ConfigError(f"new_heads must be >= 1, got {new_heads}")
        if new_classes < 1:
            raise ConfigError(f"new_classes must be >= 1, got {new_classes}")
        cfg = self.cfg
        self.freeze_all()
        t = len(self.experts)
        rng = self.rng
        d = cfg.head_dim
        dp = cfg.gamma * d
        width = d * new_heads
        pool = sum(e.heads for e in self.experts) + new_heads

        if t == 0:
            self.pos = B.init_positional_table(rng, cfg.num_patches, d)
            self._register("pos", self.pos)
            if cfg.strategy == "sta":
                self.tied_attn = []
                for l in range(cfg.layers):
                    tied = B.init_tied_attention(rng, d)
                    for f in fields(tied):
                        self._register(f"shared.attn{l}.{f.name}", getattr(tied, f.name))
                    self.tied_attn.append(tied)

        ecfg = B.PatchEmbedConfig(cfg.image_size, cfg.patch_size, cfg.in_channels,
                                  d, new_heads)
        embed = B.init_patch_embed(rng, ecfg)
        self._register(f"task{t}.embed.weight", embed.weight)
        self._register(f"task{t}.embed.bias", embed.bias)

        def ta_stage(prefix: str, din: int, dout: int, shared_ok: bool) -> TaStageParams:
            own_q = t == 0 or cfg.share_q == "f" or not shared_ok
            own_k = t == 0 or cfg.share_k == "f" or not shared_ok
            own_all_v = cfg.share_v == "f" or not shared_ok
            n_own = pool if own_all_v else new_heads
            p = TaStageParams(
                ln_gain=Tensor(np.ones(din), requires_grad=True),
                ln_bias=Tensor(np.zeros(din), requires_grad=True),
                wq=Tensor(T.fan_in_normal(rng, (din, d)), requires_grad=True) if own_q else None,
                wk=Tensor(T.fan_in_normal(rng, (din, d)), requires_grad=True) if own_k else None,
                wv_own=Tensor(T.fan_in_normal(rng, (n_own, din, dout)), requires_grad=True),
                lam=Tensor(np.ones(new_heads), requires_grad=True),
            )
            self._register_ta(prefix, p)
            return p

        cta_mask = cfg.cta_mask()
        blocks: list[ExpertBlock] = []
        for l in range(cfg.layers):
            pfx = f"task{t}.blk{l}"
            if cfg.strategy == "sta":
                attn: B.SelfAttentionParams | CtaAttentionParams | StaAttentionParams
                attn = StaAttentionParams(
                    fuse_w=self._register(f"{pfx}.attn.fuse_w",
                                          Tensor(T.fan_in_normal(rng, (width, width)),
                                                 requires_grad=True)),
                    fuse_b=self._register(f"{pfx}.attn.fuse_b",
                                          Tensor(np.zeros(width), requires_grad=True)),
                )
            elif cfg.strategy == "dne" and cfg.cta_in_mhsa:
                attn = CtaAttentionParams(
                    ta_q=ta_stage(f"{pfx}.attn.ta_q", d, d, shared_ok=False),
                    ta_k=ta_stage(f"{pfx}.attn.ta_k", d, d, shared_ok=False),
                    ta_v=ta_stage(f"{pfx}.attn.ta_v", d, d, shared_ok=False),
                    fuse_w=self._register(f"{pfx}.attn.fuse_w",
                                          Tensor(T.fan_in_normal(rng, (width, width)),
                                                 requires_grad=True)),
                    fuse_b=self._register(f"{pfx}.attn.fuse_b",
                                          Tensor(np.zeros(width), requires_grad=True)),
                )
            else:
                sa = B.init_self_attention(rng, new_heads, d)
                self._register_attn(f"{pfx}.attn", sa)
                attn = sa

            use_tab = cfg.strategy == "dne" and cta_mask[l]
            if use_tab and cfg.cta_in_fc1:
                fc1 = BlockStage("ta", ta=ta_stage(f"{pfx}.fc1", d, dp, shared_ok=True))
            else:
                st = B.init_mlp_stage(rng, d, width, cfg.gamma * width)
                self._register_mlp_stage(f"{pfx}.fc1", st)
                fc1 = BlockStage("mlp", mlp=st)
            if use_tab and cfg.cta_in_fc2:
                fc2 = BlockStage("ta", ta=ta_stage(f"{pfx}.fc2", dp, d, shared_ok=True))
            else:
                st = B.init_mlp_stage(rng, dp, cfg.gamma * width, width)
                self._register_mlp_stage(f"{pfx}.fc2", st)
                fc2 = BlockStage("mlp", mlp=st)
            blocks.append(ExpertBlock(attn=attn, fc1=fc1, fc2=fc2))

        token = Tensor(T.trunc_normal(rng, (1, width)), requires_grad=True)
        self._register(f"task{t}.token", token)
        token_block = B.init_self_attention(rng, new_heads, d)
        self._register_attn(f"task{t}.tok_blk", token_block)

        head_w = Tensor(T.fan_in_normal(rng, (width, new_classes)), requires_grad=True)
        head_b = Tensor(np.zeros(new_classes), requires_grad=True)
        self._register(f"task{t}.head.w", head_w)
        self._register(f"task{t}.head.b", head_b)

        self.experts.append(TaskExpert(
            index=t, heads=new_heads, n_classes=new_classes, embed=embed,
            blocks=blocks, token=token, token_block=token_block,
            head_w=head_w, head_b=head_b))

        total_width = d * pool
        self.aux_w = Tensor(T.fan_in_normal(rng, (total_width, new_classes + 1)),
                            requires_grad=True)
        self.aux_b = Tensor(np.zeros(new_classes + 1), requires_grad=True)
        self._register("aux.w", self.aux_w)
        self._register("aux.b", self.aux_b)
        return self

    # -- sharing resolution ---------------------------------------------------

    def _stage_view(self, layer: int, which: str, task: int) -> StageView:
        """Resolve shared matrices and collect value stacks for one TA stage."""
        def stage_of(i: int) -> TaStageParams:
            blk = self.experts[i].blocks[layer]
            if which == "fc1":
                st = blk.fc1.ta
            elif which == "fc2":
                st = blk.fc2.ta
            else:
                st = getattr(blk.attn, which)
            if st is None:
                raise T.ContractError(f"block {layer} stage {which} is not task attention")
            return st

        own = stage_of(task)
        wq = own.wq if own.wq is not None else stage_of(0).wq
        wk = own.wk if own.wk is not None else stage_of(0).wk
        if own.wv_own.shape[0] == self.layout.pool_heads(task):
            stacks = [own.wv_own]
        else:
            stacks = [stage_of(i).wv_own for i in range(task + 1)]
        return StageView(ln_gain=own.ln_gain, ln_bias=own.ln_bias, wq=wq, wk=wk,
                         wv_stacks=stacks, lam=own.lam, attn_dim=self.cfg.head_dim)

    # -- forward ---------------------------------------------------------------

    def forward(self, image, *, collect_attn: bool = False,
                strategy: str | None = None, sta_variant: str | None = None
                ) -> "ForwardResult":
        return _forward(self, image, collect_attn=collect_attn,
                        strategy=strategy, sta_variant=sta_variant)

    def eval_logits(self, image) -> np.ndarray:
        with T.no_grad():
            return self.forward(image).logits.data.copy()


@dataclass
class ForwardResult:
    r_layers: list[list[Tensor]]         # [layers+1][task] block inputs/outputs
    o_layers: list[list[Tensor]]         # [layers][task] mixing intermediates
    token_feats: list[Tensor]            # per task (1, D*H_t)
    logits: Tensor                       # (total classes,)
    aux_logits: Tensor                   # (|Y_t| + 1,)
    spatial_attn: list[list[np.ndarray]] | None = None
    tab_attn: list[list[tuple[np.ndarray, np.ndarray] | None]] | None = None

    @property
    def features(self) -> list[Tensor]:
        return self.r_layers[-1]


# ----------------------------------------------------------------- task attention

def task_attention(tokens: Tensor, n_query: int, view: StageView,
                   attn_override: np.ndarray | None = None):
    """Attend the last ``n_query`` head tokens over the whole pool.

    ``tokens`` is (P, H_pool, din).  Queries come from the newest task's
    heads only; keys span every head; each source head has its own value
    matrix.  Returns (P, n_query, dout) outputs scaled by the per-head
    lambdas and the (P, n_query, H_pool) attention weights.
    """
    p, h_pool, din = tokens.shape
    x = T.layer_norm(tokens, view.ln_gain, view.ln_bias)
    flat = T.reshape(x, (p * h_pool, din))
    k = T.reshape(T.matmul(flat, view.wk), (p, h_pool, view.attn_dim))
    qtok = T.narrow(x, 1, h_pool - n_query, n_query)
    q = T.reshape(T.matmul(T.reshape(qtok, (p * n_query, din)), view.wq),
                  (p, n_query, view.attn_dim))
    scores = T.bmm(q, T.swap_axes(k, 1, 2))
    if attn_override is not None:
        attn = Tensor(np.broadcast_to(attn_override, (p, n_query, h_pool)).copy())
    else:
        attn = T.softmax_rows(scores, math.sqrt(view.attn_dim))
    wv = view.wv_stacks[0] if len(view.wv_stacks) == 1 else T.concat(view.wv_stacks, axis=0)
    v = T.swap_axes(T.bmm(T.swap_axes(x, 0, 1), wv), 0, 1)    # (P, H_pool, dout)
    out = T.bmm(attn, v)
    out = T.mul(out, T.reshape(view.lam, (1, n_query, 1)))
    return out, attn


def _head_tokens(feats: list[Tensor], head_dim: int) -> Tensor:
    """Concat per-task (P, D*H_i) features into (P, H_pool, D) head tokens."""
    parts = []
    for f in feats:
        p, width = f.shape
        parts.append(T.reshape(f, (p, width // head_dim, head_dim)))
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=1)


def tab_attention(s_list: list[Tensor], model: CilModel, layer: int,
                  task: int) -> Tensor:
    """First-application attention weights A of the TAB: (P, H_t, H_pool)."""
    view = model._stage_view(layer, "fc1", task)
    tokens = _head_tokens(s_list[: task + 1], model.cfg.head_dim)
    _, attn = task_attention(tokens, model.experts[task].heads, view)
    return attn


def tab_forward(s_list: list[Tensor], o_prior: list[Tensor], model: CilModel,
                layer: int, task: int, *, attn_override: np.ndarray | None = None):
    """Run both TA applications of one expert's TAB.

    ``s_list`` holds post-MHSA features of tasks 0..task; ``o_prior`` the
    already-computed intermediates of tasks 0..task-1 (the frozen experts
    recompute them every forward pass).  Returns (o_t, r_t, (A1, A2)).
    """
    if len(o_prior) != task:
        raise T.ContractError(
            f"tab_forward task {task} needs {task} cached intermediates, got {len(o_prior)}")
    cfg = model.cfg
    d = cfg.head_dim
    h_t = model.experts[task].heads
    blk = model.experts[task].blocks[layer]
    s_t = s_list[task]
    p = s_t.shape[0]

    if blk.fc1.kind == "ta":
        view1 = model._stage_view(layer, "fc1", task)
        raw1, a1 = task_attention(_head_tokens(s_list[: task + 1], d), h_t, view1,
                                  attn_override=attn_override)
        o3 = T.gelu(raw1)                                   # (P, H_t, gamma*D)
        o_t = T.reshape(o3, (p, cfg.gamma * d * h_t))
    else:
        st = blk.fc1.mlp
        o_t = T.gelu(T.linear(B.per_head_layer_norm(s_t, st.ln_gain, st.ln_bias, d),
                              st.w, st.b))
        a1 = None

    if blk.fc2.kind == "ta":
        view2 = model._stage_view(layer, "fc2", task)
        o_tokens = _head_tokens(o_prior + [o_t], cfg.gamma * d)
        raw2, a2 = task_attention(o_tokens, h_t, view2, attn_override=attn_override)
        r_t = T.add(s_t, T.reshape(raw2, (p, d * h_t)))
    else:
        st = blk.fc2.mlp
        upd = T.linear(B.per_head_layer_norm(o_t, st.ln_gain, st.ln_bias, cfg.gamma * d),
                       st.w, st.b)
        r_t = T.add(s_t, upd)
        a2 = None

    pair = (None if a1 is None else a1.data, None if a2 is None else a2.data)
    return o_t, r_t, pair


# ----------------------------------------------------------------- attention stages

def _cta_mhsa_task(model: CilModel, layer: int, task: int, r_list: list[Tensor]):
    """Per-head spatial attention whose q/k/v come from task attentions."""
    cfg = model.cfg
    d = cfg.head_dim
    ex = model.experts[task]
    blk = ex.blocks[layer]
    tokens = _head_tokens(r_list[: task + 1], d)
    outs = {}
    for name in ("ta_q", "ta_k", "ta_v"):
        view = model._stage_view(layer, name, task)
        out, _ = task_attention(tokens, ex.heads, view)
        outs[name] = T.swap_axes(out, 0, 1)                 # (H_t, P, D)
    logits = T.bmm(outs["ta_q"], T.swap_axes(outs["ta_k"], 1, 2))
    attn = T.softmax_rows(logits, math.sqrt(d))
    av = T.bmm(attn, outs["ta_v"])
    p = r_list[task].shape[0]
    cat = T.reshape(T.swap_axes(av, 0, 1), (p, d * ex.heads))
    s = T.add(r_list[task], T.linear(cat, blk.attn.fuse_w, blk.attn.fuse_b))
    return s, attn


def cross_task_mhsa(model: CilModel, layer: int, r_list: list[Tensor]):
    """Spatial attention stage for the ia/dne wirings.

    Every expert runs its own frozen-or-trainable heads over its own
    feature slice; with ``cta_in_mhsa`` the projections of each expert are
    additionally mixed across all visible tasks.  Returns per-task outputs
    and per-task (H_i, P, P) attention weights.
    """
    d = model.cfg.head_dim
    s_list, attns = [], []
    for t, ex in enumerate(model.experts):
        blk = ex.blocks[layer]
        if isinstance(blk.attn, CtaAttentionParams):
            s, a = _cta_mhsa_task(model, layer, t, r_list)
        elif isinstance(blk.attn, StaAttentionParams):
            q, k, v = B.tied_head_projections(r_list[t], model.tied_attn[layer], d)
            s, a = B.attention_readout(r_list[t], q, k, v,
                                       blk.attn.fuse_w, blk.attn.fuse_b, d)
        else:
            s, a = B.mhsa_block(r_list[t], blk.attn, d)
        s_list.append(s)
        attns.append(a)
    return s_list, attns


_MASK_CACHE: dict[tuple, np.ndarray] = {}


def sta_group_mask(n_query_heads: int, query_offset: int, pool_heads: int,
                   patches: int, variant: str) -> np.ndarray:
    """Enabled (query, key) pairs for joint spatial-task attention.

    Tokens are flattened head-major: token = head * P + patch.  Same-head
    and same-patch predicates pick the four groups; the variant selects
    which cross-head groups join the always-on same-head pairs.
    """
    if variant not in STA_VARIANTS:
        raise ConfigError(f"unknown sta variant {variant!r}")
    key = (n_query_heads, query_offset, pool_heads, patches, variant)
    cached = _MASK_CACHE.get(key)
    if cached is not None:
        return cached
    q_heads = (np.arange(n_query_heads * patches) // patches) + query_offset
    q_patch = np.arange(n_query_heads * patches) % patches
    k_heads = np.arange(pool_heads * patches) // patches
    k_patch = np.arange(pool_heads * patches) % patches
    same_head = q_heads[:, None] == k_heads[None, :]
    same_patch = q_patch[:, None] == k_patch[None, :]
    mask = same_head.copy()                                  # SPSH + DPSH
    if variant in ("spdh", "both"):
        mask |= same_patch & ~same_head                      # SPDH
    if variant in ("dpdh", "both"):
        mask |= ~same_patch & ~same_head                     # DPDH
    _MASK_CACHE[key] = mask
    return mask


def sta_attention_stage(model: CilModel, layer: int, r_list: list[Tensor],
                        variant: str):
    """Joint masked attention over the (patch, head) tokens of visible tasks.

    All heads share one tied q/k/v projection per block, so keys are
    comparable across heads; each task's heads query the pool of tasks up
    to and including itself, keeping earlier experts' outputs intact after
    later tasks are added.
    """
    if model.tied_attn is None:
        raise T.ContractError("joint wiring needs tied projections (strategy 'sta')")
    cfg = model.cfg
    d = cfg.head_dim
    p = r_list[0].shape[0]
    qs, ks, vs = [], [], []
    for t, ex in enumerate(model.experts):
        q, k, v = B.tied_head_projections(r_list[t], model.tied_attn[layer], d)
        qs.append(q)
        ks.append(k)
        vs.append(v)

    s_list, attns = [], []
    offset = 0
    for t, ex in enumerate(model.experts):
        pool = ks[: t + 1]
        m_heads = offset + ex.heads
        k_flat = T.reshape(pool[0] if len(pool) == 1 else T.concat(pool, axis=0),
                           (m_heads * p, d))
        v_flat = T.reshape(vs[0] if t == 0 else T.concat(vs[: t + 1], axis=0),
                           (m_heads * p, d))
        q_flat = T.reshape(qs[t], (ex.heads * p, d))
        logits = T.matmul(q_flat, T.swap_axes(k_flat, 0, 1))
        mask = sta_group_mask(ex.heads, offset, m_heads, p, variant)
        attn = T.masked_softmax_rows(logits, mask, math.sqrt(d))
        av = T.reshape(T.matmul(attn, v_flat), (ex.heads, p, d))
        cat = T.reshape(T.swap_axes(av, 0, 1), (p, d * ex.heads))
        blk = ex.blocks[layer]
        s = T.add(r_list[t], T.linear(cat, blk.attn.fuse_w, blk.attn.fuse_b))
        s_list.append(s)
        attns.append(attn)
        offset += ex.heads
    return s_list, attns


# ----------------------------------------------------------------- token head

def task_token_head(model: CilModel, features: list[Tensor], *, collect_attn=False):
    """Read out one feature vector per task token and classify.

    Each task token attends over its own expert's final patch tokens
    through a per-task frozen-after-training block; the per-task classifier
    slices are concatenated and the auxiliary head sees all token features.
    """
    if len(features) != model.task_count:
        raise T.ContractError(
            f"token head got {len(features)} feature maps for {model.task_count} tasks")
    d = model.cfg.head_dim
    feats, logit_parts = [], []
    for t, ex in enumerate(model.experts):
        tp = ex.token_block
        tok = T.layer_norm(T.reshape(ex.token, (1, ex.heads, d)), tp.ln_gain, tp.ln_bias)
        pat = T.layer_norm(T.reshape(features[t], (-1, ex.heads, d)), tp.ln_gain, tp.ln_bias)
        qh = T.add(T.bmm(T.swap_axes(tok, 0, 1), tp.wq), tp.bq)      # (H, 1, D)
        kh = T.add(T.bmm(T.swap_axes(pat, 0, 1), tp.wk), tp.bk)      # (H, P, D)
        vh = T.add(T.bmm(T.swap_axes(pat, 0, 1), tp.wv), tp.bv)
        attn = T.softmax_rows(T.bmm(qh, T.swap_axes(kh, 1, 2)), math.sqrt(d))
        av = T.reshape(T.swap_axes(T.bmm(attn, vh), 0, 1), (1, d * ex.heads))
        e2 = T.add(ex.token, T.linear(av, tp.fuse_w, tp.fuse_b))
        feats.append(e2)
        logit_parts.append(T.linear(e2, ex.head_w, ex.head_b))
    logits = T.reshape(logit_parts[0] if len(logit_parts) == 1
                       else T.concat(logit_parts, axis=1), (model.total_classes,))
    aux_in = feats[0] if len(feats) == 1 else T.concat(feats, axis=1)
    aux = T.reshape(T.linear(aux_in, model.aux_w, model.aux_b),
                    (model.experts[-1].n_classes + 1,))
    return feats, logits, aux


# ----------------------------------------------------------------- drivers

def _forward(model: CilModel, image, *, collect_attn=False,
             strategy: str | None = None, sta_variant: str | None = None) -> ForwardResult:
    cfg = model.cfg
    strategy = strategy or cfg.strategy
    variant = sta_variant or cfg.sta_variant
    if model.task_count == 0:
        raise T.ContractError("forward on a model with no experts")
    if strategy != "dne":
        for ex in model.experts:
            for blk in ex.blocks:
                if blk.fc1.kind == "ta" or blk.fc2.kind == "ta":
                    raise T.ContractError(
                        f"{strategy} wiring needs plain MLP stages, model has task attention")

    img = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
    d = cfg.head_dim
    r_list = []
    for ex in model.experts:
        ecfg = B.PatchEmbedConfig(cfg.image_size, cfg.patch_size, cfg.in_channels,
                                  d, ex.heads)
        r_list.append(B.patch_embed(img, ex.embed, model.pos, ecfg))

    r_layers = [r_list]
    o_layers: list[list[Tensor]] = []
    sp_attn: list[list[np.ndarray]] = []
    tab_attn: list[list] = []

    for layer in range(cfg.layers):
        if strategy == "sta":
            s_list, attns = sta_attention_stage(model, layer, r_list, variant)
        else:
            s_list, attns = cross_task_mhsa(model, layer, r_list)
        o_list: list[Tensor] = []
        new_r: list[Tensor] = []
        tab_l: list = []
        for t, ex in enumerate(model.experts):
            if strategy == "dne":
                o_t, r_t, pair = tab_forward(s_list, o_list, model, layer, t)
            else:
                blk = ex.blocks[layer]
                o_t = T.gelu(T.linear(
                    B.per_head_layer_norm(s_list[t], blk.fc1.mlp.ln_gain,
                                          blk.fc1.mlp.ln_bias, d),
                    blk.fc1.mlp.w, blk.fc1.mlp.b))
                upd = T.linear(
                    B.per_head_layer_norm(o_t, blk.fc2.mlp.ln_gain,
                                          blk.fc2.mlp.ln_bias, cfg.gamma * d),
                    blk.fc2.mlp.w, blk.fc2.mlp.b)
                r_t = T.add(s_list[t], upd)
                pair = None
            o_list.append(o_t)
            new_r.append(r_t)
            tab_l.append(pair)
        r_list = new_r
        r_layers.append(r_list)
        o_layers.append(o_list)
        if collect_attn:
            sp_attn.append([a.data for a in attns])
            tab_attn.append(tab_l)

    token_feats, logits, aux = task_token_head(model, r_list)
    return ForwardResult(
        r_layers=r_layers, o_layers=o_layers, token_feats=token_feats,
        logits=logits, aux_logits=aux,
        spatial_attn=sp_attn if collect_attn else None,
        tab_attn=tab_attn if collect_attn else None)


def ia_forward(model: CilModel, image, *, collect_attn=False) -> ForwardResult:
    """Independent-attention wiring: every expert runs alone."""
    return _forward(model, image, collect_attn=collect_attn, strategy="ia")


def sta_forward(model: CilModel, image, variant: str, *, collect_attn=False) -> ForwardResult:
    """Joint spatial-task attention with the given group variant."""
    if variant not in STA_VARIANTS:
        raise ConfigError(f"unknown sta variant {variant!r}")
    return _forward(model, image, collect_attn=collect_attn,
                    strategy="sta", sta_variant=variant)


def add_expert(model: CilModel, new_heads: int, new_classes: int) -> CilModel:
    return model.add_expert(new_heads, new_classes)


# ----------------------------------------------------------------- checkpoints

def checkpoint_bytes(model: CilModel) -> bytes:
    """Self-describing binary container: version byte, JSON layout record,
    then named float64 little-endian parameter blobs in declaration order."""
    header = {
        "config": _config_record(model.cfg),
        "heads_per_task": [e.heads for e in model.experts],
        "classes_per_task": [e.n_classes for e in model.experts],
        "params": [{"name": n, "shape": list(t.shape)}
                   for n, t in model.named_parameters()],
    }
    hj = json.dumps(header, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(struct.pack("<B", CKPT_VERSION))
    out.write(struct.pack("<I", len(hj)))
    out.write(hj)
    for _, t in model.named_parameters():
        out.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return out.getvalue()


def save_checkpoint(model: CilModel, path) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model))


def model_from_bytes(raw: bytes) -> CilModel:
    buf = io.BytesIO(raw)
    version = buf.read(1)
    if len(version) != 1 or version[0] != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version!r}")
    (hlen,) = struct.unpack("<I", buf.read(4))
    try:
        header = json.loads(buf.read(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    cfg = _config_from_record(header["config"])
    model = CilModel(cfg, seed=0)
    for heads, n_cls in zip(header["heads_per_task"], header["classes_per_task"]):
        model.add_expert(heads, n_cls)
    registry = dict(model.named_parameters())
    for rec in header["params"]:
        name, shape = rec["name"], tuple(rec["shape"])
        if name not in registry:
            raise CheckpointError(f"checkpoint names unknown parameter {name!r}")
        tensor = registry[name]
        if tensor.shape != shape:
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {shape} vs model {tensor.shape}")
        n = int(np.prod(shape)) if shape else 1
        blob = buf.read(8 * n)
        if len(blob) != 8 * n:
            raise CheckpointError(f"checkpoint truncated at parameter {name!r}")
        tensor.data = np.frombuffer(blob, dtype="<f8").reshape(shape).copy()
    if buf.read(1):
        raise CheckpointError("trailing bytes after final parameter blob")
    return model


def load_checkpoint(path) -> CilModel:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())


def _config_record(cfg: ModelConfig) -> dict:
    rec = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    if rec["cta_layers"] is not None:
        rec["cta_layers"] = list(rec["cta_layers"])
    return rec


def _config_from_record(rec: dict) -> ModelConfig:
    rec = dict(rec)
    if rec.get("cta_layers") is not None:
        rec["cta_layers"] = tuple(bool(v) for v in rec["cta_layers"])
    return ModelConfig(**rec)


def clone_model(model: CilModel) -> CilModel:
    """Deep copy through the checkpoint codec (bit-exact by construction)."""
    return model_from_bytes(checkpoint_bytes(model))
