"""Two-branch models wired around fusion taps.

Six wirings share one executor:

* ``fuse_h``      -- per-stage horizontal taps pooled to the last stage's
                     spatial size, concatenated on channels, then post stages
                     and the MLP head.
* ``fuse_v``      -- per-branch vertical links chained residual-style over
                     consecutive stages; branch outputs concatenated.
* ``fuse_hv``     -- horizontal taps pairwise-reduced by vertical links until
                     a single tensor remains; no concatenation anywhere.
* ``retrofit_single`` / ``retrofit_double`` -- a staged backbone applied to
                     both images (shared or independent weights) with one
                     fusion before the head.
* ``concat_baseline`` -- shared backbone, channel concatenation instead of
                     fusion.

Horizontal taps add zero learnable parameters. Vertical links adapt the
earlier tensor to the later tensor's shape with spatial average pooling plus
a learned pointwise channel projection (the only fusion-related parameters).

The forward pass records a flat op graph that the generic ``backward`` walks
in reverse, accumulating parameter gradients by name.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import fusion, layers
from .errors import InvalidConfig, SchemaVersionMismatch, ShapeMismatch

CHECKPOINT_SCHEMA_VERSION = 1

PLAN_MODES = (
    "fuse_h",
    "fuse_v",
    "fuse_hv",
    "retrofit_single",
    "retrofit_double",
    "concat_baseline",
)

# modes with two independently trained branches
_DOUBLE_BRANCH_MODES = ("fuse_h", "fuse_v", "fuse_hv", "retrofit_double")


@dataclass(frozen=True)
class FusePlan:
    mode: str
    h_fid: int | None = None
    v_fid: int | None = None

    def validate(self) -> None:
        if self.mode not in PLAN_MODES:
            raise InvalidConfig(f"unknown plan mode {self.mode!r}")
        if self.mode in ("fuse_h", "fuse_hv", "retrofit_single", "retrofit_double"):
            if self.h_fid is None:
                raise InvalidConfig(f"mode {self.mode} requires h_fid")
        if self.mode in ("fuse_v", "fuse_hv"):
            if self.v_fid is None:
                raise InvalidConfig(f"mode {self.mode} requires v_fid")
        if self.mode == "concat_baseline" and self.h_fid is not None:
            raise InvalidConfig("concat_baseline takes no fuse function")
        for fid in (self.h_fid, self.v_fid):
            if fid is not None and fid not in fusion.ALL_FIDS:
                raise InvalidConfig(f"fuse function id {fid} outside 1..13")


@dataclass(frozen=True)
class ModelConfig:
    """Staged two-branch backbone description plus the fuse plan."""

    in_channels: int = 3
    input_size: int = 32
    stage_widths: tuple[int, ...] = (16, 32, 64, 64)
    kernel: int = 3
    pool: str = "max2"
    post_widths: tuple[int, ...] = (64, 64)
    mlp_widths: tuple[int, ...] = (256, 128, 64, 4)
    num_classes: int = 4
    plan: FusePlan | None = None

    # -- derived specs ------------------------------------------------------

    def stage_specs(self) -> tuple[layers.StageSpec, ...]:
        specs = []
        prev = self.in_channels
        for width in self.stage_widths:
            specs.append(layers.StageSpec(prev, width, self.kernel, 1, self.pool))
            prev = width
        return tuple(specs)

    def post_specs(self, in_channels: int) -> tuple[layers.StageSpec, ...]:
        specs = []
        prev = in_channels
        for width in self.post_widths:
            specs.append(layers.StageSpec(prev, width, self.kernel, 1, "none"))
            prev = width
        return tuple(specs)

    def mlp_spec(self) -> layers.MLPSpec:
        return layers.MLPSpec(tuple(self.mlp_widths), self.num_classes)

    def stage_spatials(self) -> tuple[int, ...]:
        """Square spatial size after each branch stage."""
        sizes = []
        s = self.input_size
        for spec in self.stage_specs():
            s, _ = spec.out_spatial(s, s)
            sizes.append(s)
        return tuple(sizes)

    def validate(self) -> None:
        if self.plan is None:
            raise InvalidConfig("config has no fuse plan; use a builder")
        self.plan.validate()
        if not self.stage_widths:
            raise InvalidConfig("at least one stage is required")
        for spec in self.stage_specs():
            spec.validate()
        self.stage_spatials()  # raises InvalidConfig on vanishing spatial size
        self.mlp_spec().validate()
        if self.mlp_widths[-1] != self.num_classes:
            raise InvalidConfig("final MLP width must equal num_classes")
        if self.plan.mode == "fuse_hv" and len(self.stage_widths) < 2:
            raise InvalidConfig("fuse_hv needs at least two stages")

    def config_hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(repr=False)


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------

def _hv_pair_plan(n_taps: int) -> list[tuple[int, int]]:
    """Stage-index pairs of the pairwise vertical reduction tree.

    A fused pair takes the shape of its second element, so carrying the
    second index forward tracks the surviving tensor's shape.
    """
    pairs = []
    level = list(range(n_taps))
    while len(level) > 1:
        new_level = []
        for k in range(0, len(level) - 1, 2):
            pairs.append((level[k], level[k + 1]))
            new_level.append(level[k + 1])
        if len(level) % 2:
            new_level.append(level[-1])
        level = new_level
    return pairs


def _fused_channels(cfg: ModelConfig) -> int:
    """Channel count of the tensor entering the post stages / head."""
    mode = cfg.plan.mode
    widths = cfg.stage_widths
    if mode == "fuse_h":
        return sum(widths)
    if mode == "fuse_v":
        return 2 * widths[-1]
    if mode == "fuse_hv":
        return widths[-1]
    if mode in ("retrofit_single", "retrofit_double"):
        return widths[-1]
    if mode == "concat_baseline":
        return 2 * widths[-1]
    raise AssertionError(mode)


def head_in_width(cfg: ModelConfig) -> int:
    sp = cfg.stage_spatials()[-1]
    if cfg.plan.mode in ("fuse_h", "fuse_v", "fuse_hv") and cfg.post_widths:
        return cfg.post_widths[-1] * sp * sp
    return _fused_channels(cfg) * sp * sp


def _adapter_specs(cfg: ModelConfig) -> list[tuple[str, int, int]]:
    """(name, out_channels, in_channels) of every pointwise projection."""
    mode = cfg.plan.mode
    widths = cfg.stage_widths
    specs: list[tuple[str, int, int]] = []
    if mode == "fuse_v":
        for prefix in ("a", "b"):
            for i in range(len(widths) - 1):
                specs.append((f"adapt_{prefix}{i}", widths[i + 1], widths[i]))
    elif mode == "fuse_hv":
        for n, (i, j) in enumerate(_hv_pair_plan(len(widths))):
            specs.append((f"adapt{n}", widths[j], widths[i]))
    return specs


def init_parameters(cfg: ModelConfig, seed: int) -> Model:
    """Deterministically initialize all learnables for the configured graph."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}

    def add_stage(prefix: str, spec: layers.StageSpec) -> None:
        st = layers.init_stage(rng, spec)
        params[f"{prefix}.w"] = st["w"]
        params[f"{prefix}.b"] = st["b"]

    for i, spec in enumerate(cfg.stage_specs()):
        add_stage(f"a{i}", spec)
    if cfg.plan.mode in _DOUBLE_BRANCH_MODES:
        for i, spec in enumerate(cfg.stage_specs()):
            add_stage(f"b{i}", spec)
    for name, c_out, c_in in _adapter_specs(cfg):
        params[f"{name}.w"] = layers.he_uniform(rng, (c_out, c_in), fan_in=c_in)
        params[f"{name}.b"] = np.zeros(c_out)
    if cfg.plan.mode in ("fuse_h", "fuse_v", "fuse_hv"):
        for j, spec in enumerate(cfg.post_specs(_fused_channels(cfg))):
            add_stage(f"post{j}", spec)
    for key, arr in layers.init_mlp(rng, cfg.mlp_spec(), head_in_width(cfg)).items():
        params[f"head.{key}"] = arr
    return Model(config=cfg, params=params)


def parameter_count(model: Model) -> int:
    return int(sum(p.size for p in model.params.values()))


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_fuse_h_model(cfg: ModelConfig, h_fid: int, seed: int = 0) -> Model:
    plan = FusePlan(mode="fuse_h", h_fid=h_fid)
    return init_parameters(dataclasses.replace(cfg, plan=plan), seed)


def build_fuse_v_model(cfg: ModelConfig, v_fid: int, seed: int = 0) -> Model:
    plan = FusePlan(mode="fuse_v", v_fid=v_fid)
    return init_parameters(dataclasses.replace(cfg, plan=plan), seed)


def build_fuse_hv_model(cfg: ModelConfig, h_fid: int, v_fid: int, seed: int = 0) -> Model:
    plan = FusePlan(mode="fuse_hv", h_fid=h_fid, v_fid=v_fid)
    return init_parameters(dataclasses.replace(cfg, plan=plan), seed)


def retrofit_backbone(cfg: ModelConfig, mode: str, h_fid: int | None = None,
                      seed: int = 0) -> Model:
    """Insert one Fuse Module (or a concat) into a staged backbone.

    ``single`` shares one extractor between both images; ``double`` trains an
    independent copy per image; ``concat_baseline`` replaces the fusion with
    channel concatenation (shared extractor).
    """
    if mode not in ("single", "double", "concat_baseline"):
        raise InvalidConfig(f"retrofit mode must be single|double|concat_baseline, got {mode!r}")
    if mode == "concat_baseline":
        plan = FusePlan(mode="concat_baseline")
    else:
        plan = FusePlan(mode=f"retrofit_{mode}", h_fid=h_fid)
    return init_parameters(dataclasses.replace(cfg, plan=plan), seed)


# ---------------------------------------------------------------------------
# shape adapter (vertical links)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShapeAdapter:
    """Maps a tensor to target_shape: average-pool to (H, W), project channels."""

    target_shape: tuple[int, int, int]  # (C, H, W)
    w: np.ndarray                       # (C_out, C_in)
    b: np.ndarray                       # (C_out,)


def identity_adapter(shape: tuple[int, int, int]) -> ShapeAdapter:
    c = shape[0]
    return ShapeAdapter(target_shape=tuple(shape), w=np.eye(c), b=np.zeros(c))


def _adapter_forward_cached(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                            target_hw: tuple[int, int]):
    pooled, pool_cache = layers.adaptive_avg_pool_cached(x, target_hw)
    n, c, th, tw = pooled.shape
    flat = pooled.reshape(n, c, th * tw)
    out = np.matmul(w[None], flat).reshape(n, w.shape[0], th, tw)
    out = out + b[None, :, None, None]
    return out, (flat, w, pooled.shape, pool_cache)


def _adapter_backward(dout: np.ndarray, cache):
    flat, w, pooled_shape, pool_cache = cache
    n, c, th, tw = pooled_shape
    dmat = dout.reshape(n, w.shape[0], th * tw)
    dw = np.matmul(dmat, flat.transpose(0, 2, 1)).sum(axis=0)
    db = dout.sum(axis=(0, 2, 3))
    dpooled = np.matmul(w.T[None], dmat).reshape(pooled_shape)
    dx = layers.adaptive_avg_pool_backward(dpooled, pool_cache)
    return dx, dw, db


def apply_adapter(adapter: ShapeAdapter, x: np.ndarray) -> np.ndarray:
    if x.shape[1] != adapter.w.shape[1]:
        raise ShapeMismatch(
            f"adapter expects {adapter.w.shape[1]} channels, got {x.shape[1]}"
        )
    out, _ = _adapter_forward_cached(x, adapter.w, adapter.b, adapter.target_shape[1:])
    return out


# ---------------------------------------------------------------------------
# public fusion application ops
# ---------------------------------------------------------------------------

def fuse_h_apply(h_fid: int, ft_a: np.ndarray, ft_b: np.ndarray) -> np.ndarray:
    """Horizontal fusion of two same-depth tensors; parameter-free."""
    return fusion.fuse_forward(h_fid, ft_a, ft_b)


def fuse_v_apply(v_fid: int, earlier: np.ndarray, later: np.ndarray,
                 adapter: ShapeAdapter) -> np.ndarray:
    """Vertical fusion: adapt the earlier tensor to the later one's shape, fuse."""
    if tuple(adapter.target_shape) != tuple(later.shape[1:]):
        raise ShapeMismatch(
            f"adapter target {adapter.target_shape} != later tensor {later.shape[1:]}"
        )
    return fusion.fuse_forward(v_fid, apply_adapter(adapter, earlier), later)


# ---------------------------------------------------------------------------
# graph executor
# ---------------------------------------------------------------------------

class Graph:
    """Flat record of one forward pass; replayed in reverse for gradients."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params
        self.ops: list[tuple[str, tuple[int, ...], object]] = []
        self.vals: list[np.ndarray] = []

    def _push(self, op: str, in_ids: tuple[int, ...], ctx, val: np.ndarray) -> int:
        self.ops.append((op, in_ids, ctx))
        self.vals.append(val)
        return len(self.vals) - 1

    @property
    def op_names(self) -> list[str]:
        return [op for op, _, _ in self.ops]

    def leaf(self, x: np.ndarray) -> int:
        return self._push("leaf", (), None, x)

    def stage(self, prefix: str, spec: layers.StageSpec, xid: int) -> int:
        p = {"w": self.params[f"{prefix}.w"], "b": self.params[f"{prefix}.b"]}
        out, cache = layers.stage_forward_cached(p, spec, self.vals[xid])
        return self._push("stage", (xid,), (prefix, cache), out)

    def fuse(self, fid: int, aid: int, bid: int) -> int:
        out = fusion.fuse_forward(fid, self.vals[aid], self.vals[bid])
        return self._push("fuse", (aid, bid), fid, out)

    def adapter(self, prefix: str, target_hw: tuple[int, int], xid: int) -> int:
        w, b = self.params[f"{prefix}.w"], self.params[f"{prefix}.b"]
        out, cache = _adapter_forward_cached(self.vals[xid], w, b, target_hw)
        return self._push("adapter", (xid,), (prefix, cache), out)

    def pool_to(self, target_hw: tuple[int, int], xid: int) -> int:
        out, cache = layers.adaptive_avg_pool_cached(self.vals[xid], target_hw)
        return self._push("pool_to", (xid,), cache, out)

    def concat(self, ids: list[int]) -> int:
        arrs = [self.vals[i] for i in ids]
        out = np.concatenate(arrs, axis=1)
        widths = [a.shape[1] for a in arrs]
        return self._push("concat", tuple(ids), widths, out)

    def flatten(self, xid: int) -> int:
        x = self.vals[xid]
        return self._push("flatten", (xid,), x.shape, x.reshape(x.shape[0], -1))

    def mlp(self, prefix: str, spec: layers.MLPSpec, xid: int) -> int:
        p = {k.split(".", 1)[1]: v for k, v in self.params.items()
             if k.startswith(prefix + ".")}
        out, caches = layers.mlp_forward_cached(p, spec, self.vals[xid])
        return self._push("mlp", (xid,), (prefix, caches), out)

    def backward(self, out_id: int, dout: np.ndarray) -> dict[str, np.ndarray]:
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dvals: dict[int, np.ndarray] = {out_id: dout}
        for nid in range(len(self.ops) - 1, -1, -1):
            d = dvals.pop(nid, None)
            if d is None:
                continue
            op, in_ids, ctx = self.ops[nid]
            if op == "leaf":
                continue
            if op == "stage":
                prefix, cache = ctx
                feeds_leaf = self.ops[in_ids[0]][0] == "leaf"
                dx, dw, db = layers.stage_backward(d, cache, need_dx=not feeds_leaf)
                grads[f"{prefix}.w"] += dw
                grads[f"{prefix}.b"] += db
                dins = () if feeds_leaf else (dx,)
            elif op == "fuse":
                pair = fusion.fuse_backward(ctx, self.vals[in_ids[0]],
                                            self.vals[in_ids[1]], d)
                dins = (pair.grad_a, pair.grad_b)
            elif op == "adapter":
                prefix, cache = ctx
                dx, dw, db = _adapter_backward(d, cache)
                grads[f"{prefix}.w"] += dw
                grads[f"{prefix}.b"] += db
                dins = (dx,)
            elif op == "pool_to":
                dins = (layers.adaptive_avg_pool_backward(d, ctx),)
            elif op == "concat":
                splits = np.cumsum(ctx)[:-1]
                dins = tuple(np.split(d, splits, axis=1))
            elif op == "flatten":
                dins = (d.reshape(ctx),)
            elif op == "mlp":
                prefix, caches = ctx
                dx, mgrads = layers.mlp_backward(d, caches)
                for k, v in mgrads.items():
                    grads[f"{prefix}.{k}"] += v
                dins = (dx,)
            else:
                raise AssertionError(op)
            for in_id, din in zip(in_ids, dins):
                if in_id in dvals:
                    dvals[in_id] = dvals[in_id] + din
                else:
                    dvals[in_id] = din
        return grads


def _check_inputs(cfg: ModelConfig, xa: np.ndarray, xb: np.ndarray) -> None:
    expect = (cfg.in_channels, cfg.input_size, cfg.input_size)
    for name, x in (("pre", xa), ("post", xb)):
        if x.ndim != 4 or x.shape[1:] != expect:
            raise ShapeMismatch(f"{name} batch {x.shape} != (N, {expect})")
    if xa.shape[0] != xb.shape[0]:
        raise ShapeMismatch("pre and post batches differ in length")


def forward_with_graph(model: Model, xa: np.ndarray, xb: np.ndarray):
    """Run the configured wiring; returns (logits, graph, logits_node_id)."""
    cfg = model.config
    cfg.validate()
    _check_inputs(cfg, xa, xb)
    plan = cfg.plan
    g = Graph(model.params)
    ia, ib = g.leaf(xa), g.leaf(xb)
    specs = cfg.stage_specs()
    spatials = cfg.stage_spatials()

    def run_branch(prefix: str, xid: int) -> list[int]:
        outs = []
        cur = xid
        for i, spec in enumerate(specs):
            cur = g.stage(f"{prefix}{i}", spec, cur)
            outs.append(cur)
        return outs

    mode = plan.mode
    if mode == "fuse_h":
        aouts = run_branch("a", ia)
        bouts = run_branch("b", ib)
        target = (spatials[-1], spatials[-1])
        taps = [g.fuse(plan.h_fid, av, bv) for av, bv in zip(aouts, bouts)]
        x = g.concat([g.pool_to(target, t) for t in taps])
    elif mode == "fuse_v":
        branch_tops = []
        for prefix, leaf_id in (("a", ia), ("b", ib)):
            cur = g.stage(f"{prefix}0", specs[0], leaf_id)
            for i in range(1, len(specs)):
                f = g.stage(f"{prefix}{i}", specs[i], cur)
                ad = g.adapter(f"adapt_{prefix}{i - 1}", (spatials[i], spatials[i]), cur)
                cur = g.fuse(plan.v_fid, ad, f)
            branch_tops.append(cur)
        x = g.concat(branch_tops)
    elif mode == "fuse_hv":
        aouts = run_branch("a", ia)
        bouts = run_branch("b", ib)
        taps = [g.fuse(plan.h_fid, av, bv) for av, bv in zip(aouts, bouts)]
        n_adapt = 0
        level = taps
        while len(level) > 1:
            new_level = []
            for k in range(0, len(level) - 1, 2):
                later = level[k + 1]
                hw = g.vals[later].shape[2:]
                ad = g.adapter(f"adapt{n_adapt}", hw, level[k])
                n_adapt += 1
                new_level.append(g.fuse(plan.v_fid, ad, later))
            if len(level) % 2:
                new_level.append(level[-1])
            level = new_level
        x = level[0]
    elif mode in ("retrofit_single", "retrofit_double"):
        b_prefix = "a" if mode == "retrofit_single" else "b"
        ea = run_branch("a", ia)[-1]
        eb = run_branch(b_prefix, ib)[-1]
        x = g.fuse(plan.h_fid, ea, eb)
    elif mode == "concat_baseline":
        ea = run_branch("a", ia)[-1]
        eb = run_branch("a", ib)[-1]
        x = g.concat([ea, eb])
    else:
        raise AssertionError(mode)

    if mode in ("fuse_h", "fuse_v", "fuse_hv"):
        for j, spec in enumerate(cfg.post_specs(_fused_channels(cfg))):
            x = g.stage(f"post{j}", spec, x)
    x = g.flatten(x)
    logits_id = g.mlp("head", cfg.mlp_spec(), x)
    return g.vals[logits_id], g, logits_id


def forward(model: Model, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Logits of shape (N, num_classes)."""
    return forward_with_graph(model, xa, xb)[0]


def forward_backward(model: Model, xa: np.ndarray, xb: np.ndarray,
                     dlogits: np.ndarray):
    """Returns (logits, parameter gradients) for a given upstream dlogits."""
    logits, g, out_id = forward_with_graph(model, xa, xb)
    return logits, g.backward(out_id, dlogits)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _config_to_jsonable(cfg: ModelConfig) -> dict:
    return dataclasses.asdict(cfg)


def _config_from_jsonable(d: dict) -> ModelConfig:
    d = dict(d)
    plan = d.pop("plan", None)
    cfg = ModelConfig(
        in_channels=d["in_channels"],
        input_size=d["input_size"],
        stage_widths=tuple(d["stage_widths"]),
        kernel=d["kernel"],
        pool=d["pool"],
        post_widths=tuple(d["post_widths"]),
        mlp_widths=tuple(d["mlp_widths"]),
        num_classes=d["num_classes"],
        plan=FusePlan(**plan) if plan is not None else None,
    )
    return cfg


def save_checkpoint(model: Model, path) -> None:
    """Versioned npz container: named parameter arrays plus a JSON meta entry."""
    meta = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config": _config_to_jsonable(model.config),
        "config_hash": model.config.config_hash(),
    }
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)),
                 **model.params)


def load_checkpoint(path) -> Model:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta["schema_version"] > CHECKPOINT_SCHEMA_VERSION:
            raise SchemaVersionMismatch(
                f"checkpoint schema {meta['schema_version']} > supported "
                f"{CHECKPOINT_SCHEMA_VERSION}"
            )
        cfg = _config_from_jsonable(meta["config"])
        if cfg.config_hash() != meta["config_hash"]:
            raise SchemaVersionMismatch("checkpoint config hash mismatch")
        params = {k: data[k] for k in data.files if k != "__meta__"}
    return Model(config=cfg, params=params)
