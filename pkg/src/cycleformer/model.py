"""Parameter-cycling transformer family over a shared block implementation.

Four variants of the same pre-norm GPT-style stack:

  V    vanilla: each of the L layers runs once.
  BC   whole-stack cycling: the full stack of L distinct layers repeats N times.
  HTC  head-tail decoupled cycling: layer 1 and layer L run once; the middle
       block {2..L-1} repeats N times in between.
  ZTT  HTC plus, per cycled application, a trainable key-only "zero token"
       prepended to attention (its value row is all zeros, it is never masked,
       and it emits no query) and a per-layer logistic gate on the FFN branch.

Effective depth is always L - C + C*N for C cycled layers, so variants can be
compared at a matched application budget. Middle layers keep distinct weights
per position by default; `share_middle` aliases them to one record, which is
the shape the vanilla-to-cycled retrofit produces.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .telemetry import CycleTelemetry

VARIANTS = ("V", "BC", "HTC", "ZTT")

MASK_NEG = -1e9


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    all_layers: int
    loop_count: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab: int = 259
    t_max: int = 64
    use_gate: bool | None = None
    use_zero_token: bool | None = None
    early_exit_heads: bool = False
    tie_embeddings: bool = True
    share_middle: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.all_layers < 1:
            raise ConfigError(f"all_layers must be >= 1, got {self.all_layers}")
        if self.loop_count < 1:
            raise ConfigError(f"loop_count must be >= 1, got {self.loop_count}")
        if self.variant == "V" and self.loop_count != 1:
            raise ConfigError("variant V has no cycled layers; loop_count must be 1")
        if self.variant in ("HTC", "ZTT") and self.all_layers < 3:
            raise ConfigError(
                f"variant {self.variant} needs all_layers >= 3 (head + middle + tail), got {self.all_layers}"
            )
        if self.d_model < 1 or self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} must be a positive multiple of n_heads {self.n_heads}"
            )
        if self.d_ff < 1 or self.vocab < 1 or self.t_max < 1:
            raise ConfigError("d_ff, vocab and t_max must all be positive")
        # Auto toggles: on for ZTT, off elsewhere, unless set explicitly.
        if self.use_gate is None:
            object.__setattr__(self, "use_gate", self.variant == "ZTT")
        if self.use_zero_token is None:
            object.__setattr__(self, "use_zero_token", self.variant == "ZTT")
        if self.use_zero_token and not self.cycled_layers:
            raise ConfigError(f"variant {self.variant} has no cycled layers to attach zero tokens to")
        if self.share_middle and self.variant not in ("HTC", "ZTT"):
            raise ConfigError("share_middle only applies to head-tail cycled variants")

    @property
    def cycled_layers(self) -> tuple[int, ...]:
        if self.variant == "V":
            return ()
        if self.variant == "BC":
            return tuple(range(1, self.all_layers + 1))
        return tuple(range(2, self.all_layers))

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_exits(self) -> int:
        return 1 if self.variant == "V" else self.loop_count


@dataclass(frozen=True)
class CycleSchedule:
    """Flattened application order: (layer, cycle) pairs plus cycle boundaries.

    exit_points[n-1] is the application index that completes cycle n; the last
    entry for head-tail variants is followed by the tail, so the final network
    output doubles as the last exit.
    """

    applications: tuple[tuple[int, int], ...]
    exit_points: tuple[int, ...]
    cycled_layers: tuple[int, ...]

    def layers(self) -> list[int]:
        return [l for l, _ in self.applications]


def build_schedule(config: ModelConfig) -> CycleSchedule:
    l, n = config.all_layers, config.loop_count
    cycled = config.cycled_layers
    if config.variant == "V":
        apps = [(i, 1) for i in range(1, l + 1)]
        exits = [len(apps) - 1]
    elif config.variant == "BC":
        apps = [(i, c) for c in range(1, n + 1) for i in range(1, l + 1)]
        exits = [c * l - 1 for c in range(1, n + 1)]
    else:
        apps = [(1, 1)]
        exits = []
        for c in range(1, n + 1):
            apps.extend((i, c) for i in range(2, l))
            exits.append(len(apps) - 1)
        apps.append((l, 1))
    expected = l - len(cycled) + len(cycled) * n if cycled else l
    assert len(apps) == expected, (len(apps), expected)
    return CycleSchedule(tuple(apps), tuple(exits), cycled)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class LayerParameters:
    """One transformer block's weights. Attention projections carry no biases
    so a fully saturated zero slot leaves the residual stream exactly intact."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    gate_w: Tensor | None = None
    gate_b: Tensor | None = None

    def tensors(self) -> dict[str, Tensor]:
        out = {
            "attn.wq": self.wq, "attn.wk": self.wk, "attn.wv": self.wv, "attn.wo": self.wo,
            "ln1.g": self.ln1_g, "ln1.b": self.ln1_b,
            "ffn.w1": self.w1, "ffn.b1": self.b1, "ffn.w2": self.w2, "ffn.b2": self.b2,
            "ln2.g": self.ln2_g, "ln2.b": self.ln2_b,
        }
        if self.gate_w is not None:
            out["gate.w"] = self.gate_w
            out["gate.b"] = self.gate_b
        return out


class ModelParameters:
    """Registry of every trainable tensor, with layer positions resolved to
    (possibly shared) records and zero-token keys indexed by (layer, cycle)."""

    def __init__(
        self,
        config: ModelConfig,
        tok_emb: Tensor,
        pos_emb: Tensor,
        lm_head: Tensor | None,
        final_g: Tensor,
        final_b: Tensor,
        records: dict[str, LayerParameters],
        pool: dict[tuple[int, int], Tensor],
    ):
        self.config = config
        self.tok_emb = tok_emb
        self.pos_emb = pos_emb
        self.lm_head = lm_head
        self.final_g = final_g
        self.final_b = final_b
        self.records = records
        self.pool = pool

    def record_key(self, layer: int) -> str:
        cfg = self.config
        if cfg.share_middle and 2 <= layer <= cfg.all_layers - 1:
            return "layer_mid"
        return f"layer{layer}"

    def record(self, layer: int) -> LayerParameters:
        return self.records[self.record_key(layer)]

    def head_weight(self) -> Tensor:
        return self.tok_emb if self.lm_head is None else self.lm_head

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        if self.lm_head is not None:
            out["lm_head"] = self.lm_head
        out["final_norm.g"] = self.final_g
        out["final_norm.b"] = self.final_b
        for key in sorted(self.records):
            for sub, t in self.records[key].tensors().items():
                out[f"{key}.{sub}"] = t
        for (layer, cycle) in sorted(self.pool):
            out[f"zero_key.l{layer}.c{cycle}"] = self.pool[(layer, cycle)]
        return out

    def zero_grad(self) -> None:
        for t in self.named().values():
            t.grad = None

    def dtype(self) -> np.dtype:
        return self.tok_emb.data.dtype


def _record_keys(config: ModelConfig) -> list[str]:
    if config.share_middle:
        return ["layer1", "layer_mid", f"layer{config.all_layers}"]
    return [f"layer{i}" for i in range(1, config.all_layers + 1)]


def init_parameters(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParameters:
    """Gaussian(0, 0.02) weights, unit norms, zero biases, in a fixed draw order."""
    rng = np.random.default_rng(seed)
    d, dff, v, tm = config.d_model, config.d_ff, config.vocab, config.t_max

    def w(*shape):
        return ad.parameter(rng.normal(0.0, 0.02, size=shape), dtype=dtype)

    def zeros(*shape):
        return ad.parameter(np.zeros(shape), dtype=dtype)

    def ones(*shape):
        return ad.parameter(np.ones(shape), dtype=dtype)

    tok_emb = w(v, d)
    pos_emb = w(tm, d)
    lm_head = None if config.tie_embeddings else w(v, d)
    records: dict[str, LayerParameters] = {}
    for key in _record_keys(config):
        rec = LayerParameters(
            wq=w(d, d), wk=w(d, d), wv=w(d, d), wo=w(d, d),
            ln1_g=ones(d), ln1_b=zeros(d),
            w1=w(d, dff), b1=zeros(dff), w2=w(dff, d), b2=zeros(d),
            ln2_g=ones(d), ln2_b=zeros(d),
        )
        if config.use_gate:
            rec.gate_w = w(d, 1)
            rec.gate_b = zeros(1)
        records[key] = rec
    pool: dict[tuple[int, int], Tensor] = {}
    if config.use_zero_token:
        for layer in config.cycled_layers:
            for cycle in range(1, config.loop_count + 1):
                pool[(layer, cycle)] = w(d)
    final_g = ones(d)
    final_b = zeros(d)
    return ModelParameters(config, tok_emb, pos_emb, lm_head, final_g, final_b, records, pool)


def param_count(config: ModelConfig) -> dict:
    """Closed-form parameter budget; must equal the actual array sizes."""
    d, dff, v, tm = config.d_model, config.d_ff, config.vocab, config.t_max
    n_records = 3 if config.share_middle else config.all_layers
    attn = 4 * d * d
    ffn = d * dff + dff + dff * d + d
    norms = 4 * d
    by_group = {
        "embeddings": v * d + tm * d + (0 if config.tie_embeddings else v * d),
        "blocks": n_records * (attn + ffn + norms),
        "gates": n_records * (d + 1) if config.use_gate else 0,
        "zero_token_pool": len(config.cycled_layers) * config.loop_count * d
        if config.use_zero_token
        else 0,
        "final_norm": 2 * d,
    }
    return {"total": sum(by_group.values()), "by_group": by_group}


# ---------------------------------------------------------------------------
# forward


def build_causal_mask(t: int, zero_slot: bool, dtype=np.float32) -> np.ndarray:
    """(T, T+1) additive mask when a zero slot is prepended, else (T, T).

    Slot 0 is exempt from causality: every query may attend to it. Key column
    j >= 1 maps to sequence position j-1 and is visible iff j-1 <= query.
    """
    base = np.triu(np.full((t, t), MASK_NEG, dtype=dtype), k=1)
    if not zero_slot:
        return base
    return np.concatenate([np.zeros((t, 1), dtype=dtype), base], axis=1)


def attention_with_zero_token(
    h: Tensor,
    rec: LayerParameters,
    zkey: Tensor | None,
    n_heads: int,
    causal_mask: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray | None, Tensor]:
    """Pre-norm causal multi-head attention with an optional zero token.

    The zero token contributes one extra key per head (a per-head split of
    `zkey`) whose value row is all zeros and which is visible to every query;
    it emits no query of its own. Returns (H_in + attention output, slot-0
    weight per (batch, head, query) or None, full attention weights).
    """
    b, t, d = h.shape
    if d % n_heads != 0:
        raise ShapeError(f"d_model {d} not divisible by n_heads {n_heads}")
    hd = d // n_heads
    x = ad.layer_norm(h, rec.ln1_g, rec.ln1_b)
    flat = ad.reshape(x, (b * t, d))

    def heads(m: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(m, (b, t, n_heads, hd)), (0, 2, 1, 3))

    q = heads(ad.matmul(flat, rec.wq))
    k = heads(ad.matmul(flat, rec.wk))
    v = heads(ad.matmul(flat, rec.wv))
    if zkey is not None:
        if zkey.shape != (d,):
            raise ShapeError(f"zero-token key shape {zkey.shape} != ({d},)")
        zk = ad.expand(ad.reshape(zkey, (1, n_heads, 1, hd)), (b, n_heads, 1, hd))
        k = ad.concat([zk, k], axis=2)
        zv = ad.constant(np.zeros((b, n_heads, 1, hd)), dtype=h.dtype)
        v = ad.concat([zv, v], axis=2)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    if causal_mask is None:
        causal_mask = build_causal_mask(t, zkey is not None, dtype=h.dtype)
    if causal_mask.shape != (t, t + (1 if zkey is not None else 0)):
        raise ShapeError(f"causal mask shape {causal_mask.shape} does not fit {scores.shape}")
    weights = ad.softmax(ad.add_const(scores, causal_mask), axis=-1)
    mix = ad.matmul(weights, v)
    mix = ad.reshape(ad.transpose(mix, (0, 2, 1, 3)), (b * t, d))
    out = ad.reshape(ad.matmul(mix, rec.wo), (b, t, d))
    h_att = ad.add(h, out)
    zero_attn = weights.data[..., 0].copy() if zkey is not None else None
    return h_att, zero_attn, weights


def gated_ffn(h: Tensor, rec: LayerParameters, use_gate: bool) -> tuple[Tensor, np.ndarray | None]:
    """Pre-norm FFN with an optional per-token logistic gate on its output.

    With use_gate the update is FFN(LN(h)) * sigmoid(LN(h) @ gw + gb); with it
    off the multiply is skipped entirely, so disabling the gate is exact.
    """
    b, t, d = h.shape
    x = ad.layer_norm(h, rec.ln2_g, rec.ln2_b)
    flat = ad.reshape(x, (b * t, d))
    a = ad.gelu(ad.add_bias(ad.matmul(flat, rec.w1), rec.b1))
    o = ad.add_bias(ad.matmul(a, rec.w2), rec.b2)
    gate_np = None
    if use_gate:
        if rec.gate_w is None:
            raise ShapeError("gating requested but this layer has no gate affine")
        g = ad.sigmoid(ad.add_bias(ad.matmul(flat, rec.gate_w), rec.gate_b))
        o = ad.scale_rows(o, g)
        gate_np = g.data.reshape(b, t).copy()
    h_f = ad.add(h, ad.reshape(o, (b, t, d)))
    return h_f, gate_np


@dataclass
class AppActivation:
    layer: int
    cycle: int
    h_in: np.ndarray
    weights: np.ndarray
    gate: np.ndarray | None


@dataclass
class ActivationState:
    steps: list[AppActivation] = field(default_factory=list)
    final_hidden: np.ndarray | None = None


@dataclass
class ForwardResult:
    """exit_logits[-1] is always the full-depth output; earlier entries exist
    only when capture_exits was set and the variant has intermediate cycles."""

    exit_logits: list[Tensor]
    telemetry: CycleTelemetry
    activations: ActivationState | None = None

    @property
    def logits(self) -> Tensor:
        return self.exit_logits[-1]


def _lm_logits(h: Tensor, params: ModelParameters) -> Tensor:
    b, t, d = h.shape
    hn = ad.layer_norm(h, params.final_g, params.final_b)
    w = ad.transpose(params.head_weight(), (1, 0))
    return ad.reshape(ad.matmul(ad.reshape(hn, (b * t, d)), w), (b, t, params.config.vocab))


def forward(
    ids: np.ndarray,
    params: ModelParameters,
    config: ModelConfig,
    capture_exits: bool = False,
    capture_activations: bool = False,
) -> ForwardResult:
    """Run the cycled stack on token ids of shape (T,) or (B, T).

    Intermediate exits reuse the shared tail (for head-tail variants) and the
    shared final norm + LM head on a branch copy of the stream; the main
    stream continues through every remaining cycle either way.
    """
    ids = np.asarray(ids)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ShapeError(f"expected (T,) or (B, T) token ids, got shape {ids.shape}")
    b, t = ids.shape
    if t < 1 or t > config.t_max:
        raise ShapeError(f"sequence length {t} outside [1, t_max={config.t_max}]")
    dtype = params.dtype()
    schedule = build_schedule(config)
    cycled = set(schedule.cycled_layers)
    mask_plain = build_causal_mask(t, False, dtype)
    mask_zero = build_causal_mask(t, True, dtype) if config.use_zero_token else None

    tok = ad.embedding(params.tok_emb, ids)
    pos = ad.narrow(params.pos_emb, 0, 0, t)
    h = ad.add(tok, ad.expand(ad.reshape(pos, (1, t, config.d_model)), tok.shape))

    telemetry = CycleTelemetry()
    acts = ActivationState() if capture_activations else None
    exits: list[Tensor] = []
    intermediate = set(schedule.exit_points[:-1]) if capture_exits else set()
    tail_rec = params.record(config.all_layers)

    for idx, (layer, cycle) in enumerate(schedule.applications):
        rec = params.record(layer)
        zkey = params.pool.get((layer, cycle)) if config.use_zero_token and layer in cycled else None
        h_in = h.data.copy() if capture_activations else None
        h, zattn, weights = attention_with_zero_token(
            h, rec, zkey, config.n_heads, mask_zero if zkey is not None else mask_plain
        )
        h, gate_np = gated_ffn(h, rec, config.use_gate)
        if layer in cycled:
            telemetry.add(
                layer,
                cycle,
                float(zattn.mean()) if zattn is not None else None,
                float(gate_np.mean()) if gate_np is not None else None,
            )
        if capture_activations:
            acts.steps.append(AppActivation(layer, cycle, h_in, weights.data.copy(), gate_np))
        if idx in intermediate:
            branch = h
            if config.variant in ("HTC", "ZTT"):
                branch, _, _ = attention_with_zero_token(
                    branch, tail_rec, None, config.n_heads, mask_plain
                )
                branch, _ = gated_ffn(branch, tail_rec, config.use_gate)
            exits.append(_lm_logits(branch, params))

    exits.append(_lm_logits(h, params))
    if capture_activations:
        acts.final_hidden = h.data.copy()
    if squeeze:
        exits = [ad.reshape(e, (t, config.vocab)) for e in exits]
    return ForwardResult(exits, telemetry, acts)


# ---------------------------------------------------------------------------
# vanilla-to-cycled retrofit


def init_from_vanilla(
    vanilla: ModelParameters, target_config: ModelConfig, seed: int = 0
) -> ModelParameters:
    """Warm-start a head-tail cycled model from a trained vanilla stack.

    Head and tail copy verbatim; the shared middle record is the elementwise
    mean of the vanilla middle layers; zero-token keys draw fresh; gates start
    near-unity (zero weights, +4 bias) so the warm start behaves like the
    source stack. Requires an aliased middle, i.e. share_middle or L == 3.
    """
    src_cfg = vanilla.config
    if src_cfg.variant != "V":
        raise ConfigError(f"retrofit source must be variant V, got {src_cfg.variant}")
    if target_config.variant not in ("HTC", "ZTT"):
        raise ConfigError(f"retrofit target must be HTC or ZTT, got {target_config.variant}")
    if not (target_config.share_middle or target_config.all_layers == 3):
        raise ConfigError("retrofit needs a single middle record: set share_middle (or L == 3)")
    for f in ("all_layers", "d_model", "n_heads", "d_ff", "vocab", "t_max", "tie_embeddings"):
        if getattr(src_cfg, f) != getattr(target_config, f):
            raise ConfigError(
                f"retrofit mismatch on {f}: {getattr(src_cfg, f)} vs {getattr(target_config, f)}"
            )
    out = init_parameters(target_config, seed=seed, dtype=vanilla.dtype())
    for name in ("tok_emb", "pos_emb", "final_g", "final_b"):
        getattr(out, name).data[...] = getattr(vanilla, name).data
    if vanilla.lm_head is not None:
        out.lm_head.data[...] = vanilla.lm_head.data
    l = target_config.all_layers
    copies = {"layer1": vanilla.records["layer1"], f"layer{l}": vanilla.records[f"layer{l}"]}
    for key, src in copies.items():
        dst = out.records[key]
        for sub, t in src.tensors().items():
            dst.tensors()[sub].data[...] = t.data
    mid_key = "layer_mid" if target_config.share_middle else "layer2"
    dst_mid = out.records[mid_key]
    src_mids = [vanilla.records[f"layer{i}"] for i in range(2, l)]
    for sub in src_mids[0].tensors():
        stacked = np.stack([rec.tensors()[sub].data for rec in src_mids])
        dst_mid.tensors()[sub].data[...] = stacked.mean(axis=0)
    if target_config.use_gate:
        for rec in out.records.values():
            rec.gate_w.data[...] = 0.0
            rec.gate_b.data[...] = 4.0
    return out
