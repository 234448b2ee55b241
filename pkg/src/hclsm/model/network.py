"""The assembled world model: perception, slots, decoder, temporal hierarchy,
relation GNN and causal graph, plus the forward pass that produces every loss
part."""

from __future__ import annotations

import copy
import math
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from .. import hierarchy as hier
from .. import rng as seeds
from ..sbd import SpatialBroadcastDecoder, normalize_alpha, sbd_loss
from ..scan import GlobalContext, SelectiveSSM
from ..slots import (BirthProjection, ExistenceHead, SlotAttention, SlotInit, SlotState, existence_head,
                     init_slots, residual_energy, slot_attention_iterate, slot_birth)
from ..structure import (CausalGraph, RelationGNN, anneal_temperature, dag_penalty, gnn_messages,
                         gumbel_edge_sample, lagrangian_term, sparsity_loss)
from ..tensor import ops
from ..tensor.core import DimensionError, Tensor, held, no_grad
from ..tensor.nn import Linear, Module, TransformerBlock, param
from . import losses as L
from .config import ModelConfig


# ------------------------------------------------------------ perception


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """[B, T, C, H, W] -> [B, T, M, C * patch * patch], patches in row-major grid order."""
    B, T, C, H, W = frames.shape
    if H % patch or W % patch:
        raise DimensionError(f"frame {H}x{W} not divisible by patch {patch}")
    gh, gw = H // patch, W // patch
    x = frames.reshape(B, T, C, gh, patch, gw, patch)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(B, T, gh * gw, C * patch * patch)


class PatchEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, depth: int = 2):
        self.patch = cfg.patch
        self.proj = Linear(cfg.channels * cfg.patch ** 2, cfg.d_model, rng)
        self.time_embed = param(rng.normal(0.0, 0.02, (cfg.clip_len, cfg.d_model)))
        self.blocks = [TransformerBlock(cfg.d_model, cfg.heads, rng) for _ in range(depth)]
        self.out = Linear(cfg.d_model, cfg.d_world, rng)

    def embed(self, frames: np.ndarray) -> Tensor:
        """Linear patch embedding plus per-frame temporal embedding: [B, T, M, d_model]."""
        patches = patchify(np.asarray(frames), self.patch).astype(self.proj.weight.dtype)
        T = patches.shape[1]
        if T > self.time_embed.shape[0]:
            raise DimensionError(f"clip of {T} frames exceeds the {self.time_embed.shape[0]} temporal embeddings")
        d = self.time_embed.shape[1]
        return self.proj(Tensor(patches)) + self.time_embed[:T].reshape(1, T, 1, d)

    def __call__(self, frames: np.ndarray) -> Tensor:
        return patch_embed(frames, self)


def patch_embed(frames: np.ndarray, enc: PatchEncoder) -> Tensor:
    x = enc.embed(frames)
    B, T, M, d = x.shape
    h = x.reshape(B * T, M, d)
    for blk in enc.blocks:
        h = blk(h)
    h = ops.clamp_activations(h)
    return enc.out(h).reshape(B, T, M, enc.out.weight.shape[1])


class Perception(Module):
    """Everything the EMA target mirrors: encoder, slot prior, slot attention, existence and birth."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.encoder = PatchEncoder(cfg, rng)
        self.slot_init = SlotInit(cfg.d_slot, rng)
        self.slot_attn = SlotAttention(cfg.d_world, cfg.d_slot, rng, iters=cfg.slot_iters)
        self.existence = ExistenceHead(cfg.d_slot, rng)
        self.birth = BirthProjection(cfg.d_world, cfg.d_slot, rng)


@dataclass
class Percept:
    tokens: Tensor  # [B, T, M, d_world]
    slots: Tensor  # [B, T, N, d_slot]
    p_alive: Tensor  # [B, T, N]
    attn: np.ndarray  # [B, T, N, M]
    born: np.ndarray  # [B, T, N]


def perceive(perc: Perception, frames: np.ndarray, noise: np.random.Generator, cfg: ModelConfig) -> Percept:
    """Encode a clip and run slot attention frame by frame, each frame starting from the previous slots."""
    tokens = perc.encoder(frames)
    B, T = tokens.shape[:2]
    # one draw shared by the whole batch, so a sample's result never depends on its batch mates
    slots = ops.broadcast_to(init_slots(perc.slot_init, 1, cfg.n_max, noise), (B, cfg.n_max, cfg.d_slot))
    all_slots, all_p, attn, born = [], [], [], []
    for t in range(T):
        tok_t = tokens[:, t]
        k, v = perc.slot_attn.project_tokens(tok_t)
        iters = cfg.first_frame_iters if t == 0 else cfg.slot_iters
        s, A = slot_attention_iterate(perc.slot_attn, slots, k, v, iters)
        p = existence_head(s, perc.existence)
        r = residual_energy(A, p)
        state, b = slot_birth(SlotState(s, p), tok_t, r, perc.birth, cfg.birth_threshold)
        slots = state.slots
        all_slots.append(state.slots)
        all_p.append(state.p_alive)
        attn.append(A.data)
        born.append(b)
    return Percept(tokens, ops.stack(all_slots, axis=1), ops.stack(all_p, axis=1),
                   np.stack(attn, axis=1), np.stack(born, axis=1))


# ------------------------------------------------------------ full model


class HCLSM(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_slot
        self.perception = Perception(cfg, rng)
        self.decoder = SpatialBroadcastDecoder(d, cfg.d_world, cfg.grid, cfg.grid, rng, hidden=cfg.sbd_hidden)
        # dynamics path
        self.action_embed = Linear(2, d, rng)
        self.in_proj = Linear(d, cfg.d_inner, rng)
        self.ssm = SelectiveSSM(cfg.d_inner, cfg.d_state, rng)
        self.global_ctx = GlobalContext(cfg.d_inner, cfg.d_state, rng)
        self.out_proj = Linear(cfg.d_inner, d, rng)
        self.detector = hier.EventDetector(d, rng)
        self.event_tf = hier.EventTransformer(d, cfg.heads, rng)
        self.goal = hier.GoalCompressor(d, cfg.n_summary, cfg.heads, rng)
        self.gates = param(np.zeros(3))
        self.gnn = RelationGNN(d, rng)
        self.causal_logits = param(rng.normal(0.0, 0.01, (cfg.n_max, cfg.n_max)))

    def dynamics_parameters(self) -> list[Tensor]:
        """Parameters used only on the dynamics side (frozen out of Stage 1)."""
        mods = [self.action_embed, self.in_proj, self.ssm, self.global_ctx, self.out_proj, self.detector,
                self.event_tf, self.goal, self.gnn]
        return [p for m in mods for p in m.parameters()] + [self.gates, self.causal_logits]


def build_model(cfg: ModelConfig) -> tuple[HCLSM, Perception]:
    """Fresh model plus its EMA target (a copy of the perception stack)."""
    model = HCLSM(cfg, seeds.split(cfg.seed, "init"))
    return model, copy.deepcopy(model.perception)


@dataclass
class Dynamics:
    l0: Tensor
    predictions: Tensor  # [B, T-1, N, d]
    logits: Tensor  # [B, T]
    scores: Tensor  # [B, T]
    trace: hier.EventTrace
    goal_tokens: Tensor


@dataclass
class CausalState:
    """Augmented Lagrangian bookkeeping owned by the trainer."""
    lagrange_lambda: float = 0.0
    penalty_rho: float = 1.0
    last_h: float = math.inf

    def graph(self, W: Tensor, temperature: float) -> CausalGraph:
        return CausalGraph(W, temperature, self.lagrange_lambda, self.penalty_rho, last_h=self.last_h)

    def absorb(self, g: CausalGraph) -> None:
        self.lagrange_lambda, self.penalty_rho, self.last_h = g.lagrange_lambda, g.penalty_rho, g.last_h


@dataclass
class WorldOutput:
    percept: Percept
    target: Percept
    alive: np.ndarray  # [B, T, N] hard mask used by the decoder
    features: Tensor
    alpha: Tensor  # [B, T, N, P]
    dynamics: Dynamics | None
    assignment: np.ndarray | None  # [B, T-1, N, N]
    parts: dict[str, Tensor]
    total: Tensor
    stats: dict[str, float] = field(default_factory=dict)


def alive_mask_hard(p_alive: np.ndarray) -> np.ndarray:
    """``p > 0.5`` with the most likely slot forced on, so every frame keeps an owner."""
    alive = p_alive > 0.5
    top = np.argmax(p_alive, axis=-1)
    np.put_along_axis(alive, top[..., None], True, axis=-1)
    return alive


def run_dynamics(model: HCLSM, slots: Tensor, p_alive: Tensor, actions: np.ndarray, cfg: ModelConfig) -> Dynamics:
    B, T, N, d = slots.shape
    act = Tensor(np.asarray(actions, dtype=slots.dtype))
    x = slots + model.action_embed(act).reshape(B, T, 1, d)
    u = model.in_proj(x)
    di = u.shape[-1]
    u = ops.transpose(u, (0, 2, 1, 3)).reshape(B * N, T, di)
    y = model.ssm(u, workers=cfg.workers).reshape(B, N, T, di)
    y = y + model.global_ctx(y).reshape(B, 1, T, di)
    l0 = model.out_proj(ops.transpose(y, (0, 2, 1, 3)))  # [B, T, N, d]
    logits = hier.event_logits(hier.multiscale_diffs(ops.mean(l0, axis=2)), model.detector)
    scores = ops.sigmoid(logits)
    trace = hier.build_trace(scores, model.detector.threshold)
    dense, index = hier.gather_events(l0, trace.gather_index)
    events = model.event_tf(dense, trace.k_actual)
    l1 = hier.scatter_events(events, index, T)
    goal = model.goal(ops.mean(events, axis=2), trace.k_actual)
    l2 = hier.broadcast_goal(goal.tokens, l0.shape)
    h = hier.hierarchy_combine(l0, l1, l2, model.gates)
    msgs = gnn_messages(h.reshape(B * T, N, d), p_alive.reshape(B * T, N), model.gnn, chunk=cfg.gnn_chunk)
    h = h + msgs.reshape(B, T, N, d)
    return Dynamics(l0, h[:, : T - 1], logits, scores, trace, goal.tokens)


def forward(model: HCLSM, ema: Perception, frames: np.ndarray, actions: np.ndarray, step: int,
            causal: CausalState | None = None, cfg: ModelConfig | None = None) -> WorldOutput:
    cfg = cfg or model.cfg
    causal = causal or CausalState()
    frames = np.asarray(frames)
    B, T = frames.shape[:2]
    stage = cfg.stage(step)

    # both branches see the same slot-initialisation noise
    online = perceive(model.perception, frames, seeds.split(cfg.seed, "slots", step), cfg)
    with no_grad():
        target = perceive(ema, frames, seeds.split(cfg.seed, "slots", step), cfg)

    N, d = cfg.n_max, cfg.d_slot
    P = cfg.grid * cfg.grid
    alive = held(lambda: alive_mask_hard(online.p_alive.data))
    feats, alpha_raw = model.decoder(online.slots.reshape(B * T, N, d))
    alpha = normalize_alpha(alpha_raw, alive.reshape(B * T, N))
    parts: dict[str, Tensor] = {}
    parts["sbd"] = sbd_loss(feats, alpha, Tensor(target.tokens.data.reshape(B * T, P, cfg.d_world)))
    alive_st = ops.straight_through(alive, online.p_alive)
    parts["diversity"] = L.diversity_loss(online.slots, alive_st)

    zero = Tensor(np.zeros((), dtype=feats.dtype))
    dyn = None
    assignment = None
    gate = no_grad() if stage == 1 else nullcontext()
    with gate:
        if T > 1:
            dyn = run_dynamics(model, online.slots, online.p_alive, actions, cfg)
            parts["jepa"] = L.jepa_loss(dyn.predictions, target.slots[:, 1:])
            assignment = L.soft_assignment(online.slots[:, :-1], online.slots[:, 1:])
            parts["tracking"] = L.tracking_loss(assignment, online.slots[:, :-1], online.slots[:, 1:])
            targets = held(lambda: L.change_targets(online.slots.data, cfg.event_target))
            parts["event"] = L.event_contrastive_loss(dyn.logits, targets, model.detector.threshold_logit)
        else:
            for k in ("jepa", "tracking", "event"):
                parts[k] = zero
        causal_gate = nullcontext() if cfg.causal_active else no_grad()
        with causal_gate:
            progress = max(0, step - cfg.stage1_steps) / max(1, cfg.total_steps - cfg.stage1_steps)
            graph = causal.graph(model.causal_logits, anneal_temperature(progress))
            A = gumbel_edge_sample(graph, seeds.split(cfg.seed, "gumbel", step))
            h = dag_penalty(A)
            parts["sparsity"] = sparsity_loss(A)
            parts["dag_h"] = h
            parts["causal"] = parts["sparsity"] + lagrangian_term(graph, h)

    total = L.total_loss(step, parts, cfg)
    parts["total"] = total
    stats = {
        "alive": float(alive.sum(axis=-1).mean()),
        "events": float(dyn.trace.k_actual.mean()) if dyn is not None else 0.0,
        "stage": float(stage),
    }
    return WorldOutput(online, target, alive, feats, alpha.reshape(B, T, N, P), dyn, assignment, parts, total, stats)
