"""Waypoint-selection actor and critics with discrete soft actor-critic.

The actor embeds candidate nodes, relates them with self-attention, folds the
trajectory through an LSTM, fuses the recurrent state with the map encoding
and then with the node encodings via cross-attention, and scores each node by
a scaled dot product against its encoding.  The critics share that
architecture (with their own weights) and end in a per-node linear head.

Training is discrete SAC: twin critics with min-Q targets, a temperature
auto-tuned toward a fraction of the uniform entropy, and Polyak-averaged
target critics.  All parameters, including the map encoder being fine-tuned,
live in one name-keyed store so checkpoints capture the full training state.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch

from . import encoder as enc_mod
from . import nets
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import EncoderCfg
from .errors import ConfigError
from .navenv import N_NODE_FEATURES, NavEnv, Observation
from .nets import NEG_INF, AdamW, ParamStore

_CTX_DECODE = np.array([0.0, 0.5, 1.0], dtype=np.float32)


@dataclasses.dataclass(frozen=True)
class PolicyCfg:
    """Actor/critic trunk dimensions."""

    d: int = 128           # shared embedding width
    layers: int = 6        # node self-attention depth
    heads: int = 8
    lstm_dim: int = 128
    n_nodes: int = 20      # padded node slot count
    node_feat: int = N_NODE_FEATURES

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.lstm_dim != self.d:
            raise ConfigError("lstm_dim must equal d: the recurrent state is "
                              "used directly as the cross-attention query")


@dataclasses.dataclass(frozen=True)
class SacCfg:
    """Discrete SAC constants."""

    gamma: float = 0.99
    tau: float = 0.005
    lr: float = 1e-5
    alpha_init: float = 0.2
    target_entropy_coef: float = 0.4  # fraction of ln(n_nodes)
    fixed_alpha: float | None = None
    batch_size: int = 64
    replay_capacity: int = 10000


# ---------------------------------------------------------------------------
# observation snapshots


@dataclasses.dataclass
class PolicyObs:
    """Fixed-size, replay-friendly snapshot of one Observation."""

    context_u8: np.ndarray   # context map coded {0: occupied, 1: unknown, 2: free}
    node_feats: np.ndarray   # [K, F] float32, zero-padded
    mask: np.ndarray         # [K] bool, True for real nodes
    prev_feats: np.ndarray   # [F] float32, features of the previously chosen node
    prev_reward: float

    @classmethod
    def from_observation(cls, obs: Observation, n_nodes: int,
                         prev_feats: np.ndarray | None = None,
                         prev_reward: float = 0.0) -> "PolicyObs":
        feats = obs.node_features()
        n = len(feats)
        if n > n_nodes:
            raise ValueError(f"{n} nodes exceed the padded slot count {n_nodes}")
        padded = np.zeros((n_nodes, N_NODE_FEATURES), dtype=np.float32)
        padded[:n] = feats
        mask = np.zeros(n_nodes, dtype=bool)
        mask[:n] = True
        if n == 0:
            # terminal STUCK observation: keep one zero-feature slot valid so
            # batched forwards stay defined (its value never matters, the
            # transition is terminal and bootstrapping is gated by done)
            mask[0] = True
        ctx = np.rint(obs.context * 2.0).astype(np.uint8)
        if prev_feats is None:
            prev_feats = np.zeros(N_NODE_FEATURES, dtype=np.float32)
        return cls(ctx, padded, mask, np.asarray(prev_feats, np.float32),
                   float(prev_reward))

    def context_map(self) -> np.ndarray:
        return _CTX_DECODE[self.context_u8]


@dataclasses.dataclass
class Transition:
    obs: PolicyObs
    lstm: tuple[np.ndarray, np.ndarray]       # state entering the decision
    action: int
    reward: float
    done: bool
    next_obs: PolicyObs
    next_lstm: tuple[np.ndarray, np.ndarray]  # state entering the next decision


class ReplayBuffer:
    """FIFO ring of transitions with uniform sampling."""

    def __init__(self, capacity: int = 10000):
        if capacity <= 0:
            raise ConfigError("replay capacity must be positive")
        self.capacity = capacity
        self._data: list[Transition] = []
        self._next = 0

    def push(self, tr: Transition) -> None:
        if len(self._data) < self.capacity:
            self._data.append(tr)
        else:
            self._data[self._next] = tr
        self._next = (self._next + 1) % self.capacity

    def __len__(self) -> int:
        return len(self._data)

    def sample(self, batch: int, rng: np.random.Generator) -> list[Transition]:
        if not self._data:
            raise ValueError("replay buffer is empty")
        idx = rng.integers(0, len(self._data), size=batch)
        return [self._data[i] for i in idx]


@dataclasses.dataclass
class PolicyBatch:
    context: torch.Tensor      # [B, H, W] float
    feats: torch.Tensor        # [B, K, F]
    mask: torch.Tensor         # [B, K] bool
    prev_feats: torch.Tensor   # [B, F]
    prev_reward: torch.Tensor  # [B]
    h: torch.Tensor            # [B, lstm_dim]
    c: torch.Tensor


def collate(obs_list: list[PolicyObs],
            lstm_list: list[tuple[np.ndarray, np.ndarray]]) -> PolicyBatch:
    return PolicyBatch(
        context=torch.from_numpy(np.stack([o.context_map() for o in obs_list])),
        feats=torch.from_numpy(np.stack([o.node_feats for o in obs_list])),
        mask=torch.from_numpy(np.stack([o.mask for o in obs_list])),
        prev_feats=torch.from_numpy(np.stack([o.prev_feats for o in obs_list])),
        prev_reward=torch.tensor([o.prev_reward for o in obs_list],
                                 dtype=torch.float32),
        h=torch.from_numpy(np.stack([s[0] for s in lstm_list])),
        c=torch.from_numpy(np.stack([s[1] for s in lstm_list])),
    )


# ---------------------------------------------------------------------------
# agent


_TRUNKS = ("actor", "q1", "q2")


def _init_trunk(store: ParamStore, prefix: str, pcfg: PolicyCfg,
                enc_d: int, gen: torch.Generator) -> None:
    nets.init_linear(store, f"{prefix}.embed", pcfg.node_feat, pcfg.d, gen)
    for i in range(pcfg.layers):
        nets.init_transformer_layer(store, f"{prefix}.blk{i}", pcfg.d, gen)
    nets.init_linear(store, f"{prefix}.zc", enc_d, pcfg.d, gen)
    nets.init_linear(store, f"{prefix}.lstm_in", 2 * pcfg.d + 1,
                     pcfg.lstm_dim, gen)
    nets.init_lstm(store, f"{prefix}.lstm", pcfg.lstm_dim, pcfg.lstm_dim, gen)
    nets.init_attention(store, f"{prefix}.att_c", pcfg.d, gen)
    nets.init_attention(store, f"{prefix}.att_n", pcfg.d, gen)
    if prefix != "actor":
        nets.init_linear(store, f"{prefix}.head", 2 * pcfg.d, 1, gen)


class Agent:
    """Actor, twin critics, target critics, and the shared map encoder."""

    def __init__(self, pcfg: PolicyCfg, enc_cfg: EncoderCfg, seed: int = 0,
                 sac: SacCfg = SacCfg()):
        self.pcfg = pcfg
        self.enc_cfg = enc_cfg
        self.sac = sac
        gen = torch.Generator().manual_seed(seed)
        store = ParamStore()
        enc_mod.init_encoder_only(store, enc_cfg, gen)
        for prefix in _TRUNKS:
            _init_trunk(store, prefix, pcfg, enc_cfg.d, gen)
        alpha0 = sac.fixed_alpha if sac.fixed_alpha is not None else sac.alpha_init
        store.add("alpha.log", torch.tensor(math.log(alpha0)))
        self.store = store

        self.target = ParamStore()
        names = store.to_arrays()
        for name in names:
            if name.startswith(("q1.", "q2.")):
                self.target.add(name, names[name], requires_grad=False)

        critic_names = [n for n, _ in store.items()
                        if n.startswith(("q1.", "q2.", "enc."))]
        actor_names = [n for n, _ in store.items() if n.startswith("actor.")]
        self.critic_opt = AdamW(store, sac.lr, names=critic_names)
        self.actor_opt = AdamW(store, sac.lr, names=actor_names)
        self.alpha_opt = AdamW(store, sac.lr, names=["alpha.log"])

    # -- state helpers -----------------------------------------------------

    def initial_lstm(self) -> tuple[np.ndarray, np.ndarray]:
        z = np.zeros(self.pcfg.lstm_dim, dtype=np.float32)
        return z, z.copy()

    @property
    def alpha(self) -> torch.Tensor:
        if self.sac.fixed_alpha is not None:
            return torch.tensor(self.sac.fixed_alpha)
        return self.store["alpha.log"].exp()

    def target_entropy(self) -> float:
        return self.sac.target_entropy_coef * math.log(self.pcfg.n_nodes)

    # -- forward passes ------------------------------------------------------

    def encode_context(self, context: torch.Tensor) -> torch.Tensor:
        tokens = enc_mod.tokenize(context.numpy(), self.enc_cfg.patch)
        return enc_mod.encode(tokens, None, self.enc_cfg, self.store).z

    def _trunk(self, store: ParamStore, prefix: str, z_enc: torch.Tensor,
               batch: PolicyBatch):
        """Shared trunk; returns (node encodings z_N, fused query h2, state')."""
        p = self.pcfg
        pad = ~batch.mask
        x = nets.linear(batch.feats, store, f"{prefix}.embed")
        for i in range(p.layers):
            x = nets.transformer_layer(x, p.heads, store, f"{prefix}.blk{i}",
                                       pad_mask=pad)
        z_n = x
        z_c = nets.linear(z_enc, store, f"{prefix}.zc")

        m = batch.mask.to(z_n.dtype)
        denom = m.sum(dim=1, keepdim=True).clamp(min=1.0)
        pooled = (z_n * m[..., None]).sum(dim=1) / denom
        prev_e = nets.linear(batch.prev_feats, store, f"{prefix}.embed")
        step_summary = torch.cat(
            [pooled, prev_e, batch.prev_reward[:, None].to(z_n.dtype)], dim=-1)
        lstm_x = nets.linear(step_summary, store, f"{prefix}.lstm_in")
        h, c = nets.lstm_step(lstm_x, (batch.h.to(z_n.dtype),
                                       batch.c.to(z_n.dtype)),
                              store, f"{prefix}.lstm")

        q = h[:, None, :]
        h1 = nets.mhca(q, z_c, p.heads, store, f"{prefix}.att_c") + q
        h2 = nets.mhca(h1, z_n, p.heads, store, f"{prefix}.att_n",
                       pad_mask=pad) + h1
        return z_n, h2[:, 0], (h, c)

    def actor_forward(self, batch: PolicyBatch,
                      z_enc: torch.Tensor | None = None,
                      store: ParamStore | None = None):
        """Returns (probs [B,K], logits [B,K], lstm state')."""
        if not batch.mask.any(dim=1).all():
            raise ValueError("observation with zero candidate nodes")
        store = store or self.store
        if z_enc is None:
            z_enc = self.encode_context(batch.context)
        z_n, h2, state = self._trunk(store, "actor", z_enc, batch)
        logits = (z_n @ h2[..., None])[..., 0] / math.sqrt(self.pcfg.d)
        logits = logits.masked_fill(~batch.mask, NEG_INF)
        probs = nets.stable_softmax(logits)
        return probs, logits, state

    def critic_forward(self, prefix: str, batch: PolicyBatch,
                       z_enc: torch.Tensor | None = None,
                       store: ParamStore | None = None) -> torch.Tensor:
        """Per-node Q values [B,K]; padded slots are zero.

        ``store`` selects which critic weights to use (defaults to the online
        store; pass ``agent.target`` for the Polyak-averaged copies).
        """
        if prefix not in ("q1", "q2"):
            raise ValueError(f"unknown critic {prefix!r}")
        store = store or self.store
        if z_enc is None:
            z_enc = self.encode_context(batch.context)
        z_n, h2, _ = self._trunk(store, prefix, z_enc, batch)
        k = z_n.shape[1]
        pair = torch.cat([h2[:, None, :].expand(-1, k, -1), z_n], dim=-1)
        q = nets.linear(pair, store, f"{prefix}.head")[..., 0]
        return q.masked_fill(~batch.mask, 0.0)

    def _target_q(self, batch: PolicyBatch, z_enc: torch.Tensor) -> torch.Tensor:
        """min over the twin target critics."""
        q1 = self.critic_forward("q1", batch, z_enc, store=self.target)
        q2 = self.critic_forward("q2", batch, z_enc, store=self.target)
        return torch.minimum(q1, q2)


def select_action(probs: np.ndarray, mode: str = "sample",
                  rng: np.random.Generator | None = None) -> int:
    """Sampling for exploration, lowest-index argmax for inference."""
    p = np.asarray(probs, dtype=np.float64)
    if mode == "argmax":
        return int(np.argmax(p))
    if mode == "sample":
        if rng is None:
            raise ValueError("sampling mode needs an rng")
        return int(rng.choice(len(p), p=p / p.sum()))
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# SAC update


def compute_targets(agent: Agent, batch_next: PolicyBatch, rewards: torch.Tensor,
                    done: torch.Tensor) -> torch.Tensor:
    """Soft state-value bootstrap: y = r + gamma (1-done) V(s')."""
    sac = agent.sac
    with torch.no_grad():
        z_enc = agent.encode_context(batch_next.context)
        probs, logits, _ = agent.actor_forward(batch_next, z_enc)
        min_q = agent._target_q(batch_next, z_enc)
        log_p = torch.log(probs.clamp(min=1e-12))
        alpha = agent.alpha
        v = (probs * (min_q - alpha * log_p) * batch_next.mask).sum(dim=1)
        return rewards + sac.gamma * (1.0 - done) * v


def sac_update(agent: Agent, transitions: list[Transition]) -> dict[str, float]:
    """One gradient step on critics, actor, and temperature, then Polyak."""
    if not transitions:
        raise ValueError("empty batch")
    sac = agent.sac
    batch = collate([t.obs for t in transitions], [t.lstm for t in transitions])
    batch_next = collate([t.next_obs for t in transitions],
                         [t.next_lstm for t in transitions])
    actions = torch.tensor([t.action for t in transitions], dtype=torch.long)
    rewards = torch.tensor([t.reward for t in transitions], dtype=torch.float32)
    done = torch.tensor([float(t.done) for t in transitions])

    y = compute_targets(agent, batch_next, rewards, done)

    # critics (the shared encoder is trained through this loss)
    agent.store.zero_grad()
    z_enc = agent.encode_context(batch.context)
    q1 = agent.critic_forward("q1", batch, z_enc).gather(1, actions[:, None])[:, 0]
    q2 = agent.critic_forward("q2", batch, z_enc).gather(1, actions[:, None])[:, 0]
    critic_loss = nets.mse(q1, y) + nets.mse(q2, y)
    nets.assert_finite(critic_loss, "critic loss")
    critic_loss.backward()
    agent.critic_opt.step()

    # actor (encoder gradients from this loss are discarded by the optimizer
    # subset; critics supply the encoder's training signal)
    agent.store.zero_grad()
    z_enc = agent.encode_context(batch.context)
    probs, logits, _ = agent.actor_forward(batch, z_enc)
    log_p = torch.log(probs.clamp(min=1e-12))
    with torch.no_grad():
        min_q = torch.minimum(agent.critic_forward("q1", batch, z_enc),
                              agent.critic_forward("q2", batch, z_enc))
    alpha = agent.alpha.detach()
    actor_loss = ((probs * (alpha * log_p - min_q) * batch.mask)
                  .sum(dim=1).mean())
    nets.assert_finite(actor_loss, "actor loss")
    actor_loss.backward()
    agent.actor_opt.step()

    # temperature
    entropy = -(probs * log_p * batch.mask).sum(dim=1).detach()
    if sac.fixed_alpha is None:
        agent.store.zero_grad()
        alpha_loss = (agent.store["alpha.log"].exp()
                      * (entropy - agent.target_entropy()).mean())
        alpha_loss.backward()
        agent.alpha_opt.step()
        alpha_val = float(agent.alpha.detach())
    else:
        alpha_loss = torch.tensor(0.0)
        alpha_val = sac.fixed_alpha

    nets.soft_update(agent.target, agent.store, sac.tau)
    return {
        "critic": float(critic_loss.detach()),
        "actor": float(actor_loss.detach()),
        "alpha": float(alpha_loss.detach()),
        "alpha_value": alpha_val,
        "entropy": float(entropy.mean()),
        "q_mean": float(q1.detach().mean()),
    }


# ---------------------------------------------------------------------------
# rollout collection


def collect_episode(env: NavEnv, agent: Agent, start, goal,
                    replay: ReplayBuffer | None, rng: np.random.Generator,
                    mode: str = "sample",
                    max_decisions: int | None = None) -> dict:
    """Run one episode, optionally pushing transitions into the replay."""
    pcfg = agent.pcfg
    obs = env.reset(start, goal)
    lstm = agent.initial_lstm()
    pobs = PolicyObs.from_observation(obs, pcfg.n_nodes)
    total = 0.0
    decisions = 0
    while not env.done:
        batch = collate([pobs], [lstm])
        with torch.no_grad():
            probs, _, (h, c) = agent.actor_forward(batch)
        action = select_action(probs[0].numpy(), mode, rng)
        sr = env.step(action)
        next_lstm = (h[0].numpy().astype(np.float32),
                     c[0].numpy().astype(np.float32))
        next_pobs = PolicyObs.from_observation(
            sr.obs, pcfg.n_nodes,
            prev_feats=pobs.node_feats[action], prev_reward=sr.reward)
        if replay is not None:
            replay.push(Transition(pobs, lstm, action, sr.reward, sr.done,
                                   next_pobs, next_lstm))
        total += sr.reward
        decisions += 1
        pobs, lstm = next_pobs, next_lstm
        if max_decisions is not None and decisions >= max_decisions:
            break
    return {"outcome": env.outcome, "decisions": decisions,
            "reward_sum": total, "path_m": env.path_length_m}


# ---------------------------------------------------------------------------
# checkpointing


def save_agent(path, agent: Agent, meta: dict[str, float] | None = None) -> None:
    """Write online and target parameters; optional scalar metadata rides
    along as ``meta.*`` entries (architecture dims, step counters)."""
    arrays = agent.store.to_arrays()
    for name, arr in agent.target.to_arrays().items():
        arrays[f"tgt.{name}"] = arr
    for key, val in (meta or {}).items():
        arrays[f"meta.{key}"] = np.float32(val)
    save_checkpoint(path, arrays)


def read_agent_meta(path) -> dict[str, float]:
    arrays = load_checkpoint(path)
    return {k[len("meta."):]: float(v) for k, v in arrays.items()
            if k.startswith("meta.")}


def load_agent(path, agent: Agent) -> None:
    arrays = load_checkpoint(path)
    online = {k: v for k, v in arrays.items()
              if not k.startswith(("tgt.", "meta."))}
    target = {k[len("tgt."):]: v for k, v in arrays.items()
              if k.startswith("tgt.")}
    agent.store.load_arrays(online)
    agent.target.load_arrays(target)


def load_pretrained_encoder(path, agent: Agent) -> list[str]:
    """Copy the encoder subset of a pretraining checkpoint into the agent."""
    arrays = load_checkpoint(path)
    subset = {k: v for k, v in arrays.items() if k.startswith("enc.")}
    if not subset:
        raise ValueError(f"{path} contains no encoder tensors")
    return agent.store.load_arrays(subset, subset=True)
