"""Return-conditioned causal-transformer policy over task-augmented tokens.

A sequence is a k-step demonstration prompt of (rtg, state, action) triples
followed by the most recent K-step history of (z, rtg, state, action)
quadruples, where z is the frozen task encoder's representation. The
transformer predicts an action at every state token; training regresses only
the K history heads onto the logged actions. Ablation layouts drop the prompt
tokens, the z tokens, or both (which recovers a plain decision transformer).
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from . import nn
from .core import (ACTION_BOUND, HORIZON, STREAM_MDT_BATCH,
                   STREAM_MDT_DROPOUT, STREAM_MDT_INIT, rng_stream)
from .datagen import build_demo
from .worldmodel import Z_DIM, select_segment

EMBED_DIM = 128
N_BLOCKS = 3
N_HEADS = 1
FFN_MULT = 4
STATE_DIM = 2
ACT_DIM = 2

# dropout lanes are decided by uint8 draws: keep when u >= cut, scale by
# 256/(256-cut); cut 26 approximates rate 0.1
DROP_RES = 256

# instrumentation: zero-shot evaluation must never construct prompts, which
# the eval tests assert through this counter
COUNTERS = {"get_prompt": 0}


def reset_counters():
    for key in COUNTERS:
        COUNTERS[key] = 0


@dataclass(frozen=True)
class PromptSegment:
    """k consecutive demo steps: source return-to-go, state, action, and the
    original episode timesteps. May be empty (cold start / zero-shot)."""
    rtg: tuple
    states: tuple
    actions: tuple
    timesteps: tuple

    def __post_init__(self):
        n = len(self.rtg)
        if not (len(self.states) == len(self.actions)
                == len(self.timesteps) == n):
            raise ValueError("prompt field lengths differ")
        for i in range(1, n):
            if self.timesteps[i] != self.timesteps[i - 1] + 1:
                raise ValueError("prompt timesteps must be consecutive")
        if n and not 0 <= self.timesteps[0] <= self.timesteps[-1] < HORIZON:
            raise ValueError("prompt timesteps out of range")

    def __len__(self):
        return len(self.rtg)


EMPTY_PROMPT = PromptSegment((), (), (), ())


@dataclass(frozen=True)
class AugmentedHistory:
    """Up to K most recent steps as (z, rtg, state, action) with timesteps."""
    z: tuple
    rtg: tuple
    states: tuple
    actions: tuple
    timesteps: tuple

    def __post_init__(self):
        n = len(self.rtg)
        if n == 0:
            raise ValueError("history must hold at least one step")
        if not (len(self.z) == len(self.states) == len(self.actions)
                == len(self.timesteps) == n):
            raise ValueError("history field lengths differ")
        if any(len(zi) != Z_DIM for zi in self.z):
            raise ValueError(f"z entries must be {Z_DIM}-dim")
        for i in range(1, n):
            if self.timesteps[i] != self.timesteps[i - 1] + 1:
                raise ValueError("history timesteps must be consecutive")
        if not 0 <= self.timesteps[0] <= self.timesteps[-1] < HORIZON:
            raise ValueError("history timesteps out of range")

    def __len__(self):
        return len(self.rtg)


@dataclass(frozen=True)
class TokenSequence:
    """Batched model input: modality-grouped value arrays plus per-token
    timesteps, a real-token mask (False rows are left padding), and the loss
    mask over history state heads. Token order is the k' prompt triples then
    the K' history groups; with_z controls whether history groups carry a z
    token (4 per step) or not (3 per step)."""
    n_prompt: int
    n_history: int
    with_z: bool
    p_rtg: np.ndarray      # [B, k', 1]
    p_s: np.ndarray        # [B, k', STATE_DIM]
    p_a: np.ndarray        # [B, k', ACT_DIM]
    z: np.ndarray          # [B, K', Z_DIM]
    rtg: np.ndarray        # [B, K', 1]
    s: np.ndarray          # [B, K', STATE_DIM]
    a: np.ndarray          # [B, K', ACT_DIM]
    timesteps: np.ndarray  # [B, T] int
    real: np.ndarray       # [B, T] bool
    loss_mask: np.ndarray  # [B, K'] same float dtype as the values

    def __post_init__(self):
        B = self.rtg.shape[0]
        k, K = self.n_prompt, self.n_history
        expect = [(self.p_rtg, (B, k, 1)), (self.p_s, (B, k, STATE_DIM)),
                  (self.p_a, (B, k, ACT_DIM)), (self.z, (B, K, Z_DIM)),
                  (self.rtg, (B, K, 1)), (self.s, (B, K, STATE_DIM)),
                  (self.a, (B, K, ACT_DIM)),
                  (self.timesteps, (B, self.n_tokens)),
                  (self.real, (B, self.n_tokens)),
                  (self.loss_mask, (B, K))]
        for arr, shape in expect:
            if arr.shape != shape:
                raise nn.ShapeError(f"token array {arr.shape} != {shape}")

    @property
    def hist_group(self):
        return 4 if self.with_z else 3

    @property
    def n_tokens(self):
        return 3 * self.n_prompt + self.hist_group * self.n_history

    @property
    def state_cols(self):
        """Token columns holding state tokens, prompt first then history."""
        k, g = self.n_prompt, self.hist_group
        prompt = np.arange(k) * 3 + 1
        hist = 3 * k + np.arange(self.n_history) * g + (g - 2)
        return np.concatenate([prompt, hist])

    @property
    def modality(self):
        group = ("z", "rtg", "state", "action") if self.with_z \
            else ("rtg", "state", "action")
        return ("rtg", "state", "action") * self.n_prompt \
            + group * self.n_history


def assemble(prompt, history, stats=None, dtype=np.float32):
    """One TokenSequence (batch of 1) from domain objects; states are
    normalized when stats is given. with_z follows from using assemble at
    all -- the z-free layouts are produced by the batch sampler."""
    return _assemble(prompt, history, stats, dtype, with_z=True)


def _assemble(prompt, history, stats, dtype, with_z):
    prompt = prompt if prompt is not None else EMPTY_PROMPT
    k, K = len(prompt), len(history)

    def norm(states, width):
        arr = np.asarray(states, dtype=np.float64).reshape(1, width, STATE_DIM)
        if stats is not None and width:
            arr = (arr - stats.mean_array) / stats.std_array
        return arr.astype(dtype)

    p_rtg = np.asarray(prompt.rtg, dtype=dtype).reshape(1, k, 1)
    p_s = norm(prompt.states, k)
    p_a = np.asarray(prompt.actions, dtype=dtype).reshape(1, k, ACT_DIM)
    z = np.asarray(history.z, dtype=dtype).reshape(1, K, Z_DIM)
    rtg = np.asarray(history.rtg, dtype=dtype).reshape(1, K, 1)
    s = norm(history.states, K)
    a = np.asarray(history.actions, dtype=dtype).reshape(1, K, ACT_DIM)
    g = 4 if with_z else 3
    ts = np.concatenate([np.repeat(prompt.timesteps, 3),
                         np.repeat(history.timesteps, g)])
    T = 3 * k + g * K
    return TokenSequence(k, K, with_z, p_rtg, p_s, p_a, z, rtg, s, a,
                         ts.astype(np.int64).reshape(1, T),
                         np.ones((1, T), dtype=bool),
                         np.ones((1, K), dtype=dtype))


def init_policy_params(seed, embed_dim=EMBED_DIM, dtype=np.float32):
    """GPT-style init: N(0, 0.02) weights and embeddings, zero biases,
    identity layer norms."""
    store = nn.ParameterStore(dtype=dtype)
    rng = rng_stream(seed, STREAM_MDT_INIT)
    D = embed_dim

    def w(name, *shape):
        store.add(name, rng.normal(0.0, 0.02, shape).astype(dtype))

    def const(name, value, *shape):
        store.add(name, np.full(shape, value, dtype=dtype))

    w("emb.z.W", Z_DIM, D)
    w("emb.rtg.W", 1, D)
    w("emb.s.W", STATE_DIM, D)
    w("emb.a.W", ACT_DIM, D)
    w("emb.t", HORIZON, D)
    for i in range(N_BLOCKS):
        p = f"blk{i}."
        const(p + "ln1.g", 1.0, D)
        const(p + "ln1.b", 0.0, D)
        for q in ("q", "k", "v", "p"):
            w(p + f"attn.W_{q}", D, D)
            const(p + f"attn.b_{q}", 0.0, D)
        const(p + "ln2.g", 1.0, D)
        const(p + "ln2.b", 0.0, D)
        w(p + "ffn.W1", D, FFN_MULT * D)
        const(p + "ffn.b1", 0.0, FFN_MULT * D)
        w(p + "ffn.W2", FFN_MULT * D, D)
        const(p + "ffn.b2", 0.0, D)
    const("final.ln.g", 1.0, D)
    const("final.ln.b", 0.0, D)
    w("head.W", D, ACT_DIM)
    const("head.b", 0.0, ACT_DIM)
    return store


def dropout_keep(rng, shape, rate, dtype):
    """Keep mask from uint8 draws: drop a lane when u < round(256*rate);
    kept lanes are scaled so the expectation stays the identity."""
    cut = int(round(DROP_RES * rate))
    if cut == 0:
        return np.ones(shape, dtype=dtype)
    u = rng.integers(0, DROP_RES, size=shape, dtype=np.uint8)
    scale = DROP_RES / (DROP_RES - cut)
    return (u >= cut).astype(dtype) * np.asarray(scale, dtype=dtype)


def attention_bias(real, dtype):
    """[B,1,T,T] additive mask: causal, padding keys hidden, and the diagonal
    always open so padded query rows keep a finite softmax."""
    B, T = real.shape
    allow = np.tril(np.ones((T, T), dtype=bool))[None] & real[:, None, :]
    allow = allow | np.eye(T, dtype=bool)[None]
    return np.where(allow, 0.0, -np.inf).astype(dtype)[:, None]


class Policy:
    """Parameter bundle plus the tape-engine forward pass. Normalization
    stats ride along so action selection can normalize raw env states."""

    def __init__(self, store, stats=None, dropout=0.1, with_z=True):
        self.store = store
        self.stats = stats
        self.dropout = dropout
        self.with_z = with_z
        self._lp = nn.LiveParams(store)

    def _t(self, name):
        return self._lp.t(name)

    def drain_grads(self):
        return self._lp.drain()

    def forward(self, tokens, train_flag=False, rng=None):
        """Action predictions at every state token, [B, k'+K', ACT_DIM],
        bounded by tanh scaling."""
        tq = tokens
        dtype = tq.rtg.dtype
        B, T = tq.real.shape
        drop = train_flag and self.dropout > 0.0

        def mask(shape):
            return nn.Tensor(dropout_keep(rng, shape, self.dropout, dtype))

        def emb(arr, name):
            return nn.linear(nn.Tensor(arr), self._t(name))

        D = self.store.params["emb.t"].shape[1]
        hist_parts = ([emb(tq.z, "emb.z.W")] if tq.with_z else []) + [
            emb(tq.rtg, "emb.rtg.W"), emb(tq.s, "emb.s.W"),
            emb(tq.a, "emb.a.W")]
        groups = [nn.reshape(nn.stack(hist_parts, axis=2),
                             (B, tq.hist_group * tq.n_history, D))]
        if tq.n_prompt:
            p_parts = [emb(tq.p_rtg, "emb.rtg.W"), emb(tq.p_s, "emb.s.W"),
                       emb(tq.p_a, "emb.a.W")]
            groups.insert(0, nn.reshape(nn.stack(p_parts, axis=2),
                                        (B, 3 * tq.n_prompt, D)))
        x = nn.concat(groups, axis=1) if len(groups) > 1 else groups[0]
        x = x + nn.embedding_lookup(self._t("emb.t"), tq.timesteps)
        x = x * nn.Tensor(tq.real[:, :, None].astype(dtype))
        if drop:
            x = x * mask((B, T, D))

        att_mask = nn.Tensor(attention_bias(tq.real, dtype))
        for i in range(N_BLOCKS):
            p = f"blk{i}."
            att_params = {f"W_{q}": self._t(p + f"attn.W_{q}")
                          for q in "qkv"}
            att_params |= {f"b_{q}": self._t(p + f"attn.b_{q}")
                           for q in "qkv"}
            att_params["att_mask"] = att_mask
            h = nn.layer_norm(x, self._t(p + "ln1.g"), self._t(p + "ln1.b"))
            h = nn.causal_self_attention(h, att_params, n_heads=N_HEADS)
            h = nn.linear(h, self._t(p + "attn.W_p"), self._t(p + "attn.b_p"))
            if drop:
                h = h * mask((B, T, D))
            x = x + h
            f = nn.layer_norm(x, self._t(p + "ln2.g"), self._t(p + "ln2.b"))
            f = nn.linear(nn.relu(nn.linear(f, self._t(p + "ffn.W1"),
                                            self._t(p + "ffn.b1"))),
                          self._t(p + "ffn.W2"), self._t(p + "ffn.b2"))
            if drop:
                f = f * mask((B, T, D))
            x = x + f
        x = nn.layer_norm(x, self._t("final.ln.g"), self._t("final.ln.b"))
        heads = nn.index_rows(x, tq.state_cols)
        pred = nn.linear(heads, self._t("head.W"), self._t("head.b"))
        return nn.tanh(pred) * nn.Tensor(np.asarray(ACTION_BOUND,
                                                    dtype=dtype))


def mdt_loss(policy, tokens, targets, train_flag=False, rng=None):
    """Masked action regression over the K' history heads: summed squared
    error divided by the valid action-dimension count."""
    preds = policy.forward(tokens, train_flag, rng)
    k = tokens.n_prompt
    hist = nn.index_rows(preds, np.arange(k, k + tokens.n_history))
    diff = (hist - nn.Tensor(targets)) * nn.Tensor(
        tokens.loss_mask[:, :, None])
    denom = float(tokens.loss_mask.sum()) * ACT_DIM
    return (diff * diff).sum() * nn.Tensor(
        np.asarray(1.0 / denom, dtype=targets.dtype))


def act(policy, prompt, history):
    """Greedy action at the final history state token, as a float64 pair."""
    tokens = _assemble(prompt, history, policy.stats, policy.store.dtype,
                       with_z=policy.with_z)
    preds = policy.forward(tokens, train_flag=False)
    return preds.data[0, -1].astype(np.float64)


def get_prompt(demo, wm, k, complementary, rng):
    """k-step segment from a uniformly drawn demo trajectory: the window the
    world model explains worst when complementary, else a uniform window."""
    COUNTERS["get_prompt"] += 1
    if not demo:
        return EMPTY_PROMPT
    tr = demo[int(rng.integers(0, len(demo)))]
    span = min(k, len(tr))
    if complementary:
        j = select_segment(tr, span, wm)
    else:
        j = int(rng.integers(0, len(tr) - span + 1))
    steps = tr.steps[j:j + span]
    return PromptSegment(tuple(tr.rtg[j:j + span]),
                         tuple(st.s for st in steps),
                         tuple(st.a for st in steps),
                         tuple(st.t for st in steps))


def build_demos(dataset, top_m=5):
    """Per-task demo pools: the top_m trajectories by return."""
    return {task.task_id: build_demo(dataset, task.task_id, top_m)
            for task in dataset.tasks}


class _BatchIndex:
    """Flattened, zero-padded array views of one dataset (plus its demo
    pools) for vectorized batch assembly. States are stored normalized, z
    comes from the frozen encoder, and complementary prompt windows are
    scored once per demo trajectory since select_segment is deterministic."""

    def __init__(self, dataset, demos, wm, k, use_prompt, complementary,
                 with_z):
        mean = dataset.stats.mean_array
        std = dataset.stats.std_array
        pools = [dataset.trajectories[t.task_id] for t in dataset.tasks]
        flat = [tr for pool in pools for tr in pool]
        self.t_count = np.array([len(p) for p in pools])
        if (self.t_count == 0).any():
            raise ValueError("task without trajectories")
        self.t_offset = np.concatenate(([0], np.cumsum(self.t_count)[:-1]))
        self.lens = np.array([len(tr) for tr in flat])
        N, L = len(flat), int(self.lens.max())
        self.S = np.zeros((N, L, STATE_DIM), np.float32)
        self.A = np.zeros((N, L, ACT_DIM), np.float32)
        self.R = np.zeros((N, L), np.float32)
        self.Z = np.zeros((N, L, Z_DIM), np.float32) if with_z else None
        for i, tr in enumerate(flat):
            n = len(tr)
            self.S[i, :n] = (tr.states - mean) / std
            self.A[i, :n] = tr.actions
            self.R[i, :n] = tr.rtg_array
            if with_z:
                self.Z[i, :n] = wm.encode_trajectory(tr)
        if not use_prompt:
            return
        dpools = [demos[t.task_id] for t in dataset.tasks]
        dflat = [tr for pool in dpools for tr in pool]
        self.d_count = np.array([len(p) for p in dpools])
        if (self.d_count == 0).any():
            raise ValueError("task without demo trajectories")
        self.d_len = np.array([len(tr) for tr in dflat])
        if (self.d_len < k).any():
            raise ValueError("demo trajectory shorter than prompt length")
        self.d_offset = np.concatenate(([0], np.cumsum(self.d_count)[:-1]))
        M, DL = len(dflat), int(self.d_len.max())
        self.dS = np.zeros((M, DL, STATE_DIM), np.float32)
        self.dA = np.zeros((M, DL, ACT_DIM), np.float32)
        self.dR = np.zeros((M, DL), np.float32)
        self.dT = np.zeros((M, DL), np.int64)
        for i, tr in enumerate(dflat):
            n = len(tr)
            self.dS[i, :n] = (tr.states - mean) / std
            self.dA[i, :n] = tr.actions
            self.dR[i, :n] = tr.rtg_array
            self.dT[i, :n] = [st.t for st in tr.steps]
        self.jbest = None
        if complementary:
            self.jbest = np.array([select_segment(tr, k, wm)
                                   for tr in dflat])


_INDEX_CACHE = {}


def _batch_index(dataset, demos, wm, k, use_prompt, complementary, with_z):
    """Memoized _BatchIndex lookup. Keys carry object ids, so entries also
    hold weakrefs that are checked against the live objects: an id reused
    after garbage collection must not resurrect a stale index."""
    demo_sig = tuple(sorted((tid, tuple(map(id, pool)))
                            for tid, pool in demos.items()))
    key = (id(dataset), id(wm), demo_sig, k, use_prompt, complementary,
           with_z)
    hit = _INDEX_CACHE.get(key)
    if hit is not None:
        ds_ref, wm_ref, idx = hit
        if ds_ref() is dataset and (wm is None or wm_ref() is wm):
            return idx
    idx = _BatchIndex(dataset, demos, wm, k, use_prompt, complementary,
                      with_z)
    wm_ref = (lambda: None) if wm is None else weakref.ref(wm)
    _INDEX_CACHE[key] = (weakref.ref(dataset), wm_ref, idx)
    return idx


def sample_mdt_batch(dataset, demos, wm, config, rng):
    """One training batch: per item draw task -> trajectory -> window start
    uniformly, right-truncate the K-step window at the episode end, left-pad
    to K, and attach a prompt from the task's demo pool. Returns (tokens,
    action targets [B,K,ACT_DIM]). Draws are batched: one uniform vector per
    decision level rather than per-item interleaving."""
    K, k, B = config.K, config.k, config.batch_size
    use_prompt = not config.no_prompt
    with_z = not config.no_context
    f32 = np.float32
    k_eff = k if use_prompt else 0
    idx = _batch_index(dataset, demos, wm, k, use_prompt,
                       not config.no_complementary, with_z)

    ti = rng.integers(0, len(idx.t_count), size=B)
    tj = idx.t_offset[ti] + rng.integers(0, idx.t_count[ti])
    si = rng.integers(0, idx.lens[tj])
    cols = np.arange(K)[None, :]
    lo = (K - np.minimum(K, idx.lens[tj] - si))[:, None]   # left-pad offset
    real_hist = cols >= lo
    pos = np.where(real_hist, si[:, None] + cols - lo, 0)
    rows = tj[:, None]
    keep2 = real_hist[:, :, None]
    s = idx.S[rows, pos] * keep2
    a = idx.A[rows, pos] * keep2
    rtg = (idx.R[rows, pos] * real_hist)[:, :, None]
    if with_z:
        z = idx.Z[rows, pos] * keep2
    else:
        z = np.zeros((B, K, Z_DIM), f32)
    ts_hist = pos.astype(np.int64)
    targets = a.copy()

    if use_prompt:
        COUNTERS["get_prompt"] += B
        di = rng.integers(0, idx.d_count[ti])
        dr = idx.d_offset[ti] + di
        if idx.jbest is not None:
            j = idx.jbest[dr]
        else:
            j = rng.integers(0, idx.d_len[dr] - k + 1)
        pj = j[:, None] + np.arange(k)[None, :]
        drow = dr[:, None]
        p_rtg = idx.dR[drow, pj][:, :, None]
        p_s = idx.dS[drow, pj]
        p_a = idx.dA[drow, pj]
        ts_p = idx.dT[drow, pj]
    else:
        p_rtg = np.zeros((B, 0, 1), f32)
        p_s = np.zeros((B, 0, STATE_DIM), f32)
        p_a = np.zeros((B, 0, ACT_DIM), f32)
        ts_p = np.zeros((B, 0), np.int64)

    g = 4 if with_z else 3
    timesteps = np.concatenate([np.repeat(ts_p, 3, axis=1),
                                np.repeat(ts_hist, g, axis=1)], axis=1)
    real = np.concatenate([np.ones((B, 3 * k_eff), bool),
                           np.repeat(real_hist, g, axis=1)], axis=1)
    tokens = TokenSequence(k_eff, K, with_z, p_rtg, p_s, p_a, z, rtg, s, a,
                           timesteps, real, real_hist.astype(f32))
    return tokens, targets


def training_step(policy, dataset, demos, wm, config, rng, drop_rng=None):
    """Sample a batch, take one clipped AdamW step, return the loss."""
    tokens, targets = sample_mdt_batch(dataset, demos, wm, config, rng)
    loss = mdt_loss(policy, tokens, targets,
                    train_flag=config.dropout > 0.0,
                    rng=drop_rng if drop_rng is not None else rng)
    nn.backward(loss)
    grads = policy.drain_grads()
    nn.adam_step(policy.store, grads, base_lr=config.lr,
                 warmup_steps=config.warmup_steps,
                 grad_clip=config.grad_clip,
                 weight_decay=config.weight_decay)
    return float(loss.data)


def train_policy(dataset, wm, config, engine="fast", log_every=100,
                 top_m=5):
    """Full policy training run; returns (Policy, curve of (step, loss)).

    engine "fast" runs the fused low-precision trainer; "reference" runs the
    float32 tape engine (slow, used for small configs and parity tests)."""
    if config.no_context and config.no_prompt:
        wm = None            # plain DT never reads the world model
    demos = build_demos(dataset, top_m) if not config.no_prompt else {}
    store = init_policy_params(config.seed)
    policy = Policy(store, dataset.stats, config.dropout,
                    with_z=not config.no_context)
    rng = rng_stream(config.seed, STREAM_MDT_BATCH)
    drop_rng = rng_stream(config.seed, STREAM_MDT_DROPOUT)
    curve = []
    if engine == "fast":
        from .nn.fastkernel import FastTrainer
        trainer = FastTrainer(policy, config)
        for step in range(config.training_steps):
            tokens, targets = sample_mdt_batch(dataset, demos, wm, config,
                                               rng)
            loss = trainer.step(tokens, targets, drop_rng)
            if step % log_every == 0 or step == config.training_steps - 1:
                curve.append((step, loss))
        trainer.export()
    elif engine == "reference":
        for step in range(config.training_steps):
            loss = training_step(policy, dataset, demos, wm, config, rng,
                                 drop_rng)
            if step % log_every == 0 or step == config.training_steps - 1:
                curve.append((step, loss))
    else:
        raise ValueError(f"unknown engine {engine!r}")
    return policy, curve
