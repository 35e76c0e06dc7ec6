"""Context-aware world model: a GRU encoder mapping h-step experience windows
to 16-dim task representations z, plus reward and next-state decoder MLPs
conditioned on z. Also the prediction-error segment scoring used to pick
prompts: the k-step window of a trajectory the world model explains worst.

States are normalized with the training dataset statistics everywhere; the
transition decoder predicts the normalized next state; rewards stay raw.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .core import (STREAM_WM_BATCH, STREAM_WM_INIT, normalize_state,
                   rng_stream, stats_from_states)

Z_DIM = 16
GRU_HIDDEN = 128
DECODER_HIDDEN = 128
CTX_TOKEN = 5          # [s(2), a(2), r(1)]


@dataclass(frozen=True)
class ContextWindow:
    """h (s, a, r) triples leading up to t plus the state at t, left
    zero-padded when the episode is younger than h steps."""
    tokens: tuple      # (h+1, 5) rows, raw (unnormalized) values
    pad_mask: tuple    # True where the row is padding

    def __post_init__(self):
        if len(self.tokens) != len(self.pad_mask):
            raise ValueError("pad_mask length mismatch")


@dataclass(frozen=True)
class TaskRepresentation:
    z: tuple

    def __post_init__(self):
        if len(self.z) != Z_DIM or not all(np.isfinite(self.z)):
            raise ValueError("z must be a finite 16-vector")


def build_context(trajectory, t, h):
    """Window of steps max(0, t-h)..t-1 plus s_t; never crosses the episode
    start (earlier rows are zero-padded)."""
    if not 0 <= t < len(trajectory):
        raise IndexError(f"t={t} outside trajectory of length {len(trajectory)}")
    rows, mask = [], []
    for i in range(t - h, t):
        if i < 0:
            rows.append((0.0,) * CTX_TOKEN)
            mask.append(True)
        else:
            st = trajectory.steps[i]
            rows.append(st.s + st.a + (st.r,))
            mask.append(False)
    rows.append(trajectory.steps[t].s + (0.0, 0.0, 0.0))
    mask.append(False)
    return ContextWindow(tuple(rows), tuple(mask))


def context_array(trajectory, t, h, stats):
    """build_context as a normalized float32 array [h+1, 5]."""
    cw = build_context(trajectory, t, h)
    arr = np.array(cw.tokens, dtype=np.float64)
    real = ~np.array(cw.pad_mask)
    arr[real, :2] = (arr[real, :2] - stats.mean_array) / stats.std_array
    return arr.astype(np.float32)


def init_world_model_params(seed, dtype=np.float32):
    store = nn.ParameterStore(dtype=dtype)
    rng = rng_stream(seed, STREAM_WM_INIT)

    def lin(name, fan_in, fan_out):
        store.add(f"{name}.W", nn.init_linear_weight(rng, fan_in, fan_out,
                                                     dtype))
        store.add(f"{name}.b", np.zeros(fan_out, dtype=dtype))

    din = CTX_TOKEN + GRU_HIDDEN
    for gate in "run":
        lin(f"enc.gru.{gate}", din, GRU_HIDDEN)
    lin("enc.head.1", GRU_HIDDEN, GRU_HIDDEN)
    lin("enc.head.2", GRU_HIDDEN, Z_DIM)
    for dec, dout in (("rdec", 1), ("tdec", 2)):
        lin(f"{dec}.1", 2 + 2 + Z_DIM, DECODER_HIDDEN)
        lin(f"{dec}.2", DECODER_HIDDEN, DECODER_HIDDEN)
        lin(f"{dec}.3", DECODER_HIDDEN, dout)
    return store


class WorldModel:
    """Frozen-or-training bundle of encoder/decoder parameters plus the
    normalization statistics they were trained with."""

    def __init__(self, store, stats, h):
        self.store = store
        self.stats = stats
        self.h = h
        self._lp = nn.LiveParams(store)
        self._z_cache = {}
        self._err_cache = {}

    # -- forward pieces (tape tensors so training can backprop) --------------

    def _t(self, name):
        return self._lp.t(name)

    def drain_grads(self):
        """Collect per-parameter grads from the last backward and reset."""
        return self._lp.drain()

    def _gru_params(self):
        return {f"W_{g}": self._t(f"enc.gru.{g}.W") for g in "run"} | {
                f"b_{g}": self._t(f"enc.gru.{g}.b") for g in "run"}

    def encode_tokens(self, tokens):
        """tokens: [B, h+1, 5] normalized array -> z Tensor [B, 16]."""
        B = tokens.shape[0]
        gp = self._gru_params()
        hstate = nn.Tensor(np.zeros((B, GRU_HIDDEN), dtype=tokens.dtype))
        for i in range(tokens.shape[1]):
            hstate = nn.gru_cell(nn.Tensor(tokens[:, i, :]), hstate, gp)
        hid = nn.relu(nn.linear(hstate, self._t("enc.head.1.W"),
                                self._t("enc.head.1.b")))
        return nn.linear(hid, self._t("enc.head.2.W"), self._t("enc.head.2.b"))

    def _decode(self, prefix, s_norm, a, z):
        x = nn.concat([s_norm, a, z], axis=-1)
        hid = nn.relu(nn.linear(x, self._t(f"{prefix}.1.W"),
                                self._t(f"{prefix}.1.b")))
        hid = nn.relu(nn.linear(hid, self._t(f"{prefix}.2.W"),
                                self._t(f"{prefix}.2.b")))
        return nn.linear(hid, self._t(f"{prefix}.3.W"),
                         self._t(f"{prefix}.3.b"))

    def predict_tensors(self, s_norm, a, z):
        return (self._decode("rdec", s_norm, a, z),
                self._decode("tdec", s_norm, a, z))

    # -- plain-array conveniences ---------------------------------------------

    def encode(self, context_window):
        """ContextWindow -> TaskRepresentation."""
        arr = np.array(context_window.tokens, dtype=np.float64)
        real = ~np.array(context_window.pad_mask)
        arr[real, :2] = (arr[real, :2] - self.stats.mean_array) \
            / self.stats.std_array
        z = self.encode_tokens(arr.astype(np.float32)[None])
        return TaskRepresentation(tuple(float(v) for v in z.data[0]))

    def predict(self, s, a, z):
        """Raw state in, (reward, normalized next state) out."""
        s_norm = normalize_state(s, self.stats).astype(np.float32)
        r, sn = self.predict_tensors(
            nn.Tensor(s_norm[None]),
            nn.Tensor(np.asarray(a, dtype=np.float32)[None]),
            nn.Tensor(np.asarray(z, dtype=np.float32)[None]))
        return float(r.data[0, 0]), sn.data[0].astype(np.float64)

    def encode_trajectory(self, trajectory):
        """Per-step z for every t of one trajectory, [len, 16] float32.
        Cached per trajectory: the model is frozen once prompts are scored."""
        z = self._z_cache.get(trajectory)
        if z is None:
            tokens = np.stack([context_array(trajectory, t, self.h, self.stats)
                               for t in range(len(trajectory))])
            z = self.encode_tokens(tokens).data
            self._z_cache[trajectory] = z
        return z

    def step_errors(self, trajectory):
        """Per-step prediction errors (reward + normalized state terms),
        cached per trajectory so window scans reuse one computation."""
        e = self._err_cache.get(trajectory)
        if e is None:
            z = self.encode_trajectory(trajectory)
            s_norm = ((trajectory.states - self.stats.mean_array)
                      / self.stats.std_array).astype(np.float32)
            a = trajectory.actions.astype(np.float32)
            r_hat, sn_hat = self.predict_tensors(
                nn.Tensor(s_norm), nn.Tensor(a), nn.Tensor(z))
            sn_true = ((trajectory.next_states - self.stats.mean_array)
                       / self.stats.std_array)
            err_r = (trajectory.rewards
                     - r_hat.data[:, 0].astype(np.float64)) ** 2
            err_s = ((sn_true - sn_hat.data.astype(np.float64)) ** 2).sum(axis=1)
            e = err_r + err_s
            self._err_cache[trajectory] = e
        return e


def wm_loss(wm, batch):
    """batch: (tokens [B,h+1,5] normalized, s_norm [B,2], a [B,2], r [B],
    s_next_norm [B,2]); returns (loss Tensor, reward part, state part)."""
    tokens, s_norm, a, r, sn = batch
    z = wm.encode_tokens(tokens)
    r_hat, sn_hat = wm.predict_tensors(nn.Tensor(s_norm), nn.Tensor(a), z)
    B = r.shape[0]
    dr = r_hat - nn.Tensor(r.reshape(-1, 1))
    ds = sn_hat - nn.Tensor(sn)
    loss_r = (dr * dr).sum() * (1.0 / B)
    loss_s = (ds * ds).sum() * (1.0 / B)
    return loss_r + loss_s, loss_r, loss_s


class WmSampler:
    """Pre-flattened (trajectory, step) arrays for fast batch draws.
    Context windows are gathered from per-trajectory token rows with h
    leading zero rows standing in for the pre-episode padding."""

    def __init__(self, datasets, stats, h):
        trajs = [tr for ds in datasets for tr in ds.all_trajectories()]
        if not trajs:
            raise ValueError("no trajectories to sample from")
        self.h = h
        L = max(len(tr) for tr in trajs)
        n = len(trajs)
        f32 = np.float32
        self.lens = np.array([len(tr) for tr in trajs])
        self.tok = np.zeros((n, h + L, CTX_TOKEN), f32)
        self.s_norm = np.zeros((n, L, 2), f32)
        self.a = np.zeros((n, L, 2), f32)
        self.r = np.zeros((n, L), f32)
        self.sn_norm = np.zeros((n, L, 2), f32)
        for i, tr in enumerate(trajs):
            m = len(tr)
            s_norm = (tr.states - stats.mean_array) / stats.std_array
            self.s_norm[i, :m] = s_norm
            self.a[i, :m] = tr.actions
            self.r[i, :m] = tr.rewards
            self.sn_norm[i, :m] = (tr.next_states - stats.mean_array) \
                / stats.std_array
            self.tok[i, h:h + m, 0:2] = s_norm
            self.tok[i, h:h + m, 2:4] = tr.actions
            self.tok[i, h:h + m, 4] = tr.rewards

    def draw(self, rng, batch_size):
        bi = rng.integers(0, len(self.lens), size=batch_size)
        t = rng.integers(0, self.lens[bi])
        win = self.tok[bi[:, None], t[:, None] + np.arange(self.h)[None, :]]
        terminal = np.zeros((batch_size, 1, CTX_TOKEN), np.float32)
        terminal[:, 0, 0:2] = self.s_norm[bi, t]
        tokens = np.concatenate([win, terminal], axis=1)
        return (tokens, self.s_norm[bi, t], self.a[bi, t], self.r[bi, t],
                self.sn_norm[bi, t])


def train_world_model(datasets, config, log_every=100):
    """Adam on the summed reward+transition prediction error; returns the
    trained WorldModel and the (step, loss_reward, loss_state) curve."""
    if not isinstance(datasets, (list, tuple)):
        datasets = [datasets]
    if not datasets or not any(ds.all_trajectories() for ds in datasets):
        raise ValueError("no training data")
    if len(datasets) == 1:
        stats = datasets[0].stats
    else:
        stats = stats_from_states(np.concatenate(
            [tr.states for ds in datasets for tr in ds.all_trajectories()]))
    store = init_world_model_params(config.seed)
    wm = WorldModel(store, stats, config.h)
    sampler = WmSampler(datasets, stats, config.h)
    rng = rng_stream(config.seed, STREAM_WM_BATCH)
    curve = []
    for step in range(config.wm_steps):
        batch = sampler.draw(rng, config.batch_size)
        loss, loss_r, loss_s = wm_loss(wm, batch)
        nn.backward(loss)
        grads = wm.drain_grads()
        try:
            nn.adam_step(store, grads, base_lr=config.wm_lr,
                         warmup_steps=config.warmup_steps,
                         grad_clip=config.grad_clip,
                         weight_decay=config.weight_decay)
        except nn.NonFiniteGradient as e:
            e.partial_params = dict(store.params)
            e.curve = curve
            raise
        if step % log_every == 0 or step == config.wm_steps - 1:
            curve.append((step, float(loss_r.data), float(loss_s.data)))
    return wm, curve


def segment_error(trajectory, j, k, wm):
    """Summed per-step prediction error over the k-step window [j, j+k-1]."""
    if j < 0 or j + k > len(trajectory):
        raise IndexError(f"window [{j}, {j}+{k}) overflows length "
                         f"{len(trajectory)}")
    return float(wm.step_errors(trajectory)[j:j + k].sum())


def select_segment(trajectory, k, wm):
    """argmax_j segment_error, ties to the smallest j; trajectories shorter
    than k collapse to j=0 (the whole trajectory is the segment)."""
    n = len(trajectory)
    if n < k:
        return 0
    errs = wm.step_errors(trajectory)
    sums = np.array([errs[j:j + k].sum() for j in range(n - k + 1)])
    return int(np.argmax(sums))


def goal_probe_r2(wm, train_ds, test_ds):
    """Fit a linear map from per-task mean z to the task goal on the train
    dataset; return R^2 on the test dataset's tasks."""
    def feats(ds):
        X, Y = [], []
        for task in ds.tasks:
            zs = [wm.encode_trajectory(tr)[-1]
                  for tr in ds.trajectories[task.task_id]]
            X.append(np.mean(zs, axis=0))
            Y.append(task.goal)
        return np.asarray(X, np.float64), np.asarray(Y, np.float64)

    Xtr, Ytr = feats(train_ds)
    Xte, Yte = feats(test_ds)
    A = np.concatenate([Xtr, np.ones((len(Xtr), 1))], axis=1)
    coef, *_ = np.linalg.lstsq(A, Ytr, rcond=None)
    pred = np.concatenate([Xte, np.ones((len(Xte), 1))], axis=1) @ coef
    ss_res = ((Yte - pred) ** 2).sum()
    ss_tot = ((Yte - Yte.mean(axis=0)) ** 2).sum()
    return 1.0 - ss_res / ss_tot
