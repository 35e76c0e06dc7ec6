"""Fused low-precision training engine for the transformer policy.

Computes the same forward/backward as the float32 tape engine but in bfloat16
with float32 master weights, with the layer-norm affine parameters and the
inverted-dropout scale folded algebraically into the adjacent matmuls, and a
fused AdamW update. The modality embeddings run as one block-diagonal matmul
and the q/k/v projections are fused except in the last block, whose queries
are trimmed to the loss-bearing state columns. The step function is compiled
once per token layout (with a jit-trace fallback); each training step is then
a gradient call and an update call plus drawing the dropout masks. The
gradient norm is checked between the two calls so a non-finite batch aborts
before any optimizer state is touched, like the tape engine.
"""
from __future__ import annotations

import ctypes
import warnings

import numpy as np
import torch

from ..metadt import attention_bias
from .optim import NonFiniteGradient

torch.set_num_threads(1)
aten = torch.ops.aten
BF = torch.bfloat16

_tuned = False


def _tune_allocator():
    """Keep large allocations in the malloc arena instead of mmap so the
    pages stay warm across steps; the step allocates tens of MB of
    short-lived tensors and page faults otherwise dominate."""
    global _tuned
    if _tuned:
        return
    _tuned = True
    torch.set_flush_denormal(True)   # subnormal softmax tails stall the FPU
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)    # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)    # M_TRIM_THRESHOLD
    except Exception:
        pass


BF16_ONE = np.uint16(0x3F80)         # bit pattern of bfloat16 1.0


@torch.jit.script
def _ln_f(x: torch.Tensor, d: int):
    return torch.native_layer_norm(x, [d], None, None, 1e-5)


@torch.jit.script
def _ln_b(dy: torch.Tensor, x: torch.Tensor, mu: torch.Tensor,
          rs: torch.Tensor, d: int) -> torch.Tensor:
    return torch.ops.aten.native_layer_norm_backward(
        dy, x, [d], mu, rs, None, None, [True, False, False])[0]


@torch.jit.script
def _sm_b(dy: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return torch.ops.aten._softmax_backward_data(dy, y, -1, torch.bfloat16)


@torch.jit.script
def _th_b(dy: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    return torch.ops.aten.threshold_backward(dy, r, 0.0)


def _specs(D, z_dim, state_dim, act_dim, horizon, n_blocks, ffn_mult):
    """Flat-buffer layout: canonical parameter names, with the attention k/v
    projections fused column-wise, the q/k/v biases fused, and the second
    feed-forward matrix stored transposed."""
    specs = [("emb.z.W", (z_dim, D)), ("emb.rtg.W", (1, D)),
             ("emb.s.W", (state_dim, D)), ("emb.a.W", (act_dim, D)),
             ("emb.t", (horizon, D))]
    for i in range(n_blocks):
        p = f"blk{i}."
        specs += [(p + "ln1.g", (D,)), (p + "ln1.b", (D,)),
                  (p + "attn.W_q", (D, D)), (p + "attn.Wkv", (D, 2 * D)),
                  (p + "attn.bqkv", (3 * D,)),
                  (p + "attn.W_p", (D, D)), (p + "attn.b_p", (D,)),
                  (p + "ln2.g", (D,)), (p + "ln2.b", (D,)),
                  (p + "ffn.W1", (D, ffn_mult * D)),
                  (p + "ffn.b1", (ffn_mult * D,)),
                  (p + "ffn.W2t", (D, ffn_mult * D)),
                  (p + "ffn.b2", (D,))]
    specs += [("final.ln.g", (D,)), ("final.ln.b", (D,)),
              ("head.W", (D, act_dim)), ("head.b", (act_dim,))]
    return specs


def _to_flat(store, specs):
    parts = []
    for name, shape in specs:
        if name.endswith("attn.Wkv"):
            p = name[:-3]
            arr = np.concatenate([store.params[p + "W_k"],
                                  store.params[p + "W_v"]], axis=1)
        elif name.endswith("attn.bqkv"):
            p = name[:-4]
            arr = np.concatenate([store.params[p + "b_q"],
                                  store.params[p + "b_k"],
                                  store.params[p + "b_v"]])
        elif name.endswith("ffn.W2t"):
            arr = store.params[name[:-3] + "W2"].T
        else:
            arr = store.params[name]
        if arr.shape != shape:
            raise ValueError(f"{name}: {arr.shape} != {shape}")
        parts.append(np.ascontiguousarray(arr, dtype=np.float32).reshape(-1))
    return torch.from_numpy(np.concatenate(parts))


def _from_flat(flat, store, specs):
    buf = flat.numpy()
    off = 0
    for name, shape in specs:
        n = int(np.prod(shape))
        arr = buf[off:off + n].reshape(shape)
        off += n
        if name.endswith("attn.Wkv"):
            p = name[:-3]
            D = shape[0]
            store.params[p + "W_k"][:] = arr[:, :D]
            store.params[p + "W_v"][:] = arr[:, D:]
        elif name.endswith("attn.bqkv"):
            p = name[:-4]
            D = shape[0] // 3
            store.params[p + "b_q"][:] = arr[:D]
            store.params[p + "b_k"][:] = arr[D:2 * D]
            store.params[p + "b_v"][:] = arr[2 * D:]
        elif name.endswith("ffn.W2t"):
            store.params[name[:-3] + "W2"][:] = arr.T
        else:
            store.params[name][:] = arr


class FastTrainer:
    """Owns the float32 master copy of one policy's parameters plus the Adam
    state, and the compiled step for one token layout. export() writes the
    trained weights back into the policy's parameter store."""

    def __init__(self, policy, config):
        _tune_allocator()
        store = policy.store
        self.policy = policy
        self.config = config
        D = store.params["emb.t"].shape[1]
        self.D = D
        self.z_dim = store.params["emb.z.W"].shape[0]
        self.state_dim = store.params["emb.s.W"].shape[0]
        self.act_dim = store.params["emb.a.W"].shape[0]
        horizon = store.params["emb.t"].shape[0]
        self.n_blocks = sum(1 for n in store.params if n.endswith("ln1.g"))
        ffn_mult = store.params["blk0.ffn.W1"].shape[1] // D
        self.specs = _specs(D, self.z_dim, self.state_dim, self.act_dim,
                            horizon, self.n_blocks, ffn_mult)

        self.B = config.batch_size
        self.K = config.K
        self.k = 0 if config.no_prompt else config.k
        self.with_z = not config.no_context
        self.g = 4 if self.with_z else 3
        self.hw = (self.z_dim if self.with_z else 0) + 1 + \
            self.state_dim + self.act_dim
        self.pw = 1 + self.state_dim + self.act_dim
        self.T = 3 * self.k + self.g * self.K
        self.scol = torch.arange(3 * self.k + self.g - 2, self.T, self.g)
        self.cut = int(round(256 * config.dropout))
        self.dscale = 256.0 / (256.0 - self.cut)
        self.n_sites = 1 + 2 * self.n_blocks

        self.flat = _to_flat(store, self.specs)
        self.mbuf = torch.zeros_like(self.flat)
        self.vbuf = torch.zeros_like(self.flat)
        self.step_t = torch.zeros(1)
        if self.cut:
            shape = (self.n_sites, self.B, self.T, self.D)
            self._keepbuf = np.empty(shape, dtype=bool)
            self._maskbuf = np.empty(shape, dtype=np.uint16)
            self._masks_bf = torch.from_numpy(self._maskbuf).view(BF)
        self._build()

    # ------------------------------------------------------------ building --

    def _example_inputs(self):
        B, K, k, T = self.B, self.K, self.k, self.T
        data = [torch.zeros(B, K, self.hw)]
        if k:
            data.append(torch.zeros(B, k, self.pw))
        data += [torch.zeros(B, T, dtype=torch.int64),
                 torch.zeros(B, T, T),
                 torch.zeros(B, K, self.act_dim), torch.ones(B, K, 1)]
        return tuple(data) + tuple(self._ones_masks())

    def _ones_masks(self):
        if self.cut == 0:
            return [torch.ones(1, 1, 1, dtype=BF)] * self.n_sites
        return [torch.ones(self.B, self.T, self.D, dtype=BF)
                for _ in range(self.n_sites)]

    def _build(self):
        grad_fn = self._build_grad()
        update_fn = self._build_update()
        ex = (self.flat,) + self._example_inputs()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                self._grad = torch.compile(grad_fn, dynamic=False)
                self._grad(*ex)
            except Exception:
                self._grad = torch.jit.trace(grad_fn, ex, check_trace=False)
        self._update = update_fn

    def _build_grad(self):
        B, K, k, T, D = self.B, self.K, self.k, self.T, self.D
        NB, g = self.n_blocks, self.g
        Zd, Sd, Ad = self.z_dim, self.state_dim, self.act_dim
        specs, scol = self.specs, self.scol
        NPOS = K
        DSCALE = self.dscale
        scale_attn = D ** -0.5
        bound = 0.1
        sizes = [int(np.prod(s)) for _, s in specs]
        offs = np.cumsum([0] + sizes).tolist()
        idx = {n: i for i, (n, _) in enumerate(specs)}
        with_z = self.with_z
        with_drop = self.cut > 0
        h0 = 3 * k            # first history column
        hw, pw = self.hw, self.pw

        def grad_fn(flat, *args):
            it = iter(args)
            hcat = next(it)
            if k:
                pcat = next(it)
            tsid, attbias, tgt, lmask = next(it), next(it), next(it), next(it)
            emask = next(it)
            m1s = [next(it) for _ in range(NB)]
            m2s = [next(it) for _ in range(NB)]

            fb = flat.bfloat16()
            P = [fb[o0:o1].view(s) for (_, s), o0, o1
                 in zip(specs, offs[:-1], offs[1:])]

            def p(nm):
                return P[idx[nm]]

            grads = [torch.zeros(0)] * len(P)
            if with_drop:
                m1s[-1] = m1s[-1].index_select(1, scol)
                m2s[-1] = m2s[-1].index_select(1, scol)

            Wr, Ws, Wa = p("emb.rtg.W"), p("emb.s.W"), p("emb.a.W")
            Wt = p("emb.t") * DSCALE
            mods = ([p("emb.z.W"), Wr, Ws, Wa] if with_z else [Wr, Ws, Wa])
            Wh = torch.block_diag(*mods) * DSCALE
            hb = hcat.view(B * K, hw).bfloat16()
            xh = (hb @ Wh).view(B, g * K, D)
            if k:
                Wp_blk = torch.block_diag(Wr, Ws, Wa) * DSCALE
                pb = pcat.view(B * k, pw).bfloat16()
                xp = (pb @ Wp_blk).view(B, 3 * k, D)
                x = torch.cat([xp, xh], 1)
            else:
                x = xh
            et = Wt.index_select(0, tsid.view(-1)).view(B, T, D)
            x = x.add_(et).mul_(emask)
            attmask = attbias.bfloat16()

            caches = []
            for i in range(NB):
                pre = f"blk{i}."
                g1, o1 = p(pre + "ln1.g"), p(pre + "ln1.b")
                Wq = p(pre + "attn.W_q")
                Wkv, bqkv = p(pre + "attn.Wkv"), p(pre + "attn.bqkv")
                Wp_, bp_ = p(pre + "attn.W_p"), p(pre + "attn.b_p")
                g2, o2 = p(pre + "ln2.g"), p(pre + "ln2.b")
                W1, bff1 = p(pre + "ffn.W1"), p(pre + "ffn.b1")
                W2t, bff2 = p(pre + "ffn.W2t"), p(pre + "ffn.b2")
                Wq_f = Wq * g1.unsqueeze(1)
                Wkv_f = Wkv * g1.unsqueeze(1)
                bq_f = bqkv[:D] + o1 @ Wq
                bkv_f = bqkv[D:] + o1 @ Wkv
                W1_f = W1 * g2.unsqueeze(1)
                b1_f = bff1 + o2 @ W1
                Wp_s = Wp_ * DSCALE
                bp_s = bp_ * DSCALE
                W2t_s = W2t * DSCALE
                bff2_s = bff2 * DSCALE

                h1, mu1, rs1 = _ln_f(x, D)
                h2d = h1.view(B * T, D)
                last = i == NB - 1
                if last:
                    h1s = h1.index_select(1, scol).reshape(B * NPOS, D)
                    q = torch.addmm(bq_f, h1s, Wq_f).view(B, NPOS, D)
                    kv = torch.addmm(bkv_f, h2d, Wkv_f).view(B, T, 2 * D)
                    kk = kv[:, :, :D].contiguous()
                    vv = kv[:, :, D:].contiguous()
                else:
                    Wqkv_f = torch.cat([Wq_f, Wkv_f], 1)
                    bqkv_f = torch.cat([bq_f, bkv_f])
                    qkv = torch.addmm(bqkv_f, h2d, Wqkv_f).view(B, T, 3 * D)
                    q = qkv[:, :, :D].contiguous()
                    kk = qkv[:, :, D:2 * D].contiguous()
                    vv = qkv[:, :, 2 * D:].contiguous()
                amask = attmask.index_select(1, scol) if last else attmask
                att = torch.baddbmm(amask, q, kk.transpose(1, 2),
                                    alpha=scale_attn)
                aw = torch.softmax(att, -1)
                y = aw @ vv
                Tq = NPOS if last else T
                proj = torch.addmm(bp_s, y.reshape(B * Tq, D),
                                   Wp_s).view(B, Tq, D)
                xs = x.index_select(1, scol) if last else x
                x1 = torch.addcmul(xs, proj, m1s[i])
                h2, mu2, rs2 = _ln_f(x1, D)
                f1 = torch.addmm(b1_f, h2.view(B * Tq, D), W1_f)
                r = f1.relu_()
                f2 = torch.addmm(bff2_s, r, W2t_s.t()).view(B, Tq, D)
                x2 = torch.addcmul(x1, f2, m2s[i])
                caches.append((x, h1, mu1, rs1, q, kk, vv, aw, y, x1, h2,
                               mu2, rs2, r, Wq_f, Wkv_f, W1_f, Wp_s, W2t_s))
                x = x2

            fg, fo = p("final.ln.g"), p("final.ln.b")
            hW, hbias = p("head.W"), p("head.b")
            hW_f = hW * fg.unsqueeze(1)
            hb_f = hbias + fo @ hW
            hf, muf, rsf = _ln_f(x, D)
            pred = torch.addmm(hb_f, hf.view(B * NPOS, D),
                               hW_f).view(B, NPOS, Ad)
            th = torch.tanh(pred.float())
            diff = (th * bound - tgt) * lmask
            denom = lmask.sum() * float(Ad)
            loss = (diff * diff).sum() / denom

            dpred = ((2.0 / denom) * diff * (1.0 - th * th)
                     * bound).bfloat16().view(B * NPOS, Ad)
            gHW_f = hf.view(B * NPOS, D).t() @ dpred
            ghb_f = dpred.sum(0)
            dhf = (dpred @ hW_f.t()).view(B, NPOS, D)
            dx = _ln_b(dhf, x, muf, rsf, D)
            grads[idx["head.W"]] = gHW_f * fg.unsqueeze(1) \
                + torch.outer(fo, ghb_f)
            grads[idx["head.b"]] = ghb_f
            grads[idx["final.ln.g"]] = (gHW_f * hW).sum(1)
            grads[idx["final.ln.b"]] = hW @ ghb_f

            for i in range(NB - 1, -1, -1):
                pre = f"blk{i}."
                g1, o1 = p(pre + "ln1.g"), p(pre + "ln1.b")
                Wq, Wkv = p(pre + "attn.W_q"), p(pre + "attn.Wkv")
                g2, o2 = p(pre + "ln2.g"), p(pre + "ln2.b")
                W1 = p(pre + "ffn.W1")
                (x_in, h1, mu1, rs1, q, kk, vv, aw, y, x1, h2, mu2, rs2, r,
                 Wq_f, Wkv_f, W1_f, Wp_s, W2t_s) = caches[i]
                last = i == NB - 1
                Tq = NPOS if last else T
                df2 = (dx * m2s[i]).view(B * Tq, D)
                gW2t_s = df2.t() @ r
                gbff2_s = df2.sum(0)
                dr = df2 @ W2t_s
                df1 = _th_b(dr, r)
                gW1_f = h2.view(B * Tq, D).t() @ df1
                gb1_f = df1.sum(0)
                dh2 = (df1 @ W1_f.t()).view(B, Tq, D)
                dx1 = _ln_b(dh2, x1, mu2, rs2, D).add_(dx)
                dproj = (dx1 * m1s[i]).view(B * Tq, D)
                gWp_s = y.reshape(B * Tq, D).t() @ dproj
                gbp_s = dproj.sum(0)
                dy = (dproj @ Wp_s.t()).view(B, Tq, D)
                daw = dy @ vv.transpose(1, 2)
                dv = aw.transpose(1, 2) @ dy
                ds = _sm_b(daw, aw)
                h1f = h1.view(B * T, D)
                if last:
                    dq = torch.bmm(ds, kk).mul_(scale_attn).view(B * NPOS, D)
                    dkT = torch.bmm(ds.transpose(1, 2), q).mul_(scale_attn)
                    dkv = torch.cat([dkT, dv], 2).view(B * T, 2 * D)
                    h1s = h1.index_select(1, scol).reshape(B * NPOS, D)
                    gWq_f = h1s.t() @ dq
                    gWkv_f = h1f.t() @ dkv
                    gbq_f = dq.sum(0)
                    gbkv_f = dkv.sum(0)
                    dh1 = (dkv @ Wkv_f.t()).view(B, T, D)
                    dh1.index_add_(1, scol, (dq @ Wq_f.t()).view(B, NPOS, D))
                else:
                    dq3 = torch.bmm(ds, kk).mul_(scale_attn)
                    dkT = torch.bmm(ds.transpose(1, 2), q).mul_(scale_attn)
                    dqkv = torch.cat([dq3, dkT, dv], 2).view(B * T, 3 * D)
                    Wqkv_f = torch.cat([Wq_f, Wkv_f], 1)
                    gWqkv_f = h1f.t() @ dqkv
                    gbqkv_f = dqkv.sum(0)
                    gWq_f = gWqkv_f[:, :D]
                    gWkv_f = gWqkv_f[:, D:]
                    gbq_f = gbqkv_f[:D]
                    gbkv_f = gbqkv_f[D:]
                    dh1 = (dqkv @ Wqkv_f.t()).view(B, T, D)
                dxi = _ln_b(dh1, x_in, mu1, rs1, D)
                if last:
                    dxi.index_add_(1, scol, dx1)
                else:
                    dxi = dxi.add_(dx1)
                dx = dxi
                grads[idx[pre + "attn.W_q"]] = gWq_f * g1.unsqueeze(1) \
                    + torch.outer(o1, gbq_f)
                grads[idx[pre + "attn.Wkv"]] = gWkv_f * g1.unsqueeze(1) \
                    + torch.outer(o1, gbkv_f)
                grads[idx[pre + "ln1.g"]] = (gWq_f * Wq).sum(1) \
                    + (gWkv_f * Wkv).sum(1)
                grads[idx[pre + "ln1.b"]] = Wq @ gbq_f + Wkv @ gbkv_f
                grads[idx[pre + "attn.bqkv"]] = torch.cat([gbq_f, gbkv_f])
                grads[idx[pre + "attn.W_p"]] = gWp_s * DSCALE
                grads[idx[pre + "attn.b_p"]] = gbp_s * DSCALE
                grads[idx[pre + "ln2.g"]] = (gW1_f * W1).sum(1)
                grads[idx[pre + "ln2.b"]] = W1 @ gb1_f
                grads[idx[pre + "ffn.W1"]] = gW1_f * g2.unsqueeze(1) \
                    + torch.outer(o2, gb1_f)
                grads[idx[pre + "ffn.b1"]] = gb1_f
                grads[idx[pre + "ffn.W2t"]] = gW2t_s * DSCALE
                grads[idx[pre + "ffn.b2"]] = gbff2_s * DSCALE

            dxe = dx * emask
            gET = torch.zeros(Wt.shape[0], D)
            gET.index_add_(0, tsid.view(-1), dxe.view(B * T, D).float())
            grads[idx["emb.t"]] = (gET * DSCALE).bfloat16()
            gWh = hb.t() @ dxe[:, h0:].reshape(B * K, g * D)
            zoff = Zd if with_z else 0
            if with_z:
                grads[idx["emb.z.W"]] = gWh[:Zd, :D] * DSCALE
            else:
                grads[idx["emb.z.W"]] = torch.zeros(Zd, D, dtype=BF)
            gWr = gWh[zoff:zoff + 1, (g - 3) * D:(g - 2) * D]
            gWs = gWh[zoff + 1:zoff + 3, (g - 2) * D:(g - 1) * D]
            gWa = gWh[zoff + 3:zoff + 5, (g - 1) * D:]
            if k:
                gWp_blk = pb.t() @ dxe[:, :h0].reshape(B * k, 3 * D)
                gWr = gWr + gWp_blk[0:1, :D]
                gWs = gWs + gWp_blk[1:3, D:2 * D]
                gWa = gWa + gWp_blk[3:5, 2 * D:]
            grads[idx["emb.rtg.W"]] = gWr * DSCALE
            grads[idx["emb.s.W"]] = gWs * DSCALE
            grads[idx["emb.a.W"]] = gWa * DSCALE

            gflat = torch.cat([t.reshape(-1) for t in grads]).float()
            return loss, gflat.norm(), gflat

        return grad_fn

    def _build_update(self):
        clip = float(self.config.grad_clip)
        lr = float(self.config.lr)
        warmup = float(self.config.warmup_steps)
        wd = float(self.config.weight_decay)

        def update_fn(flat, mbuf, vbuf, step_t, gflat, norm):
            gflat = gflat * (clip / torch.clamp(norm, min=clip))
            step_t.add_(1.0)
            lr_t = lr * torch.clamp(step_t / warmup, max=1.0)
            aten._fused_adamw_([flat], [gflat], [mbuf], [vbuf], [], [step_t],
                               lr=lr_t.reshape(()), beta1=0.9, beta2=0.999,
                               weight_decay=wd, eps=1e-8, amsgrad=False,
                               maximize=False)
            return step_t

        return update_fn

    # ----------------------------------------------------------- step / io --

    def _draw_masks(self, rng, real):
        """One u8 draw for all sites, thresholded per the shared dropout
        scheme and written as bfloat16 0/1 bit patterns; sites ordered
        embedding, then per block the attention and feed-forward residual
        masks. Padded positions are dropped from the embedding mask."""
        u = rng.integers(0, 256, size=(self.n_sites, self.B, self.T, self.D),
                         dtype=np.uint8)
        np.greater_equal(u, self.cut, out=self._keepbuf)
        self._keepbuf[0] &= real[:, :, None]
        np.multiply(self._keepbuf, BF16_ONE, out=self._maskbuf,
                    casting="unsafe")
        mt = self._masks_bf
        return [mt[0]] + [mt[i] for i in range(1, self.n_sites, 2)] + \
            [mt[i] for i in range(2, self.n_sites, 2)]

    def step(self, tokens, targets, drop_rng):
        """One fused training step on a sampled batch; returns the loss."""
        tq = tokens
        if self.with_z:
            hcat = np.concatenate([tq.z, tq.rtg, tq.s, tq.a], axis=2)
        else:
            hcat = np.concatenate([tq.rtg, tq.s, tq.a], axis=2)
        data = [torch.from_numpy(hcat)]
        if self.k:
            pcat = np.concatenate([tq.p_rtg, tq.p_s, tq.p_a], axis=2)
            data.append(torch.from_numpy(pcat))
        bias = attention_bias(tq.real, np.float32)[:, 0]
        data += [torch.from_numpy(tq.timesteps),
                 torch.from_numpy(bias),
                 torch.from_numpy(targets),
                 torch.from_numpy(tq.loss_mask[:, :, None])]
        if self.cut:
            masks = self._draw_masks(drop_rng, tq.real)
        else:
            masks = self._ones_masks()
        with torch.jit.optimized_execution(False):
            loss, norm, gflat = self._grad(self.flat, *data, *masks)
            n = float(norm)
            if not np.isfinite(n):
                raise NonFiniteGradient(f"gradient norm is {n}")
            self._update(self.flat, self.mbuf, self.vbuf, self.step_t,
                         gflat, norm)
        return float(loss)

    def export(self):
        """Write the master weights and step count back to the store."""
        _from_flat(self.flat, self.policy.store, self.specs)
        self.policy.store.step = int(self.step_t.item())
        return self.policy
