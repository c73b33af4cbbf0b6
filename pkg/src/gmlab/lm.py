"""Toy autoregressive encoder-decoder over continuous frames.

Each sequence is prefixed with an all-zero start frame, so for ``T`` data
frames the decoder runs ``I = T + 1`` steps.  Step ``k`` reads frame
``h_k``, updates the monotonic alignment from ``e[k, :]``, forms
``c_k = Y^T alpha_k + proj(h_k)``, and the decoder output at ``k``
parameterizes the density of ``h_{k+1}``.  The stop logit at step ``k``
says whether ``h_k`` is the final frame.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from gmlab import align as al
from gmlab.config import LmConfig
from gmlab.core import ops
from gmlab.core.optim import Adam, clip_grad_norm
from gmlab.core.rng import Rng
from gmlab.core.tensor import Tensor, backward, parameter
from gmlab.data import Episode
from gmlab.errors import ContractViolation, NumericError
from gmlab.mdn import MdnOutput, nll, parameterize, raw_size, regression_loss, sample_frame, stop_loss
from gmlab.nn import Block, LayerNorm, Linear, Module, attention_bias, sinusoidal_positions


@dataclass
class Batch:
    tokens: np.ndarray  # (B, J) int, padded with 0
    token_valid: np.ndarray  # (B, J) bool
    frames: np.ndarray  # (B, I, F) with the start frame at 0
    n_frames: np.ndarray  # (B,) data frames T_b (so valid steps are 0..T_b)
    n_tokens: np.ndarray  # (B,)
    gt: np.ndarray  # (B, I - 1) gt encoder index per data frame, -1 on padding
    ids: np.ndarray  # (B,) episode ids

    @property
    def step_valid(self) -> np.ndarray:
        return np.arange(self.frames.shape[1])[None, :] <= self.n_frames[:, None]


def collate(episodes: list[Episode], pad_frames: int = 0) -> Batch:
    if not episodes:
        raise ContractViolation("empty batch")
    B = len(episodes)
    J = max(e.n_tokens for e in episodes)
    T = max(e.n_frames for e in episodes) + pad_frames
    F = episodes[0].features.shape[1]
    tokens = np.zeros((B, J), dtype=np.int64)
    tvalid = np.zeros((B, J), dtype=bool)
    frames = np.zeros((B, T + 1, F))
    gt = np.full((B, T), -1, dtype=np.int64)
    for b, e in enumerate(episodes):
        tokens[b, : e.n_tokens] = e.tokens
        tvalid[b, : e.n_tokens] = True
        frames[b, 1 : e.n_frames + 1] = e.features
        gt[b, : e.n_frames] = e.gt_alignment
    return Batch(
        tokens, tvalid, frames,
        np.array([e.n_frames for e in episodes]), np.array([e.n_tokens for e in episodes]),
        gt, np.array([e.index for e in episodes]),
    )


class BatchRng:
    """Per-episode noise streams laid out as one padded (B, I, J) array.

    Each episode draws from its own substream at its own (I_b, J_b) size,
    so samples do not depend on how episodes are grouped into batches.
    """

    def __init__(self, rngs: list[Rng], sizes: list[tuple[int, int]]):
        self.rngs = rngs
        self.sizes = sizes

    def _fill(self, shape, draw) -> np.ndarray:
        out = np.zeros(shape)
        for b, (r, (i, j)) in enumerate(zip(self.rngs, self.sizes)):
            out[b, :i, :j] = draw(r, (i, j))
        return out

    def gumbel(self, shape):
        return self._fill(shape, lambda r, s: r.gumbel(s))

    def normal(self, shape):
        return self._fill(shape, lambda r, s: r.normal(s))

    def bernoulli(self, p):
        p = np.asarray(p)
        return self._fill(p.shape, lambda r, s: r.uniform(s)) < p


@dataclass
class ForwardResult:
    nll: Tensor  # scalar, mean per predicted frame
    stop: Tensor  # scalar
    alpha: Tensor  # (B, I, J)
    trace: np.ndarray  # (B, I) argmax alpha
    frame_nll: np.ndarray  # (B, I - 1), zero on padding
    stop_logits: np.ndarray  # (B, I)

    @property
    def total(self) -> Tensor:
        return self.nll + self.stop


class GmmLm(Module):
    def __init__(self, cfg: LmConfig, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        D, F = cfg.model_dim, cfg.frame_dim
        self.embed = parameter(rng.substream(1).normal((cfg.vocab_size, D)))
        self.enc_blocks = [Block(D, cfg.heads, rng.substream(2, i)) for i in range(cfg.enc_depth)]
        self.enc_ln = LayerNorm(D)
        self.frame_proj = Linear(F, D, rng.substream(3))
        self.dec_blocks = [Block(D, cfg.heads, rng.substream(4, i)) for i in range(cfg.dec_depth)]
        self.dec_ln = LayerNorm(D)
        out_dim = F if cfg.head_mode == "regression" else raw_size(cfg.mixtures, F, cfg.cov_type)
        self.head = Linear(D, out_dim, rng.substream(5))
        self.stop = Linear(D, 1, rng.substream(6))

    # -- components -----------------------------------------------------
    def encode_text(self, tokens, valid=None) -> Tensor:
        """Token ids (J,) or (B, J) -> text features (J, D) or (B, J, D)."""
        tok = np.asarray(tokens, dtype=np.int64)
        single = tok.ndim == 1
        if single:
            tok = tok[None]
        if tok.size and (tok.min() < 0 or tok.max() >= self.cfg.vocab_size):
            raise ContractViolation("token id outside the vocabulary")
        valid = np.ones(tok.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
        B, J = tok.shape
        x = ops.take(self.embed, tok, axis=0) + sinusoidal_positions(J, self.cfg.model_dim)
        bias = attention_bias(valid, causal=False)
        for blk in self.enc_blocks:
            x = blk(x, bias)
        Y = self.enc_ln(x)
        return Y[0] if single else Y

    def decode_states(self, C: Tensor, step_valid: np.ndarray) -> Tensor:
        I = C.shape[1]
        x = C + sinusoidal_positions(I, self.cfg.model_dim)
        bias = attention_bias(step_valid, causal=True)
        for blk in self.dec_blocks:
            x = blk(x, bias)
        return self.dec_ln(x)

    def head_output(self, states: Tensor) -> MdnOutput | Tensor:
        raw = self.head(states)
        if self.cfg.head_mode == "regression":
            return raw
        return parameterize(raw, self.cfg.mixtures, self.cfg.frame_dim, self.cfg.cov_type, self.cfg.scale_floor)

    # -- teacher forcing ------------------------------------------------
    def forward(self, batch: Batch, rng: Rng | None, s: float, training: bool = True, greedy: bool = False) -> ForwardResult:
        cfg = self.cfg
        B, I, F = batch.frames.shape
        if I < 2:
            raise ContractViolation("teacher forcing needs at least one data frame")
        Y = self.encode_text(batch.tokens, batch.token_valid)
        Hp = self.frame_proj(batch.frames)
        E = al.energies(Hp, Y).e
        last = batch.n_tokens - 1
        brng = None
        if rng is not None:
            brng = BatchRng([rng.substream(int(i)) for i in batch.ids],
                            [(int(t) + 1, int(j)) for t, j in zip(batch.n_frames, batch.n_tokens)])
        alpha, _ = al.align(E, cfg.align_mode, s, brng, last=last, training=training, greedy=greedy)
        C = al.context(Y, alpha, Hp)
        valid = batch.step_valid
        states = self.decode_states(C, valid)
        pred_mask = valid[:, 1:].astype(np.float64)  # step k predicts frame k+1
        target = Tensor(batch.frames[:, 1:])
        if cfg.head_mode == "regression":
            per = regression_loss(target, self.head_output(states[:, :-1]))
        else:
            per = nll(target, self.head_output(states[:, :-1]))
        nll_mean = (per * pred_mask).sum() / pred_mask.sum()
        logits = ops.reshape(self.stop(states), (B, I))
        is_last = np.arange(I)[None, :] == batch.n_frames[:, None]
        s_loss = stop_loss(logits, is_last, cfg.stop_pos_weight, mask=valid)
        return ForwardResult(
            nll_mean, s_loss, alpha, al.alignment_trace(alpha),
            per.data * pred_mask, logits.data,
        )

    # -- generation -----------------------------------------------------
    def generate(
        self,
        tokens,
        rng: Rng,
        temperature: float = 1.0,
        prompt_frames=None,
        prompt_tokens=None,
        max_len: int | None = None,
    ) -> tuple[np.ndarray, np.ndarray, int | None]:
        """Sample frames until the stop classifier fires or ``max_len``.

        Returns ``(frames, trace, stop_step)``; ``trace`` holds the attended
        text position for every generated frame and ``stop_step`` the number
        of generated frames when stop fired (``None`` at ``max_len``).
        Prompt frames are teacher-forced first; at temperature 0 every
        sampling decision (alignment included) is greedy.
        """
        cfg = self.cfg
        max_len = cfg.max_len if max_len is None else max_len
        tok = np.asarray(tokens, dtype=np.int64)
        if prompt_tokens is not None and cfg.prompt_text:
            tok = np.concatenate([np.asarray(prompt_tokens, dtype=np.int64), tok])
        prompt = np.zeros((0, cfg.frame_dim))
        if prompt_frames is not None and cfg.prompt_frames:
            prompt = np.asarray(prompt_frames, dtype=np.float64).reshape(-1, cfg.frame_dim)
        P = len(prompt)
        J = len(tok)
        Y = self.encode_text(tok)
        greedy = temperature == 0 or cfg.greedy_align
        frames = [np.zeros(cfg.frame_dim)] + list(prompt)
        ctx: list[np.ndarray] = []
        trace: list[int] = []
        alpha = np.zeros(J)
        alpha[0] = 1.0
        Yd = Y.data
        stop_step = None
        for k in range(P + max_len + 1):
            hp = self.frame_proj(frames[k]).data
            e = Yd @ hp
            if cfg.align_mode == "cross":
                z = np.exp(e - e.max())
                alpha = z / z.sum()
            elif k > 0:
                p = expit(e)
                u = (p > 0.5).astype(np.float64) if greedy else (rng.uniform(J) < p).astype(np.float64)
                u[J - 1] = 1.0
                new = alpha * u
                new[1:] += (alpha * (1.0 - u))[:-1]
                alpha = new
            ctx.append(alpha @ Yd + hp)
            if k > P:
                trace.append(int(np.argmax(alpha)))
            C = Tensor(np.asarray(ctx)[None])
            st = self.decode_states(C, np.ones((1, k + 1), dtype=bool))
            last_state = st[:, k]
            if k > P:
                stop_logit = float(self.stop(last_state).data.reshape(-1)[0])
                if expit(stop_logit) > 0.5:
                    stop_step = k - P
                    break
            if k >= P + max_len:
                break
            out = self.head_output(last_state)
            if cfg.head_mode == "regression":
                nxt = out.data[0]
            else:
                nxt = sample_frame(out, temperature, rng)[0]
            frames.append(nxt)
        gen = np.asarray(frames[1 + P :][: len(trace)]).reshape(-1, cfg.frame_dim)
        return gen, np.asarray(trace, dtype=np.int64), stop_step


def teacher_forced_loss(ep: Episode | list[Episode], model: GmmLm, rng: Rng, step: int, total_steps: int):
    """``(nll, stop, alignment_trace)`` for one episode (or a batch) at ``step``."""
    eps = [ep] if isinstance(ep, Episode) else ep
    s = al.temperature_schedule(step, total_steps, model.cfg.s_hi, model.cfg.s_lo)
    res = model.forward(collate(eps), rng, s, training=True)
    return res.nll, res.stop, res.trace[0] if isinstance(ep, Episode) else res.trace


@dataclass
class TrainState:
    model: GmmLm
    opt: Adam
    total_steps: int
    clip: float = 1.0
    step: int = 0


def make_train_state(model: GmmLm, lr: float, clip: float, total_steps: int) -> TrainState:
    return TrainState(model, Adam(list(model.parameters().values()), lr=lr), total_steps, clip)


def train_step(state: TrainState, episodes: list[Episode], rng: Rng) -> dict:
    """One Adam update on the mean loss over ``episodes``.

    A non-finite forward pass leaves the parameters untouched and reports
    ``aborted=True``.
    """
    if not episodes:
        raise ContractViolation("empty batch")
    cfg = state.model.cfg
    s = al.temperature_schedule(min(state.step, state.total_steps), state.total_steps, cfg.s_hi, cfg.s_lo)
    state.opt.zero_grad()
    try:
        res = state.model.forward(collate(episodes), rng.substream(state.step), s, training=True)
        loss = res.total
        backward(loss)
    except NumericError as exc:
        state.opt.zero_grad()
        return {"aborted": True, "error": str(exc), "temperature": s, "step": state.step}
    norm = clip_grad_norm(state.opt.params, state.clip)
    state.opt.step()
    state.step += 1
    return {
        "aborted": False,
        "loss": loss.item(),
        "nll": res.nll.item(),
        "stop_loss": res.stop.item(),
        "grad_norm": norm,
        "temperature": s,
        "step": state.step,
    }
