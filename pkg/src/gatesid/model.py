"""The gated semantic/collaborative ranking model.

Per impression: a sigmoid-MLP gate over the target item embedding and its
statistical features yields a fusion weight w; two intra-modal attention
distributions (semantic-ID stream and item-id stream) are convexly fused
with w and the single fused distribution pools BOTH history sequences (no
cross attention and no value projection). Pooled vectors, target
embeddings, stats and the user embedding feed a 3-layer relu MLP with two
sigmoid heads (click, click-and-pay). An in-batch InfoNCE loss between each
item's semantic-ID embedding and its id embedding, weighted per instance by
the (detached) gate value, aligns the two spaces; the total objective is
rank loss + lambda * alignment loss.
"""

from dataclasses import dataclass, asdict

import numpy as np

from . import diffkernel as dk

VARIANTS = ("full", "no_grca", "no_gfsa", "gate_item_only", "gate_stats_only", "avg_fusion")


def token_init_from_codebook(level_codes, d_token, target_norm=4.0):
    """Warm-start per-level token embeddings from quantizer code vectors.

    Each level's codes (K, d_z) are zero-padded or truncated to d_token and
    the whole stack is rescaled so the mean concatenated row norm equals
    target_norm. Keeps the code geometry (similar content -> similar tokens)
    while giving attention scores a usable scale from the first step.
    """
    out = []
    for codes in level_codes:
        codes = np.asarray(codes, dtype=np.float64)
        k, dz = codes.shape
        t = np.zeros((k, d_token))
        t[:, :min(dz, d_token)] = codes[:, :d_token]
        out.append(t)
    concat_norm = np.sqrt(sum((t ** 2).sum(axis=1).mean() for t in out))
    if concat_norm <= 0:
        raise ValueError("token_init_from_codebook: all-zero codebooks")
    scale = target_norm / concat_norm
    return [t * scale for t in out]


@dataclass
class ModelConfig:
    sid_levels: int = 4
    sid_codes: int = 64
    d_token: int = 32
    d_item: int = 128           # = sid_levels * d_token so the contrastive pair shares a space
    d_user: int = 16
    attn_dim: int = 32
    attn_init_gain: float = 4.0  # score resolution at init; softmax stays well scaled
    gate_hidden: int = 32
    head_hidden1: int = 128
    head_hidden2: int = 64
    n_stat: int = 3
    l_max: int = 20
    tau: float = 0.1            # contrastive temperature
    lam: float = 0.1            # balancing coefficient on the alignment loss
    variant: str = "full"


def make_variant(name, **overrides):
    """Configured model setup for the ablation variants."""
    if name not in VARIANTS:
        raise ValueError(f"unknown variant '{name}'; expected one of {VARIANTS}")
    cfg = ModelConfig(variant=name, **overrides)
    if name == "no_grca":
        cfg.lam = 0.0
    return cfg


class GateSidModel:
    """Holds parameters plus the frozen SID table and stat normalization."""

    def __init__(self, n_items, n_users, sid_table, config=None, seed=0,
                 token_init=None):
        self.cfg = config or ModelConfig()
        if self.cfg.variant not in VARIANTS:
            raise ValueError(f"unknown variant '{self.cfg.variant}'")
        self.n_items = n_items
        self.n_users = n_users
        sid_table = np.asarray(sid_table, dtype=np.int64)
        if sid_table.shape != (n_items + 1, self.cfg.sid_levels):
            raise ValueError(f"sid_table must be ({n_items + 1}, {self.cfg.sid_levels}) "
                             "with row 0 reserved for the pad id")
        self.sid_table = sid_table
        self.stat_mean = np.zeros(self.cfg.n_stat)
        self.stat_std = np.ones(self.cfg.n_stat)
        self._init_params(np.random.default_rng([seed, 0x6A7E]))
        if token_init is not None:
            if len(token_init) != self.cfg.sid_levels:
                raise ValueError("token_init must provide one array per SID level")
            for k, t in enumerate(token_init):
                t = np.asarray(t, dtype=np.float64)
                want = (self.cfg.sid_codes, self.cfg.d_token)
                if t.shape != want:
                    raise ValueError(f"token_init[{k}] shape {t.shape}, expected {want}")
                self.params[f"sid_emb{k}"].values[...] = t

    # -- parameters ---------------------------------------------------------

    def _init_params(self, rng):
        cfg = self.cfg

        def glorot(fi, fo):
            s = np.sqrt(2.0 / (fi + fo))
            return dk.Tensor(rng.normal(0.0, s, size=(fi, fo)), requires_grad=True)

        def bias(n):
            return dk.Tensor(np.zeros(n), requires_grad=True)

        item_emb = rng.normal(0.0, 0.05, size=(self.n_items + 1, cfg.d_item))
        item_emb[0] = 0.0  # pad row frozen at zero
        p = {"item_emb": dk.Tensor(item_emb, requires_grad=True),
             "user_emb": dk.Tensor(rng.normal(0.0, 0.05, size=(self.n_users, cfg.d_user)),
                                   requires_grad=True)}
        for k in range(cfg.sid_levels):
            p[f"sid_emb{k}"] = dk.Tensor(
                rng.normal(0.0, 0.05, size=(cfg.sid_codes, cfg.d_token)), requires_grad=True)

        gate_in = self._gate_input_dim()
        p["gate.w1"] = glorot(gate_in, cfg.gate_hidden)
        p["gate.b1"] = bias(cfg.gate_hidden)
        p["gate.w2"] = glorot(cfg.gate_hidden, 1)
        p["gate.b2"] = bias(1)

        # keys start tied to queries so scores begin as a (projected)
        # similarity kernel instead of an arbitrary bilinear form; the gain
        # lifts the tiny embedding norms to a usable softmax resolution.
        # the two matrices decouple freely during training
        d_sid = cfg.sid_levels * cfg.d_token
        g = cfg.attn_init_gain
        p["attn.wq_sid"] = glorot(d_sid, cfg.attn_dim)
        p["attn.wq_sid"].values *= g
        p["attn.wk_sid"] = dk.Tensor(p["attn.wq_sid"].values.copy(), requires_grad=True)
        p["attn.wq_item"] = glorot(cfg.d_item, cfg.attn_dim)
        p["attn.wq_item"].values *= g
        p["attn.wk_item"] = dk.Tensor(p["attn.wq_item"].values.copy(), requires_grad=True)

        head_in = 2 * d_sid + 2 * cfg.d_item + cfg.n_stat + cfg.d_user
        p["head.w1"] = glorot(head_in, cfg.head_hidden1)
        p["head.b1"] = bias(cfg.head_hidden1)
        p["head.w2"] = glorot(cfg.head_hidden1, cfg.head_hidden2)
        p["head.b2"] = bias(cfg.head_hidden2)
        p["head.w3"] = glorot(cfg.head_hidden2, 2)
        p["head.b3"] = bias(2)
        self.params = p

    def _gate_input_dim(self):
        if self.cfg.variant == "gate_item_only":
            return self.cfg.d_item
        if self.cfg.variant == "gate_stats_only":
            return self.cfg.n_stat
        return self.cfg.d_item + self.cfg.n_stat

    def trainable_params(self):
        """Parameters actually reached by gradients under the active variant."""
        p = dict(self.params)
        if self.cfg.variant == "no_gfsa":
            p.pop("attn.wq_sid")
            p.pop("attn.wk_sid")
        if self.cfg.variant in ("no_gfsa", "avg_fusion"):
            # without gated fusion the gate output never touches the loss
            # (contrastive weights are detached), so it cannot train
            for k in list(p):
                if k.startswith("gate."):
                    p.pop(k)
        return p

    # -- stat normalization ---------------------------------------------------

    def fit_stat_norm(self, raw_stats):
        """Stats are heavy-tailed counts: log1p then z-score."""
        t = np.log1p(np.asarray(raw_stats, dtype=np.float64))
        self.stat_mean = t.mean(axis=0)
        self.stat_std = np.maximum(t.std(axis=0), 1e-8)

    def normalize_stats(self, raw_stats):
        t = np.log1p(np.asarray(raw_stats, dtype=np.float64))
        return (t - self.stat_mean) / self.stat_std

    # -- building blocks ------------------------------------------------------

    def sid_embed(self, sids):
        """Concatenated per-level token embeddings for index array (..., L)."""
        sids = np.asarray(sids)
        parts = [dk.gather_rows(self.params[f"sid_emb{k}"], sids[..., k])
                 for k in range(self.cfg.sid_levels)]
        return dk.concat(parts, axis=-1)

    def gate_weight(self, e_item, stats_norm):
        if not np.all(np.isfinite(stats_norm)):
            raise dk.NonFiniteError("gate_weight")
        v = self.cfg.variant
        if v == "avg_fusion":
            return dk.constant(np.full((e_item.shape[0], 1), 0.5))
        if v == "gate_item_only":
            gin = e_item
        elif v == "gate_stats_only":
            gin = dk.constant(stats_norm)
        else:
            gin = dk.concat([e_item, dk.constant(stats_norm)], axis=-1)
        h = dk.relu(dk.linear(gin, self.params["gate.w1"], self.params["gate.b1"]))
        return dk.sigmoid(dk.linear(h, self.params["gate.w2"], self.params["gate.b2"]))

    def _attention(self, e_target, seq, wq, wk, mask, allow_empty):
        q = dk.matmul(e_target, self.params[wq])
        k = dk.matmul(seq, self.params[wk])
        scores = dk.affine(dk.attention_scores(q, k), 1.0 / np.sqrt(self.cfg.attn_dim))
        return dk.row_softmax(scores, mask=mask, allow_empty=allow_empty)

    # -- forward ---------------------------------------------------------------

    def forward(self, batch):
        """batch: dict with target_ids (B,), hist_ids (B,L), user_ids (B,),
        stats_raw (B,n_stat). Returns a dict of Tensors."""
        cfg = self.cfg
        target_ids = np.asarray(batch["target_ids"])
        hist_ids = np.asarray(batch["hist_ids"])
        user_ids = np.asarray(batch["user_ids"])
        if target_ids.min() < 1 or target_ids.max() > self.n_items:
            raise IndexError("forward: unknown target item id")
        stats_norm = self.normalize_stats(batch["stats_raw"])

        e_item = dk.gather_rows(self.params["item_emb"], target_ids)
        e_sid = self.sid_embed(self.sid_table[target_ids])
        e_user = dk.gather_rows(self.params["user_emb"], user_ids)
        h_item_seq = dk.gather_rows(self.params["item_emb"], hist_ids)
        h_sid_seq = self.sid_embed(self.sid_table[hist_ids])
        mask = hist_ids > 0

        w = self.gate_weight(e_item, stats_norm)

        s_item = self._attention(e_item, h_item_seq, "attn.wq_item", "attn.wk_item",
                                 mask, allow_empty=True)
        if cfg.variant == "no_gfsa":
            s_fused = s_item
        else:
            s_sid = self._attention(e_sid, h_sid_seq, "attn.wq_sid", "attn.wk_sid",
                                    mask, allow_empty=True)
            s_fused = dk.add(dk.scale_rows(s_sid, w),
                             dk.scale_rows(s_item, dk.affine(w, -1.0, 1.0)))

        h_sid = dk.attention_pool(s_fused, h_sid_seq)
        h_item = dk.attention_pool(s_fused, h_item_seq)

        head_in = dk.concat([h_sid, h_item, e_sid, e_item,
                             dk.constant(stats_norm), e_user], axis=-1)
        z1 = dk.relu(dk.linear(head_in, self.params["head.w1"], self.params["head.b1"]))
        z2 = dk.relu(dk.linear(z1, self.params["head.w2"], self.params["head.b2"]))
        logits = dk.linear(z2, self.params["head.w3"], self.params["head.b3"])
        ctr_logit = dk.take_column(logits, 0)
        ctcvr_logit = dk.take_column(logits, 1)

        return {
            "pctr": dk.sigmoid(ctr_logit),
            "pctcvr": dk.sigmoid(ctcvr_logit),
            "ctr_logit": ctr_logit,
            "ctcvr_logit": ctcvr_logit,
            "w": w,
            "e_sid": e_sid,
            "e_item": e_item,
        }

    # -- losses ------------------------------------------------------------------

    def contrastive_loss(self, e_sid, e_item, w_values, target_ids):
        """Gate-weighted in-batch InfoNCE over item-deduplicated pairs.

        w enters as a per-instance constant: the gate stays trainable through
        the fused attention, but cannot shrink the alignment loss directly.
        """
        _, first = np.unique(np.asarray(target_ids), return_index=True)
        keep = np.sort(first)
        a = dk.gather_rows(e_sid, keep)
        b = dk.gather_rows(e_item, keep)
        sims = dk.affine(dk.cosine_matrix(a, b), 1.0 / self.cfg.tau)
        probs = dk.row_softmax(sims)
        ell = dk.neg(dk.tlog(dk.diag_part(probs)))
        wk = np.asarray(w_values).reshape(-1)[keep]
        return dk.affine(dk.tsum(dk.mul(ell, dk.constant(wk))), 1.0 / keep.size)

    def loss(self, batch, out=None, contrast_w=None):
        """Total objective on one batch. Returns (total, parts dict).

        ``contrast_w`` overrides the per-instance contrastive weights with a
        fixed array. The weights are a stop-gradient quantity either way; the
        override makes the loss a pure function of the remaining parameters,
        which is what a finite-difference gradient check needs.
        """
        out = out or self.forward(batch)
        click = np.asarray(batch["click"], dtype=np.float64)
        pay = np.asarray(batch["pay"], dtype=np.float64)
        l_rank = dk.add(dk.tmean(dk.bce_with_logits(out["ctr_logit"], click)),
                        dk.tmean(dk.bce_with_logits(out["ctcvr_logit"], click * pay)))
        parts = {"rank": l_rank}
        if self.cfg.lam > 0.0:
            w_cl = out["w"].values if contrast_w is None else contrast_w
            l_cl = self.contrastive_loss(out["e_sid"], out["e_item"],
                                         w_cl, batch["target_ids"])
            parts["contrastive"] = l_cl
            total = dk.add(l_rank, dk.affine(l_cl, self.cfg.lam))
        else:
            total = l_rank
        parts["total"] = total
        return total, parts

    def zero_pad_grads(self):
        """Keep the pad embedding frozen: its row never receives updates."""
        g = self.params["item_emb"].grad
        if g is not None:
            g[0] = 0.0

    # -- inference helpers ---------------------------------------------------------

    def predict(self, batch, batch_size=2048):
        """Tape-free scoring; returns numpy arrays."""
        n = len(batch["target_ids"])
        outs = {"pctr": [], "pctcvr": [], "w": []}
        for lo in range(0, n, batch_size):
            sub = {k: batch[k][lo:lo + batch_size] for k in
                   ("target_ids", "hist_ids", "user_ids", "stats_raw")}
            o = self.forward(sub)
            outs["pctr"].append(o["pctr"].values)
            outs["pctcvr"].append(o["pctcvr"].values)
            outs["w"].append(o["w"].values[:, 0])
        return {k: np.concatenate(v) for k, v in outs.items()}

    def item_embeddings(self):
        """(e_sid, e_item) value matrices for items 1..n_items."""
        ids = np.arange(1, self.n_items + 1)
        e_sid = self.sid_embed(self.sid_table[ids]).values
        e_item = self.params["item_emb"].values[ids]
        return e_sid, e_item

    def item_gate_weights(self, raw_stats):
        """Gate value per item (rows follow raw_stats, aligned with ids 1..n)."""
        ids = np.arange(1, self.n_items + 1)
        e_item = dk.constant(self.params["item_emb"].values[ids])
        return self.gate_weight(e_item, self.normalize_stats(raw_stats)).values[:, 0]

    # -- checkpointing -----------------------------------------------------------

    def save(self, path, extra_meta=None):
        meta = {
            "config": asdict(self.cfg),
            "n_items": self.n_items,
            "n_users": self.n_users,
            "stat_mean": self.stat_mean.tolist(),
            "stat_std": self.stat_std.tolist(),
        }
        meta.update(extra_meta or {})
        arrays = {k: p.values for k, p in self.params.items()}
        arrays["sid_table"] = self.sid_table.astype(np.float64)
        dk.save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path):
        arrays, meta = dk.load_arrays(path)
        cfg = ModelConfig(**meta["config"])
        sid_table = arrays.pop("sid_table").astype(np.int64)
        model = cls(meta["n_items"], meta["n_users"], sid_table, cfg, seed=0)
        for k, p in model.params.items():
            p.values[...] = arrays[k]
        model.stat_mean = np.array(meta["stat_mean"])
        model.stat_std = np.array(meta["stat_std"])
        return model


# ---------------------------------------------------------------------------
# standalone functional pieces (single-record forms)


def intra_attention(target_embedding, sequence, w_q, w_k, mask, scale_dim=None):
    """Attention distribution of one target over one sequence (L, d_in)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("intra_attention: fully masked sequence")
    d = scale_dim or w_q.shape[1]
    q = dk.matmul(target_embedding, w_q)                    # (1, d)
    k = dk.matmul(sequence, w_k)                            # (L, d)
    scores = dk.affine(dk.matmul(q, dk.transpose(k)), 1.0 / np.sqrt(d))
    return dk.row_softmax(scores, mask=mask[None, :])


def fuse_attention(s_sid, s_item, w):
    """Convex combination of two attention distributions with scalar weight w."""
    if s_sid.shape != s_item.shape:
        raise dk.ShapeError("fuse_attention", s_sid.shape, s_item.shape)
    return dk.add(dk.affine(s_sid, w), dk.affine(s_item, 1.0 - w))


def pool_sequences(s_fused, h_sid, h_item):
    """Shared-distribution pooling of both positionally aligned sequences."""
    if s_fused.shape[-1] != h_sid.shape[0] or s_fused.shape[-1] != h_item.shape[0]:
        raise dk.ShapeError("pool_sequences", s_fused.shape, h_sid.shape, h_item.shape)
    return dk.matmul(s_fused, h_sid), dk.matmul(s_fused, h_item)
