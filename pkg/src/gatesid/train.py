"""Training loop for the ranking model on a synthetic corpus."""

import logging
from dataclasses import dataclass

import numpy as np

from . import diffkernel as dk
from . import synthcorpus
from .model import GateSidModel, make_variant

log = logging.getLogger("gatesid.train")


@dataclass
class TrainConfig:
    epochs: int = 2
    batch_size: int = 256
    lr: float = 5e-3
    weight_decay: float = 1e-5
    test_frac: float = 0.2


def time_split(corpus, test_frac=0.2):
    """Most recent days form the test set."""
    n_days = corpus.config.n_days
    cutoff = n_days - max(1, int(round(test_frac * n_days)))
    train_idx = np.flatnonzero(corpus.imp_ts < cutoff)
    test_idx = np.flatnonzero(corpus.imp_ts >= cutoff)
    return train_idx, test_idx


def make_batch(corpus, stats_raw, idx):
    return {
        "target_ids": corpus.imp_item[idx],
        "hist_ids": corpus.imp_hist[idx],
        "user_ids": corpus.imp_user[idx],
        "stats_raw": stats_raw[idx],
        "click": corpus.imp_click[idx],
        "pay": corpus.imp_pay[idx],
    }


def train_model(corpus, sid_table, variant="full", seed=0,
                model_overrides=None, train_config=None, token_init=None):
    """Train one variant; returns (model, info dict with loss curve and split)."""
    tc = train_config or TrainConfig()
    cfg = make_variant(variant, **(model_overrides or {}))
    cfg.l_max = corpus.config.l_max
    model = GateSidModel(corpus.n_items, corpus.n_users, sid_table, cfg, seed=seed,
                         token_init=token_init)

    stats_raw = synthcorpus.impression_stat_features(corpus)
    train_idx, test_idx = time_split(corpus, tc.test_frac)
    model.fit_stat_norm(stats_raw[train_idx])

    opt = dk.AdamW(model.trainable_params(), lr=tc.lr, weight_decay=tc.weight_decay)
    curve = []
    for epoch in range(tc.epochs):
        order = train_idx[np.random.default_rng([seed, 7000 + epoch]).permutation(train_idx.size)]
        total = 0.0
        for lo in range(0, order.size, tc.batch_size):
            batch = make_batch(corpus, stats_raw, order[lo:lo + tc.batch_size])
            with dk.Tape() as tape:
                loss, _ = model.loss(batch)
                dk.backward(loss, tape)
            model.zero_pad_grads()
            opt.step()
            opt.zero_grad()
            total += float(loss.values) * len(batch["target_ids"])
        curve.append(total / order.size)
        log.info("variant=%s seed=%d epoch=%d loss=%.5f", variant, seed, epoch, curve[-1])

    info = {
        "loss_curve": curve,
        "train_idx": train_idx,
        "test_idx": test_idx,
        "stats_raw": stats_raw,
        "variant": variant,
        "seed": seed,
    }
    return model, info
