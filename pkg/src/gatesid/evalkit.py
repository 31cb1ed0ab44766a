"""Ranking metrics, maturity-bucketed reports, alignment diagnostics and the
ablation harness."""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import synthcorpus, train
from .diffkernel import atomic_write_text

log = logging.getLogger("gatesid.evalkit")


# ---------------------------------------------------------------------------
# metrics


def _midranks(x):
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc(scores, labels):
    """P(random positive outranks random negative), ties at 1/2, via rank-sum.

    Returns None when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    r = _midranks(scores)
    return float((r[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gauc(scores, labels, user_ids):
    """Impression-count-weighted mean of per-user AUC; users lacking both
    classes are excluded from numerator and denominator."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    user_ids = np.asarray(user_ids)
    num = 0.0
    den = 0.0
    for u in np.unique(user_ids):
        m = user_ids == u
        a = auc(scores[m], labels[m])
        if a is None:
            continue
        w = int(m.sum())
        num += w * a
        den += w
    return num / den if den > 0 else None


def alignment_score(e_sid, e_item):
    """Mean paired cosine similarity; zero-norm pairs are skipped.

    Returns (score, n_used, n_skipped).
    """
    a = np.asarray(e_sid, dtype=np.float64)
    b = np.asarray(e_item, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"alignment_score: shape mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    if not ok.any():
        return None, 0, int(len(a))
    cos = (a[ok] * b[ok]).sum(axis=1) / (na[ok] * nb[ok])
    return float(cos.mean()), int(ok.sum()), int((~ok).sum())


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    metrics: dict = field(default_factory=dict)   # task -> bucket -> {"auc":..,"gauc":..,"n":..}
    gate: dict = field(default_factory=dict)      # bucket -> mean/deciles of w
    alignment: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(
            {"metrics": self.metrics, "gate": self.gate,
             "alignment": self.alignment, "counts": self.counts},
            sort_keys=True, indent=2)

    def save(self, path):
        atomic_write_text(path, self.to_json() + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            d = json.load(f)
        return cls(metrics=d["metrics"], gate=d["gate"],
                   alignment=d["alignment"], counts=d["counts"])


def evaluate_model(corpus, model, info, idx=None):
    """Bucketed AUC/GAUC on the test split plus gate and alignment diagnostics."""
    idx = info["test_idx"] if idx is None else idx
    batch = train.make_batch(corpus, info["stats_raw"], idx)
    preds = model.predict(batch)

    ages = corpus.item_age[batch["target_ids"] - 1]
    cfg = corpus.config
    buckets = {
        "all": np.arange(idx.size),
        "new": np.flatnonzero(ages < cfg.new_age_days),
        "popular": np.flatnonzero(ages > cfg.popular_age_days),
    }
    tasks = {"ctr": (preds["pctr"], batch["click"]),
             "ctcvr": (preds["pctcvr"], batch["click"] * batch["pay"])}

    report = EvalReport()
    for task, (scores, labels) in tasks.items():
        report.metrics[task] = {}
        for name, sel in buckets.items():
            report.metrics[task][name] = {
                "auc": auc(scores[sel], labels[sel]),
                "gauc": gauc(scores[sel], labels[sel], batch["user_ids"][sel]),
                "n": int(sel.size),
            }

    for name, sel in buckets.items():
        if sel.size:
            w = preds["w"][sel]
            report.gate[name] = {
                "mean": float(w.mean()),
                "deciles": [float(v) for v in np.percentile(w, np.arange(10, 100, 10))],
            }

    e_sid, e_item = model.item_embeddings()
    score, used, skipped = alignment_score(e_sid, e_item)
    report.alignment = {"mean_paired_cosine": score, "n_used": used, "n_skipped": skipped}
    report.counts = {"n_eval": int(idx.size)}
    return report


# ---------------------------------------------------------------------------
# ablation harness


def run_ablation(corpus, sid_table, variants, seeds, train_config=None,
                 model_overrides=None, token_init=None):
    """One EvalReport per (variant, seed) plus per-variant means.

    A failing cell is isolated (recorded as an error string), not fatal.
    """
    cells = {}
    for variant in variants:
        for seed in seeds:
            key = (variant, seed)
            try:
                model, info = train.train_model(
                    corpus, sid_table, variant=variant, seed=seed,
                    model_overrides=model_overrides, train_config=train_config,
                    token_init=token_init)
                cells[key] = evaluate_model(corpus, model, info)
            except Exception as exc:  # isolate the failure to this cell
                log.exception("ablation cell %s failed", key)
                cells[key] = f"error: {exc}"
    summary = aggregate_ablation(cells, variants, seeds)
    return cells, summary


def aggregate_ablation(cells, variants, seeds):
    """Mean metric per variant across seeds, shaped like the comparison tables."""
    summary = {}
    for variant in variants:
        vals = {}
        for task in ("ctr", "ctcvr"):
            for metric in ("auc", "gauc"):
                xs = []
                for seed in seeds:
                    rep = cells.get((variant, seed))
                    if isinstance(rep, EvalReport):
                        v = rep.metrics[task]["all"][metric]
                        if v is not None:
                            xs.append(v)
                if xs:
                    vals[f"{task}_{metric}"] = float(np.mean(xs))
        summary[variant] = vals
    return summary


def ablation_csv(summary):
    cols = ["ctr_auc", "ctr_gauc", "ctcvr_auc", "ctcvr_gauc"]
    lines = ["variant," + ",".join(cols)]
    for variant, vals in summary.items():
        lines.append(variant + "," + ",".join(
            "" if vals.get(c) is None else repr(vals.get(c)) for c in cols))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# gate-age curve


def gate_age_curve(corpus, model, bins=None):
    """Mean gate weight per item-age bin; bins partition the age range."""
    cfg = corpus.config
    if bins is None:
        bins = [0, cfg.new_age_days, 60, 150, cfg.popular_age_days, cfg.max_age_days + 1]
    stats = synthcorpus.item_stat_features(corpus)
    w = model.item_gate_weights(stats)
    ages = corpus.item_age
    curve = []
    for lo, hi in zip(bins[:-1], bins[1:]):
        sel = (ages >= lo) & (ages < hi)
        curve.append({
            "age_lo": int(lo),
            "age_hi": int(hi),
            "n": int(sel.sum()),
            "mean_w": float(w[sel].mean()) if sel.any() else None,
        })
    return curve


def gate_curve_csv(curve):
    lines = ["age_lo,age_hi,n,mean_w"]
    for row in curve:
        mw = "" if row["mean_w"] is None else repr(row["mean_w"])
        lines.append(f"{row['age_lo']},{row['age_hi']},{row['n']},{mw}")
    return "\n".join(lines) + "\n"
