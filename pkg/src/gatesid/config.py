"""Flat run configuration shared by every pipeline stage.

One RunConfig carries all hyperparameters plus artifact paths, so a single
key=value file (or --set overrides) reproduces any run. Desk-scale defaults
are active; the reference-scale values (codebooks of 256, latent dim 64,
batch 4096) are noted next to the fields they replace and can be restored
by overriding the corresponding keys.
"""

import dataclasses
from dataclasses import dataclass

from .model import VARIANTS


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0

    # artifact paths
    corpus_dir: str = "artifacts/corpus"
    codebook_path: str = "artifacts/codebook.rqv"
    sid_table_path: str = "artifacts/sids.csv"
    model_path: str = "artifacts/model.ckpt"
    report_path: str = "artifacts/report.json"
    ablation_json: str = "artifacts/ablation.json"
    ablation_csv: str = "artifacts/ablation.csv"
    gate_curve_csv: str = "artifacts/gate_curve.csv"
    emb_sid_csv: str = "artifacts/emb_sid.csv"
    emb_item_csv: str = "artifacts/emb_item.csv"

    # synthetic corpus
    n_users: int = 500
    n_items: int = 2000
    n_impressions: int = 60000
    n_days: int = 30
    content_dim: int = 64
    n_topics: int = 16
    topic_noise: float = 0.35
    cold_fraction: float = 0.3
    l_max: int = 20
    label_noise: float = 0.02
    new_age_days: int = 20
    popular_age_days: int = 300
    max_age_days: int = 365
    exposure_boost: float = 1.5
    factor_dim: int = 16
    factor_clusters: int = 24
    user_anchors: int = 4
    drift_step: float = 0.08
    hist_state_window: int = 10
    hist_state_blend: float = 0.95
    base_ctr: float = 0.03
    sem_gain: float = 0.6
    sem_floor: float = 0.05
    quality_gain: float = 0.2
    collab_gain: float = 0.5

    # residual quantizer (reference scale: rq_codes=256, rq_latent_dim=64)
    rq_latent_dim: int = 16
    rq_levels: int = 4
    rq_codes: int = 64
    rq_hidden: int = 32
    rq_beta: float = 0.25
    rq_epochs: int = 10
    rq_batch: int = 256
    rq_lr: float = 1e-3
    rq_ema_decay: float = 0.99
    rq_kmeans_iters: int = 25

    # ranking model
    d_token: int = 32
    d_user: int = 16
    attn_dim: int = 32
    attn_init_gain: float = 4.0
    gate_hidden: int = 32
    head_hidden1: int = 128
    head_hidden2: int = 64
    tau: float = 0.1
    lam: float = 0.1
    variant: str = "full"
    token_warm_start: bool = True
    token_target_norm: float = 4.0

    # training (reference scale: batch_size=4096)
    epochs: int = 2
    batch_size: int = 256
    lr: float = 5e-3
    weight_decay: float = 1e-5
    test_frac: float = 0.2

    # ablation harness
    ablate_variants: str = "full,no_grca,no_gfsa,avg_fusion"
    ablate_seeds: str = "0,1,2"


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key, text):
    typ = _FIELDS[key].type
    text = text.strip()
    try:
        if typ == "bool" or typ is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if typ == "int" or typ is int:
            return int(text)
        if typ == "float" or typ is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"config key '{key}': {exc}") from None


def parse_config_text(text, source="<config>"):
    """key=value lines; blank lines and # comments ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, val = line.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown config key '{key}'")
        out[key] = _coerce(key, val)
    return out


def build_config(config_path=None, overrides=None):
    """Defaults, then file values, then --set overrides (highest precedence)."""
    values = {}
    if config_path is not None:
        try:
            with open(config_path) as f:
                text = f.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {config_path}: {exc}") from None
        values.update(parse_config_text(text, source=config_path))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = _coerce(key, val)
    cfg = RunConfig(**values)
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"unknown variant '{cfg.variant}'; expected one of {VARIANTS}")
    return cfg


# ---------------------------------------------------------------------------
# views onto the per-module configs


def corpus_config(rc):
    from .synthcorpus import CorpusConfig
    return CorpusConfig(
        n_users=rc.n_users, n_items=rc.n_items, n_impressions=rc.n_impressions,
        n_days=rc.n_days, content_dim=rc.content_dim, n_topics=rc.n_topics,
        topic_noise=rc.topic_noise, cold_fraction=rc.cold_fraction, l_max=rc.l_max,
        label_noise=rc.label_noise, new_age_days=rc.new_age_days,
        popular_age_days=rc.popular_age_days, max_age_days=rc.max_age_days,
        exposure_boost=rc.exposure_boost, factor_dim=rc.factor_dim,
        factor_clusters=rc.factor_clusters, user_anchors=rc.user_anchors,
        drift_step=rc.drift_step, hist_state_window=rc.hist_state_window,
        hist_state_blend=rc.hist_state_blend, base_ctr=rc.base_ctr,
        sem_gain=rc.sem_gain, sem_floor=rc.sem_floor,
        quality_gain=rc.quality_gain, collab_gain=rc.collab_gain)


def rqvae_config(rc):
    from .rqvae import RqVaeConfig
    return RqVaeConfig(
        content_dim=rc.content_dim, latent_dim=rc.rq_latent_dim,
        levels=rc.rq_levels, codes_per_level=rc.rq_codes, hidden_dim=rc.rq_hidden,
        beta=rc.rq_beta, epochs=rc.rq_epochs, batch_size=rc.rq_batch,
        lr=rc.rq_lr, ema_decay=rc.rq_ema_decay, kmeans_iters=rc.rq_kmeans_iters)


def model_overrides(rc):
    return {
        "sid_levels": rc.rq_levels, "sid_codes": rc.rq_codes,
        "d_token": rc.d_token, "d_item": rc.rq_levels * rc.d_token,
        "d_user": rc.d_user, "attn_dim": rc.attn_dim,
        "attn_init_gain": rc.attn_init_gain, "gate_hidden": rc.gate_hidden,
        "head_hidden1": rc.head_hidden1, "head_hidden2": rc.head_hidden2,
        "tau": rc.tau, "lam": rc.lam,
    }


def train_config(rc):
    from .train import TrainConfig
    return TrainConfig(epochs=rc.epochs, batch_size=rc.batch_size, lr=rc.lr,
                       weight_decay=rc.weight_decay, test_frac=rc.test_frac)
