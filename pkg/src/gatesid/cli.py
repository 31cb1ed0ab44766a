"""Command line pipeline: corpus generation, quantizer training, SID
assignment, ranking-model training, evaluation, ablations and exports.

Every subcommand reads one flat RunConfig (defaults < config file < --set)
and prints a single JSON summary line on success. Exit codes: 0 success,
1 configuration or runtime error, 2 missing prerequisite artifact.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import config as runcfg
from . import evalkit, rqvae, synthcorpus
from . import train as trainmod
from . import diffkernel as dk
from .model import GateSidModel, make_variant, token_init_from_codebook

log = logging.getLogger("gatesid.cli")


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path):
        super().__init__(f"missing prerequisite artifact: {path}")
        self.path = path


def _setup_logging():
    name = os.environ.get("GATESID_LOG", "quiet").strip().lower()
    level = {"quiet": logging.WARNING, "info": logging.INFO,
             "debug": logging.DEBUG}.get(name, logging.WARNING)
    logging.basicConfig(level=level,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _require(path):
    if not os.path.exists(path):
        raise MissingArtifactError(path)


def _parent_dir(path):
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)


def _emit(summary):
    print(json.dumps(summary, sort_keys=True))


# ---------------------------------------------------------------------------
# shared loading helpers


def _load_corpus(rc):
    _require(os.path.join(rc.corpus_dir, "items.csv"))
    _require(os.path.join(rc.corpus_dir, "users.csv"))
    _require(os.path.join(rc.corpus_dir, "impressions.csv"))
    return synthcorpus.load_corpus(rc.corpus_dir, runcfg.corpus_config(rc))


def _load_sid_table(rc, n_items):
    _require(rc.sid_table_path)
    item_ids, sids = rqvae.load_sid_table(rc.sid_table_path)
    table = np.zeros((n_items + 1, sids.shape[1]), dtype=np.int64)
    table[item_ids] = sids
    return table


def _token_init(rc):
    if not rc.token_warm_start:
        return None
    _require(rc.codebook_path)
    codebook, _, _ = rqvae.load_codebook(rc.codebook_path)
    return token_init_from_codebook(codebook.codes, rc.d_token,
                                    target_norm=rc.token_target_norm)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(rc):
    corpus = synthcorpus.generate_corpus(runcfg.corpus_config(rc), seed=rc.seed)
    synthcorpus.save_corpus(rc.corpus_dir, corpus)
    return {"command": "gen-data", "corpus_dir": rc.corpus_dir,
            "n_items": corpus.n_items, "n_users": corpus.n_users,
            "n_impressions": int(corpus.imp_user.size),
            "ctr": float(corpus.imp_click.mean())}


def cmd_train_rqvae(rc):
    corpus = _load_corpus(rc)
    cfg = runcfg.rqvae_config(rc)
    params, codebook, curve = rqvae.train_rqvae(corpus.item_content, cfg, seed=rc.seed)
    _parent_dir(rc.codebook_path)
    rqvae.save_codebook(rc.codebook_path, codebook, cfg, rc.seed, params=params)
    util = rqvae.codebook_utilization(corpus.item_content, params, codebook)
    return {"command": "train-rqvae", "codebook_path": rc.codebook_path,
            "final_loss": curve[-1], "utilization": [float(u) for u in util]}


def cmd_encode_sids(rc):
    corpus = _load_corpus(rc)
    _require(rc.codebook_path)
    codebook, params, _ = rqvae.load_codebook(rc.codebook_path)
    if params is None:
        raise ValueError(f"codebook file {rc.codebook_path} lacks encoder weights; "
                         "regenerate it with train-rqvae")
    sids = rqvae.assign_sids(corpus.item_content, params, codebook)
    _parent_dir(rc.sid_table_path)
    rqvae.save_sid_table(rc.sid_table_path, np.arange(1, corpus.n_items + 1), sids)
    return {"command": "encode-sids", "sid_table_path": rc.sid_table_path,
            "n_items": corpus.n_items,
            "distinct_sids": int(len({tuple(r) for r in sids}))}


def cmd_train(rc):
    corpus = _load_corpus(rc)
    sid_table = _load_sid_table(rc, corpus.n_items)
    model, info = trainmod.train_model(
        corpus, sid_table, variant=rc.variant, seed=rc.seed,
        model_overrides=runcfg.model_overrides(rc),
        train_config=runcfg.train_config(rc), token_init=_token_init(rc))
    _parent_dir(rc.model_path)
    model.save(rc.model_path, extra_meta={"loss_curve": info["loss_curve"],
                                          "seed": rc.seed})
    return {"command": "train", "model_path": rc.model_path,
            "variant": rc.variant, "seed": rc.seed,
            "final_loss": info["loss_curve"][-1]}


def _eval_info(rc, corpus):
    stats_raw = synthcorpus.impression_stat_features(corpus)
    _, test_idx = trainmod.time_split(corpus, rc.test_frac)
    return {"stats_raw": stats_raw, "test_idx": test_idx}


def cmd_eval(rc):
    corpus = _load_corpus(rc)
    _require(rc.model_path)
    model = GateSidModel.load(rc.model_path)
    report = evalkit.evaluate_model(corpus, model, _eval_info(rc, corpus))
    _parent_dir(rc.report_path)
    report.save(rc.report_path)
    return {"command": "eval", "report_path": rc.report_path,
            "ctr_auc": report.metrics["ctr"]["all"]["auc"],
            "ctcvr_gauc": report.metrics["ctcvr"]["all"]["gauc"],
            "alignment": report.alignment["mean_paired_cosine"]}


def cmd_ablate(rc):
    corpus = _load_corpus(rc)
    sid_table = _load_sid_table(rc, corpus.n_items)
    variants = [v.strip() for v in rc.ablate_variants.split(",") if v.strip()]
    seeds = [int(s) for s in rc.ablate_seeds.split(",") if s.strip()]
    cells, summary = evalkit.run_ablation(
        corpus, sid_table, variants, seeds,
        train_config=runcfg.train_config(rc),
        model_overrides=runcfg.model_overrides(rc), token_init=_token_init(rc))
    payload = {"summary": summary, "cells": {}}
    for (variant, seed), rep in cells.items():
        key = f"{variant}:{seed}"
        payload["cells"][key] = (json.loads(rep.to_json())
                                 if isinstance(rep, evalkit.EvalReport) else rep)
    _parent_dir(rc.ablation_json)
    dk.atomic_write_text(rc.ablation_json,
                         json.dumps(payload, sort_keys=True, indent=2) + "\n")
    _parent_dir(rc.ablation_csv)
    dk.atomic_write_text(rc.ablation_csv, evalkit.ablation_csv(summary))
    return {"command": "ablate", "ablation_json": rc.ablation_json,
            "ablation_csv": rc.ablation_csv,
            "variants": variants, "seeds": seeds}


def cmd_gate_curve(rc):
    corpus = _load_corpus(rc)
    _require(rc.model_path)
    model = GateSidModel.load(rc.model_path)
    curve = evalkit.gate_age_curve(corpus, model)
    _parent_dir(rc.gate_curve_csv)
    dk.atomic_write_text(rc.gate_curve_csv, evalkit.gate_curve_csv(curve))
    means = [r["mean_w"] for r in curve if r["mean_w"] is not None]
    return {"command": "gate-curve", "gate_curve_csv": rc.gate_curve_csv,
            "first_bin_w": means[0] if means else None,
            "last_bin_w": means[-1] if means else None}


def _write_emb_csv(path, emb):
    d = emb.shape[1]
    lines = ["item_id," + ",".join(f"v{i+1}" for i in range(d))]
    for i, row in enumerate(emb):
        lines.append(f"{i+1}," + ",".join(repr(float(v)) for v in row))
    dk.atomic_write_text(path, "\n".join(lines) + "\n")


def cmd_export_emb(rc):
    _require(rc.model_path)
    model = GateSidModel.load(rc.model_path)
    e_sid, e_item = model.item_embeddings()
    _parent_dir(rc.emb_sid_csv)
    _write_emb_csv(rc.emb_sid_csv, e_sid)
    _parent_dir(rc.emb_item_csv)
    _write_emb_csv(rc.emb_item_csv, e_item)
    return {"command": "export-emb", "emb_sid_csv": rc.emb_sid_csv,
            "emb_item_csv": rc.emb_item_csv, "n_items": int(e_sid.shape[0])}


def toy_model_and_batch(seed=0):
    """A 2-user / 4-item miniature for gradient checking."""
    rng = np.random.default_rng([seed, 0x70F])
    cfg = make_variant("full", sid_levels=4, sid_codes=8, d_token=4, d_item=16,
                       d_user=4, attn_dim=4, gate_hidden=4, head_hidden1=8,
                       head_hidden2=4, l_max=3)
    sid_table = np.zeros((5, 4), dtype=np.int64)
    sid_table[1:] = rng.integers(0, 8, size=(4, 4))
    model = GateSidModel(4, 2, sid_table, cfg, seed=seed)
    batch = {
        "target_ids": np.array([1, 2, 3, 4]),
        "hist_ids": np.array([[0, 2, 3], [0, 0, 1], [1, 2, 4], [0, 0, 0]]),
        "user_ids": np.array([0, 1, 0, 1]),
        "stats_raw": rng.uniform(0.0, 50.0, size=(4, 3)),
        "click": np.array([1, 0, 1, 0]),
        "pay": np.array([1, 0, 0, 0]),
    }
    model.fit_stat_norm(batch["stats_raw"])
    return model, batch


def cmd_grad_check(rc):
    model, batch = toy_model_and_batch(seed=rc.seed)
    # the contrastive weights are a stop-gradient quantity; freeze them so
    # the checked loss is a pure function of the parameters
    w0 = model.forward(batch)["w"].values.copy()
    report = dk.grad_check(lambda: model.loss(batch, contrast_w=w0)[0],
                           model.trainable_params())
    worst = max(report["max_rel_error"].values())
    if not report["passed"]:
        raise RuntimeError(f"gradient check failed for {report['failed']} "
                           f"(worst rel error {worst:.3e})")
    return {"command": "grad-check", "passed": True,
            "worst_rel_error": worst, "tolerance": report["tolerance"]}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-rqvae": cmd_train_rqvae,
    "encode-sids": cmd_encode_sids,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gate-curve": cmd_gate_curve,
    "export-emb": cmd_export_emb,
    "grad-check": cmd_grad_check,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="gatesid",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       dest="overrides", help="override one config key")
        p.add_argument("--seed", type=int, default=None,
                       help="shorthand for --set seed=N")
    return parser


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        rc = runcfg.build_config(args.config, overrides)
    except runcfg.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        summary = COMMANDS[args.command](rc)
    except MissingArtifactError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _emit(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
