"""Variant sweeps that retrain the model from the same seed and compare mAP."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ContractError
from .evaluation import METRICS_HEADER, EvalResult, evaluate
from .model import MapNet, apply_state, load_checkpoint, model_state, save_checkpoint
from .ssm import MODES
from .train import train

log = logging.getLogger(__name__)

ABLATIONS = ("fusion", "scanning", "matching", "memory", "ssm-mode")


@dataclass
class Variant:
    tag: str
    overrides: dict


def variants(what: str) -> list[Variant]:
    if what == "fusion":
        return [Variant("none", dict(bmf=False, imf=False)), Variant("BMF", dict(bmf=True, imf=False)),
                Variant("IMF", dict(bmf=False, imf=True)), Variant("both", dict(bmf=True, imf=True))]
    if what == "scanning":
        return [Variant(f"{b}/{i}", dict(bev_scan=b, ins_scan=i))
                for b in ("single", "horizontal", "vertical", "multi")
                for i in ("spatial", "temporal", "spatial-temporal")]
    if what == "matching":
        return [Variant(c, dict(match_cost=c)) for c in ("chamfer", "cosine", "l2")]
    if what == "memory":
        return [Variant(f"N={n}", dict(N=n)) for n in (1, 2, 4, 6)]
    if what == "ssm-mode":
        return [Variant(m, dict(ssm_mode=m)) for m in MODES]
    raise ContractError(f"unknown ablation {what!r}; expected one of {ABLATIONS}")


def config_key(cfg: RunConfig) -> str:
    flat = cfg.to_flat()
    flat.pop("model.ssm_mode", None)   # evaluation path only; training result is mode-invariant
    blob = json.dumps(flat, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def trained_model(cfg: RunConfig, train_set, cache_dir: Path | None = None) -> tuple[MapNet, list[float]]:
    """Train (or fetch from ``cache_dir``) a model for ``cfg``; also returns per-epoch mean train loss."""
    model = MapNet(replace(cfg.model))
    path = None
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
        path = cache_dir / f"{config_key(cfg)}.mmckpt"
        if path.exists():
            tensors, meta = load_checkpoint(path)
            apply_state(model, tensors, str(path))
            return model, list(meta.get("loss_history", []))
    history = [s.loss_total for s in train(model, train_set, cfg.train_config())]
    if path is not None:
        save_checkpoint(path, model_state(model), {"model": cfg.model.to_dict(), "run": cfg.to_flat(),
                                                    "epoch": cfg.epochs, "loss_history": history})
    return model, history


def run_ablation(what: str, cfg: RunConfig, train_set, eval_set,
                 cache_dir: Path | None = None) -> list[tuple[str, EvalResult]]:
    rows = []
    if what == "ssm-mode":
        model, _ = trained_model(cfg, train_set, cache_dir)
        for v in variants(what):
            rows.append((v.tag, evaluate(model, eval_set, cfg.eval, cfg.loss, mode=v.overrides["ssm_mode"])))
        return rows
    for v in variants(what):
        vcfg = cfg.with_model(**v.overrides)
        vcfg.validate()
        log.info("ablation %s: training variant %s", what, v.tag)
        model, _ = trained_model(vcfg, train_set, cache_dir)
        res = evaluate(model, eval_set, cfg.eval, cfg.loss)
        log.info("ablation %s: %s mAP %.4f", what, v.tag, res.mAP)
        rows.append((v.tag, res))
    return rows


def write_rows(path, rows: list[tuple[str, EvalResult]], split: str = "eval") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for tag, res in rows:
            w.writerow(res.row(tag, split))


def bar_chart(path, tags: list[str], values: list[float], title: str = "", ylabel: str = "mAP") -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4.0, 0.7 * len(tags) + 2), 3.2))
    x = np.arange(len(tags))
    ax.bar(x, values, color="#4c72b0")
    ax.set_xticks(x)
    ax.set_xticklabels(tags, rotation=30 if len(tags) > 5 else 0, ha="right" if len(tags) > 5 else "center")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    for xi, v in zip(x, values):
        ax.text(xi, v, f"{v:.3f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    plt.rcParams["svg.hashsalt"] = "mapfuse"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
