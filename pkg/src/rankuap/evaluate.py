"""Attack evaluation: clean vs perturbed retrieval metrics, dropping rates,
transfer matrices, and report emission.

By default the perturbation is applied to queries AND references, matching the
threat model where the noise corrupts the corpus-wide neighborhood structure;
query-only evaluation is available as a flag.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, MetricError
from .metrics import average_precision, dropping_rate, precision_at_k, rank_references
from .resizing import apply_perturbation, perturbation_resize

PRECISION_K = 10


def _draw_index(seed, image_index):
    return int(seed) * 1_000_003 + int(image_index)


@dataclass
class MetricsReport:
    clean_map: float
    clean_mp10: float
    attacked_map: float
    attacked_mp10: float
    dr_map: float | None
    dr_mp10: float | None
    mdr: float
    per_query: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    timestamp: str = ""

    def to_dict(self, include_timestamp=True):
        d = {
            "clean_map": self.clean_map,
            "clean_mp10": self.clean_mp10,
            "attacked_map": self.attacked_map,
            "attacked_mp10": self.attacked_mp10,
            "dr_map": self.dr_map,
            "dr_mp10": self.dr_mp10,
            "mdr": self.mdr,
            "per_query": self.per_query,
            "config": self.config,
        }
        if include_timestamp:
            d["timestamp"] = self.timestamp
        return d

    def to_json(self, include_timestamp=True):
        return json.dumps(self.to_dict(include_timestamp), indent=2, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["query", "ap_clean", "ap_attacked", "p10_clean", "p10_attacked"])
        for row in self.per_query:
            writer.writerow(
                [row["query"], row["ap_clean"], row["ap_attacked"], row["p10_clean"], row["p10_attacked"]]
            )
        writer.writerow([])
        writer.writerow(["aggregate", "clean", "attacked", "dr_percent"])
        writer.writerow(["mAP", self.clean_map, self.attacked_map, self.dr_map])
        writer.writerow([f"mP@{PRECISION_K}", self.clean_mp10, self.attacked_mp10, self.dr_mp10])
        writer.writerow(["mDR", "", "", self.mdr])
        return buf.getvalue()


class EvalContext:
    """Caches resize draws, clean resized images, and clean descriptors for one
    (model, dataset, policy, seed) so repeated attacked evaluations are cheap."""

    def __init__(self, model, dataset, policy, seed=0):
        self.model = model
        self.dataset = dataset
        self.policy = policy
        self.seed = seed
        self.sizes = []
        self.resized = []
        for i, img in enumerate(dataset.images):
            hh, ww = policy.draw_size(img.shape[1], img.shape[2], _draw_index(seed, i))
            self.sizes.append((hh, ww))
            self.resized.append(
                ad.bilinear_resize(ad.constant(img[None]), hh, ww).data[0]
            )
        self.clean_descs = np.stack([model.descriptor(r) for r in self.resized])
        self.relevant = {
            int(q): {
                int(r)
                for r in dataset.reference_indices
                if dataset.labels[r] == dataset.labels[q]
            }
            for q in dataset.query_indices
        }

    def attacked_descriptors(self, pert, perturb_queries=True, perturb_references=True):
        queries = set(self.dataset.query_indices.tolist())
        descs = np.array(self.clean_descs)
        delta = ad.constant(pert.delta)
        for i, resized in enumerate(self.resized):
            is_query = i in queries
            if (is_query and not perturb_queries) or (not is_query and not perturb_references):
                continue
            hh, ww = self.sizes[i]
            d_res = perturbation_resize(delta, hh, ww)
            adv = apply_perturbation(ad.constant(resized), d_res)
            descs[i] = self.model.descriptor(adv.data)
        return descs

    def _metrics(self, descs):
        refs = self.dataset.reference_indices
        ref_descs = descs[refs]
        aps, p10s, rows = [], [], []
        for q in self.dataset.query_indices:
            order = rank_references(descs[q], ref_descs)
            ranked = [int(refs[j]) for j in order]
            rel = self.relevant[int(q)]
            aps.append(average_precision(ranked, rel))
            p10s.append(precision_at_k(ranked, rel, PRECISION_K))
            rows.append((int(q), aps[-1], p10s[-1]))
        return float(np.mean(aps)), float(np.mean(p10s)), rows

    def evaluate(self, pert=None, perturb_queries=True, perturb_references=True, config=None):
        clean_map, clean_mp10, clean_rows = self._metrics(self.clean_descs)
        if pert is None:
            attacked = self.clean_descs
        else:
            attacked = self.attacked_descriptors(pert, perturb_queries, perturb_references)
        atk_map, atk_mp10, atk_rows = self._metrics(attacked)

        drs = []
        dr_map = dr_mp10 = None
        try:
            dr_map = dropping_rate(clean_map, atk_map)
            drs.append(dr_map)
        except MetricError:
            warnings.warn("clean mAP is zero; excluded from mDR", stacklevel=2)
        try:
            dr_mp10 = dropping_rate(clean_mp10, atk_mp10)
            drs.append(dr_mp10)
        except MetricError:
            warnings.warn("clean mP@10 is zero; excluded from mDR", stacklevel=2)
        if not drs:
            raise MetricError("all clean metrics are zero; mDR undefined")

        per_query = [
            {
                "query": c[0],
                "ap_clean": c[1],
                "p10_clean": c[2],
                "ap_attacked": a[1],
                "p10_attacked": a[2],
            }
            for c, a in zip(clean_rows, atk_rows)
        ]
        return MetricsReport(
            clean_map=clean_map,
            clean_mp10=clean_mp10,
            attacked_map=atk_map,
            attacked_mp10=atk_mp10,
            dr_map=dr_map,
            dr_mp10=dr_mp10,
            mdr=float(np.mean(drs)),
            per_query=per_query,
            config=dict(config or {}),
            timestamp=datetime.now(timezone.utc).isoformat(),
        )


def evaluate_attack(model, dataset, pert, policy, seed=0, perturb_references=True, config=None):
    """Full clean-vs-attacked retrieval evaluation for one perturbation."""
    if pert is not None and np.max(np.abs(pert.delta)) > pert.epsilon + 1e-12:
        raise ConfigurationError("perturbation exceeds its own L-inf budget")
    if pert is not None and pert.delta.shape[0] != dataset.images[0].shape[0]:
        raise ConfigurationError("perturbation channel count does not match the dataset")
    ctx = EvalContext(model, dataset, policy, seed=seed)
    cfg = {
        "seed": seed,
        "perturb_references": perturb_references,
        "policy": {
            "min_side": policy.min_side,
            "max_side": policy.max_side,
            "aspect_distortion_bound": policy.aspect_distortion_bound,
            "fixed_size": policy.fixed_size,
            "seed": policy.seed,
        },
    }
    if config:
        cfg.update(config)
    return ctx.evaluate(pert, perturb_references=perturb_references, config=cfg)


def transfer_matrix(models, perturbations, dataset, policy, seed=0, perturb_references=True):
    """mDR of every (source perturbation, target model) pair; rows are sources."""
    if len(models) != len(perturbations):
        raise ConfigurationError("need exactly one perturbation per source model")
    n = len(models)
    matrix = np.zeros((n, n))
    reports = []
    for tgt_idx, target in enumerate(models):
        ctx = EvalContext(target, dataset, policy, seed=seed)
        for src_idx, pert in enumerate(perturbations):
            report = ctx.evaluate(pert, perturb_references=perturb_references)
            matrix[src_idx, tgt_idx] = report.mdr
            reports.append((src_idx, tgt_idx, report))
    return matrix, reports
