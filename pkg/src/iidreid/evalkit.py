"""Retrieval metrics and disentanglement analyses.

Rankings follow the Market-1501 single-query convention: gallery entries
sharing both identity and camera with the query are dropped before ranking.
"""

import csv
from dataclasses import asdict, dataclass, field
import json
import logging
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist
import torch

from .exceptions import InvalidParameterError
from .iidnet import images_to_tensor
from .illumsynth import gamma_adjust

logger = logging.getLogger(__name__)


@dataclass
class EvalProtocol:
    exclude_same_camera_same_id: bool = True
    distance: str = "euclidean"
    feature_source: str = "f_P"  # or "concat" for [f_P, f_I]
    normalize: bool = False

    def __post_init__(self):
        if self.feature_source not in ("f_P", "concat"):
            raise InvalidParameterError(f"unknown feature_source {self.feature_source!r}")
        if self.distance != "euclidean":
            raise InvalidParameterError("only euclidean distance is supported")

    def to_dict(self):
        return asdict(self)


@dataclass
class RankingResult:
    """Per query: valid gallery indices by ascending distance, and match flags."""

    order: list
    matches: list
    skipped: list = field(default_factory=list)  # queries without any valid match

    @property
    def n_scored(self):
        return len(self.order)


def distance_matrix(query_features, gallery_features):
    q = np.atleast_2d(np.asarray(query_features, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gallery_features, dtype=np.float64))
    if q.shape[1] != g.shape[1]:
        raise InvalidParameterError(f"feature dimension mismatch: {q.shape[1]} vs {g.shape[1]}")
    return cdist(q, g)


def rank_gallery(dist, q_ids, g_ids, q_cams=None, g_cams=None, exclude_same_camera=True):
    """Rank the gallery for every query; ties keep gallery order (stable sort)."""
    dist = np.asarray(dist)
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    if dist.shape != (len(q_ids), len(g_ids)):
        raise InvalidParameterError("distance matrix does not match metadata lengths")
    use_cams = exclude_same_camera and q_cams is not None and g_cams is not None
    order, matches, skipped = [], [], []
    for i in range(len(q_ids)):
        idx = np.argsort(dist[i], kind="stable")
        same = g_ids[idx] == q_ids[i]
        if use_cams:
            keep = ~(same & (np.asarray(g_cams)[idx] == q_cams[i]))
            idx, same = idx[keep], same[keep]
        if not same.any():
            skipped.append(i)
            continue
        order.append(idx)
        matches.append(same)
    if skipped:
        logger.debug("%d queries have no valid gallery match", len(skipped))
    return RankingResult(order, matches, skipped)


def cmc(ranking, k):
    """Fraction of scored queries whose first match is within the top ``k``."""
    if k < 1:
        raise InvalidParameterError("k must be >= 1")
    if not ranking.matches:
        return 0.0
    first = np.array([np.argmax(m) for m in ranking.matches])
    return float(np.mean(first < k))


def cmc_curve(ranking, max_k=50):
    return np.array([cmc(ranking, k) for k in range(1, max_k + 1)])


def average_precision(match_flags):
    """Mean over ground-truth matches of the precision at their rank."""
    m = np.asarray(match_flags, dtype=bool)
    hits = np.flatnonzero(m)
    if len(hits) == 0:
        raise InvalidParameterError("average precision needs at least one match")
    return float(np.mean(np.arange(1, len(hits) + 1) / (hits + 1)))


def mean_average_precision(ranking):
    if not ranking.matches:
        return 0.0
    return float(np.mean([average_precision(m) for m in ranking.matches]))


def illumination_accuracy(predictions, labels, n_scales=9):
    """Share of predictions that round (and clamp) to the true scale index."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels)
    if p.size == 0:
        raise InvalidParameterError("illumination_accuracy needs at least one prediction")
    if p.shape != y.shape:
        raise InvalidParameterError("predictions and labels must align")
    return float(np.mean(np.clip(np.rint(p), 0, n_scales - 1) == y))


def intra_inter_distances(features, identities):
    """Means of all same-identity and all different-identity pairwise distances."""
    f = np.asarray(features, dtype=np.float64)
    ids = np.asarray(identities)
    if len(np.unique(ids)) < 2:
        raise InvalidParameterError("need at least two identities")
    d = cdist(f, f)
    iu = np.triu_indices(len(ids), k=1)
    same = (ids[:, None] == ids[None, :])[iu]
    if not same.any():
        raise InvalidParameterError("no identity has two images")
    return float(d[iu][same].mean()), float(d[iu][~same].mean())


# ---------------------------------------------------------------------------
# model-driven evaluation


@torch.no_grad()
def extract(model, images, batch_size=256):
    """``f_P``, ``f_I`` and illumination predictions for a stack of images."""
    model.eval()
    dtype = next(model.parameters()).dtype
    outs = {"f_P": [], "f_I": [], "illum": []}
    for start in range(0, len(images), batch_size):
        x = images_to_tensor(images[start : start + batch_size], dtype)
        f_p, f_i = model.embed(model.encode(x))
        outs["f_P"].append(f_p.double().numpy())
        outs["f_I"].append(f_i.double().numpy())
        outs["illum"].append(model.predict_illumination(f_i).double().numpy())
    return {k: np.concatenate(v) for k, v in outs.items()}


def features_for(model, images, protocol):
    out = extract(model, images)
    f = out["f_P"] if protocol.feature_source == "f_P" else np.hstack([out["f_P"], out["f_I"]])
    if protocol.normalize:
        f = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
    return f


def evaluate_retrieval(model, data, protocol=None, return_ranking=False):
    """CMC-1/5/10 and mAP on the query/gallery splits of ``data``."""
    protocol = protocol or EvalProtocol()
    query, gallery = data.select("query"), data.select("gallery")
    if len(query) == 0 or len(gallery) == 0:
        raise InvalidParameterError(f"{data.name}: needs query and gallery splits")
    qf, gf = features_for(model, query.images, protocol), features_for(model, gallery.images, protocol)
    ranking = rank_gallery(
        distance_matrix(qf, gf),
        query.identities,
        gallery.identities,
        query.cameras,
        gallery.cameras,
        protocol.exclude_same_camera_same_id,
    )
    report = {
        "cmc1": cmc(ranking, 1),
        "cmc5": cmc(ranking, 5),
        "cmc10": cmc(ranking, 10),
        "mAP": mean_average_precision(ranking),
        "n_queries": ranking.n_scored,
        "n_skipped": len(ranking.skipped),
    }
    return (report, ranking) if return_ranking else report


def cross_dataset_eval(models, datasets, protocol=None):
    """The three train/test pairings: M1 base/base, M2 base/synth, M3 synth/synth.

    ``models`` and ``datasets`` are dicts keyed by ``"base"`` and ``"synth"``;
    a model is keyed by the dataset it was trained on.
    """
    pairs = {"M1": ("base", "base"), "M2": ("base", "synth"), "M3": ("synth", "synth")}
    out = {}
    for name, (train_id, test_id) in pairs.items():
        if train_id not in models or test_id not in datasets:
            continue
        r = evaluate_retrieval(models[train_id], datasets[test_id], protocol)
        out[name] = {"train": train_id, "test": test_id, **r}
    return out


def darken(images, gamma):
    """Low-light copy: gamma ``g`` < 1 darkens via the exponent ``1 / g``."""
    if gamma <= 0:
        raise InvalidParameterError("gamma must be > 0")
    if gamma == 1:
        return np.asarray(images, dtype=np.uint8).copy()
    return np.stack([gamma_adjust(img, 1.0 / gamma) for img in images])


def low_light_sweep(model, test_data, gammas, protocol=None):
    """Retrieval scores on darkened copies of the query and gallery images."""
    out = []
    for g in gammas:
        darkened = test_data.with_images(darken(test_data.images, g), name=f"{test_data.name}@{g}")
        out.append({"gamma": float(g), **evaluate_retrieval(model, darkened, protocol)})
    return out


def illumination_report(model, data, n_scales=9):
    pred = extract(model, data.images)["illum"]
    per_scale = {
        int(s): float(pred[data.illumination == s].mean()) for s in np.unique(data.illumination)
    }
    return {
        "accuracy": illumination_accuracy(pred, data.illumination, n_scales),
        "mean_prediction_per_scale": per_scale,
        "monotone": bool(np.all(np.diff([per_scale[k] for k in sorted(per_scale)]) > 0)),
    }


def intra_inter_report(model, data, protocol=None):
    protocol = protocol or EvalProtocol()
    f = features_for(model, data.images, protocol)
    intra, inter = intra_inter_distances(f, data.identities)
    return {"intra": intra, "inter": inter, "ratio": intra / inter}


# ---------------------------------------------------------------------------
# reports


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_eval_report(report, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True))
    return path


def write_per_query_csv(ranking, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query", "first_match_rank", "average_precision"])
        for i, m in enumerate(ranking.matches):
            w.writerow([i, int(np.argmax(m)) + 1, average_precision(m)])
