"""Losses for disentangled re-identification, and hard-triplet mining.

Loss functions take torch tensors so they can be differentiated; the mining
and label helpers work on numpy arrays and explicit random generators.
"""

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .exceptions import InvalidParameterError, MiningError

PROB_FLOOR = 1e-12


@dataclass
class LossConfig:
    lambda1: float = 0.5  # triplet weight inside the ReID loss
    lambda2: float = 0.5  # softmax weight inside the ReID loss
    lambda3: float = 1.0  # illumination regression
    lambda4: float = 2.0  # generation
    margin_xi: float = 0.3
    soft_label_sigma: float = 1.0
    triplet_reduction: str = "sum"

    def __post_init__(self):
        if self.margin_xi < 0:
            raise InvalidParameterError("margin_xi must be >= 0")
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda4) < 0:
            raise InvalidParameterError("loss weights must be >= 0")
        if self.soft_label_sigma < 0:
            raise InvalidParameterError("soft_label_sigma must be >= 0")
        if self.triplet_reduction not in ("sum", "mean"):
            raise InvalidParameterError("triplet_reduction must be 'sum' or 'mean'")

    def to_dict(self):
        return asdict(self)


def _as_tensor(x):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def _safe_sqrt(sq):
    # exact zero (and zero gradient) for coincident points
    pos = sq > 0
    return torch.where(pos, torch.where(pos, sq, torch.ones_like(sq)).sqrt(), torch.zeros_like(sq))


def euclidean_distance(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise InvalidParameterError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    return _safe_sqrt(((a - b) ** 2).sum(dim=-1))


def pairwise_distances(x):
    """All-pairs Euclidean distances of the rows of ``x``."""
    x = _as_tensor(x)
    return euclidean_distance(x[:, None, :], x[None, :, :])


# ---------------------------------------------------------------------------
# mining


def _as_generator(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _pool(candidates, cap, rng):
    if len(candidates) <= cap:
        return candidates
    return np.sort(rng.choice(candidates, size=cap, replace=False))


def mine_hard_triplets(
    anchor_index, features, identities, seed=None, n_positive=16, n_negative=64, distances=None
):
    """Farthest sampled positive and nearest sampled negative for one anchor.

    Up to ``n_positive`` same-identity and ``n_negative`` other-identity
    candidates are drawn without replacement (all of them if fewer exist).
    Ties go to the lowest index.  ``distances`` may pass a precomputed row.
    """
    identities = np.asarray(identities)
    n = len(identities)
    idx = np.arange(n)
    same = identities == identities[anchor_index]
    positives = idx[same & (idx != anchor_index)]
    negatives = idx[~same]
    if len(positives) == 0:
        raise MiningError(anchor_index, "no positive candidate in batch")
    if len(negatives) == 0:
        raise MiningError(anchor_index, "no negative candidate in batch")
    rng = _as_generator(seed)
    positives = _pool(positives, n_positive, rng)
    negatives = _pool(negatives, n_negative, rng)
    if distances is None:
        feats = np.asarray(features, dtype=np.float64)
        distances = np.sqrt(((feats - feats[anchor_index]) ** 2).sum(axis=1))
    distances = np.asarray(distances)
    p = positives[np.argmax(distances[positives])]
    q = negatives[np.argmin(distances[negatives])]
    return int(p), int(q)


def mine_batch(features, identities, seed=None, n_positive=16, n_negative=64):
    """Hard triplet indices ``(anchors, positives, negatives)`` for every sample."""
    with torch.no_grad():
        dist = pairwise_distances(_as_tensor(features).detach()).cpu().numpy()
    identities = np.asarray(identities)
    n = len(identities)
    rng = _as_generator(seed)
    same = identities[:, None] == identities[None, :]
    fits = same.sum(1).max() - 1 <= n_positive and (~same).sum(1).max() <= n_negative
    if fits:
        # no subsampling: masked argmax/argmin over the whole batch
        pos_mask = same & ~np.eye(n, dtype=bool)
        neg_mask = ~same
        for i in range(n):
            if not pos_mask[i].any():
                raise MiningError(i, "no positive candidate in batch")
            if not neg_mask[i].any():
                raise MiningError(i, "no negative candidate in batch")
        pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
        neg = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)
        return np.arange(n), pos, neg
    pairs = [
        mine_hard_triplets(i, None, identities, rng, n_positive, n_negative, dist[i])
        for i in range(n)
    ]
    pos, neg = (np.array(v) for v in zip(*pairs))
    return np.arange(n), pos, neg


# ---------------------------------------------------------------------------
# losses


def triplet_loss(anchors, positives, negatives, margin=0.3):
    """Sum over triplets of ``max(D(a, p) - D(a, n) + margin, 0)``."""
    d_ap = euclidean_distance(anchors, positives)
    d_an = euclidean_distance(anchors, negatives)
    return torch.clamp(d_ap - d_an + margin, min=0).sum()


def batch_triplet_loss(features, identities, margin=0.3, seed=None, n_positive=16, n_negative=64):
    """Mine hard triplets inside a batch and return ``(sum loss, mean loss)``."""
    a, p, n = mine_batch(features, identities, seed, n_positive, n_negative)
    a, p, n = (torch.as_tensor(v, dtype=torch.long) for v in (a, p, n))
    loss = triplet_loss(features[a], features[p], features[n], margin)
    return loss, loss.detach() / len(a)


def softmax_loss(probabilities, labels, diagnostics=None):
    """Mean negative log-probability of the true class, floored at 1e-12.

    If ``diagnostics`` is a dict, ``diagnostics["prob_floor_hits"]`` counts
    floored entries.
    """
    probs = _as_tensor(probabilities)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if probs.shape[0] != labels.shape[0]:
        raise InvalidParameterError("predictions and labels must align")
    true = probs.gather(1, labels[:, None]).squeeze(1)
    floored = true < PROB_FLOOR
    if diagnostics is not None:
        diagnostics["prob_floor_hits"] = diagnostics.get("prob_floor_hits", 0) + int(
            floored.sum()
        )
    return -torch.log(torch.clamp(true, min=PROB_FLOOR)).mean()


def softmax_loss_from_logits(logits, labels):
    """Same quantity as :func:`softmax_loss` on ``softmax(logits)``, computed stably."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    return torch.nn.functional.cross_entropy(logits, labels)


def soften_label(c, sigma, seed=None):
    """Illumination label plus ``sigma`` times standard normal noise."""
    if sigma < 0:
        raise InvalidParameterError("sigma must be >= 0")
    c = np.asarray(c, dtype=np.float64)
    if sigma == 0:
        return c.copy()
    return c + sigma * _as_generator(seed).standard_normal(c.shape)


def illum_regression_loss(f_i, soft_labels, head):
    """Mean squared error between soft labels and ``W_I f_I + b_I``.

    ``head`` is an ``nn.Linear(d_f, 1)`` or a ``(W_I, b_I)`` pair.
    """
    f_i = _as_tensor(f_i)
    if isinstance(head, torch.nn.Module):
        pred = head(f_i).squeeze(-1)
    else:
        w, b = (_as_tensor(v) for v in head)
        pred = f_i @ w.reshape(-1) + b.reshape(())
    target = _as_tensor(soft_labels).to(pred.dtype)
    if target.shape != pred.shape:
        raise InvalidParameterError("features and soft labels must align")
    return ((target - pred) ** 2).mean()


def generation_loss(x, x_hat, scale=255.0):
    """Per-element mean of ``((x - x_hat) / scale) ** 2``.

    With the default scale, pixel images in [0, 255] are compared in unit
    range; pass ``scale=1`` for inputs that are already unit-normalized.
    """
    x, x_hat = _as_tensor(x), _as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise InvalidParameterError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (((x - x_hat) / scale) ** 2).mean()


def reid_loss(triplet_term, softmax_term, cfg):
    return cfg.lambda1 * triplet_term + cfg.lambda2 * softmax_term


def total_loss(phase, components, cfg, include_generated_flow=False):
    """Phase objective from loss components.

    ``components`` holds ``L_P``, ``L_I`` and, for phase III, ``L_G``; with
    ``include_generated_flow`` it also needs ``L_P_gen`` and ``L_I_gen``,
    which are added to their original-flow counterparts.
    """
    need = ["L_P", "L_I"]
    if phase == "III":
        need.append("L_G")
    elif phase != "I":
        raise InvalidParameterError(f"total_loss is defined for phases I and III, not {phase!r}")
    if include_generated_flow:
        need += ["L_P_gen", "L_I_gen"]
    missing = [k for k in need if k not in components]
    if missing:
        raise InvalidParameterError(f"phase {phase} needs components {missing}")
    l_p, l_i = components["L_P"], components["L_I"]
    if include_generated_flow:
        l_p = l_p + components["L_P_gen"]
        l_i = l_i + components["L_I_gen"]
    total = l_p + cfg.lambda3 * l_i
    if phase == "III":
        total = total + cfg.lambda4 * components["L_G"]
    return total
