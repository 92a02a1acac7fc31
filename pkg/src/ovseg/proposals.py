"""Class-agnostic mask proposal generators.

Three routes to proposals: a graph-based image partitioner (greedy edge
merging with an adaptive threshold), hierarchical region merging over such a
partition (emitting every node of the merge tree), and a trainable query
model that predicts N soft masks plus class probabilities and is fit with
Hungarian-matched mask losses (cross-entropy + BCE + Dice).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pnm import write_pgm
from .rng import SplitMix64, sample_distinct
from .vlm import embedding_checksum, log_softmax, softmax

NO_OBJECT_WEIGHT = 0.1
BCE_CLAMP = 1e-7


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class ProposalSet:
    """Soft masks for one image, optionally with query-model class scores."""

    image_id: str
    masks: list[np.ndarray]  # each (H, W) float in [0, 1]
    class_scores: np.ndarray | None = None  # (N, S+1), last column = no-object

    def __post_init__(self):
        for m in self.masks:
            if m.min() < 0.0 or m.max() > 1.0:
                raise ValueError("mask values must lie in [0, 1]")
        if self.class_scores is not None and len(self.class_scores) != len(self.masks):
            raise ValueError("class_scores rows must align with masks")


@dataclass
class RegionPartition:
    region_ids: np.ndarray  # (H, W) int, contiguous from 0
    n_regions: int
    adjacency: set[tuple[int, int]]  # (a, b) with a < b

    def masks(self) -> list[np.ndarray]:
        return [(self.region_ids == r).astype(np.float64) for r in range(self.n_regions)]


class _Universe:
    """Union-find with union by rank and component sizes."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n
        self.size = [1] * n

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int) -> int:
        if self.rank[a] < self.rank[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        if self.rank[a] == self.rank[b]:
            self.rank[a] += 1
        return a


def _grid_edges(img: np.ndarray):
    """4-connected edges as (weight, source, target) with source < target."""
    h, w = img.shape[:2]
    idx = np.arange(h * w).reshape(h, w)
    flat = img.reshape(h * w, 3)
    right_s, right_t = idx[:, :-1].ravel(), idx[:, 1:].ravel()
    down_s, down_t = idx[:-1, :].ravel(), idx[1:, :].ravel()
    src = np.concatenate([right_s, down_s])
    dst = np.concatenate([right_t, down_t])
    weight = np.linalg.norm(flat[src] - flat[dst], axis=1)
    order = np.lexsort((dst, src, weight))
    return weight[order], src[order], dst[order]


def felz_partition(img: np.ndarray, k: float, min_size: int = 1) -> RegionPartition:
    """Graph-merge partition of an RGB float image.

    Edges (4-connectivity, Euclidean RGB weight) are processed in a total
    order (weight, source, target); components merge while the edge weight is
    within each side's internal-difference threshold Int(C) + k/|C|; a second
    pass absorbs components below min_size.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("expected a non-empty (H, W, 3) image")
    if k <= 0:
        raise ValueError("threshold scale k must be positive")
    h, w = img.shape[:2]
    n = h * w
    weights, srcs, dsts = _grid_edges(img)
    uni = _Universe(n)
    threshold = [k] * n  # Int(C) + k/|C| with Int = 0, |C| = 1 initially
    for wgt, u, v in zip(weights.tolist(), srcs.tolist(), dsts.tolist()):
        a, b = uni.find(u), uni.find(v)
        if a != b and wgt <= threshold[a] and wgt <= threshold[b]:
            root = uni.union(a, b)
            threshold[root] = wgt + k / uni.size[root]
    if min_size > 1:
        for u, v in zip(srcs.tolist(), dsts.tolist()):
            a, b = uni.find(u), uni.find(v)
            if a != b and (uni.size[a] < min_size or uni.size[b] < min_size):
                uni.union(a, b)

    labels = np.empty(n, dtype=np.int64)
    remap: dict[int, int] = {}
    for i in range(n):
        root = uni.find(i)
        if root not in remap:
            remap[root] = len(remap)
        labels[i] = remap[root]
    region_ids = labels.reshape(h, w)
    adjacency = set()
    for u, v in zip(srcs.tolist(), dsts.tolist()):
        a, b = int(labels[u]), int(labels[v])
        if a != b:
            adjacency.add((min(a, b), max(a, b)))
    return RegionPartition(region_ids, len(remap), adjacency)


def _region_histogram(img: np.ndarray, mask: np.ndarray, bins: int = 8) -> np.ndarray:
    """24-bin color histogram of the masked pixels, L1-normalized to sum 1."""
    pix = img[mask]
    idx = np.minimum((pix * bins).astype(np.int64), bins - 1)
    hist = np.concatenate([np.bincount(idx[:, c], minlength=bins) for c in range(3)])
    return hist / hist.sum()


@dataclass
class _Region:
    size: int
    bbox: tuple[int, int, int, int]  # r0, c0, r1, c1 inclusive
    hist: np.ndarray
    mask: np.ndarray  # (H, W) bool


def _merge_bbox(a, b):
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def _similarity(a: _Region, b: _Region, n_pixels: int, weights: dict[str, float]) -> float:
    color = float(np.minimum(a.hist, b.hist).sum())
    size = 1.0 - (a.size + b.size) / n_pixels
    bbox = _merge_bbox(a.bbox, b.bbox)
    bbox_area = (bbox[2] - bbox[0] + 1) * (bbox[3] - bbox[1] + 1)
    fill = 1.0 - (bbox_area - a.size - b.size) / n_pixels
    return weights["color"] * color + weights["size"] * size + weights["fill"] * fill


DEFAULT_MERGE_WEIGHTS = {"color": 1.0, "size": 1.0, "fill": 1.0}


def hierarchical_proposals(
    partition: RegionPartition,
    img: np.ndarray,
    image_id: str = "image",
    weights: dict[str, float] | None = None,
) -> ProposalSet:
    """Merge-tree proposals: greedily fuse the most similar adjacent pair.

    Starting from the partition's R regions, repeatedly merges the adjacent
    pair with the highest similarity (ties: smallest (i, j)); every initial
    and merged region becomes one binary proposal, 2R-1 in total.
    """
    weights = dict(DEFAULT_MERGE_WEIGHTS if weights is None else weights)
    img = np.asarray(img, dtype=np.float64)
    n_pixels = img.shape[0] * img.shape[1]
    regions: dict[int, _Region] = {}
    for rid in range(partition.n_regions):
        mask = partition.region_ids == rid
        rows, cols = np.nonzero(mask)
        regions[rid] = _Region(
            size=int(mask.sum()),
            bbox=(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())),
            hist=_region_histogram(img, mask),
            mask=mask,
        )
    neighbors: dict[int, set[int]] = {rid: set() for rid in regions}
    for a, b in partition.adjacency:
        neighbors[a].add(b)
        neighbors[b].add(a)

    proposals = [regions[r].mask.astype(np.float64) for r in range(partition.n_regions)]
    next_id = partition.n_regions
    while len(regions) > 1:
        best: tuple[float, int, int] | None = None
        for i in sorted(regions):
            for j in sorted(neighbors[i]):
                if j <= i:
                    continue
                sim = _similarity(regions[i], regions[j], n_pixels, weights)
                if best is None or sim > best[0]:
                    best = (sim, i, j)
        sim, i, j = best
        a, b = regions.pop(i), regions.pop(j)
        merged = _Region(
            size=a.size + b.size,
            bbox=_merge_bbox(a.bbox, b.bbox),
            hist=(a.size * a.hist + b.size * b.hist) / (a.size + b.size),
            mask=a.mask | b.mask,
        )
        regions[next_id] = merged
        new_neigh = (neighbors.pop(i) | neighbors.pop(j)) - {i, j}
        neighbors[next_id] = new_neigh
        for nb in new_neigh:
            neighbors[nb].discard(i)
            neighbors[nb].discard(j)
            neighbors[nb].add(next_id)
        proposals.append(merged.mask.astype(np.float64))
        next_id += 1
    return ProposalSet(image_id, proposals)


def _jv_assign(cost: np.ndarray):
    """Shortest-augmenting-path assignment for n <= m.

    Returns (col_of_row, u, v) where u, v are feasible dual potentials
    (u_i + v_j <= cost[i, j]) tight on matched pairs. Plain lists beat numpy
    at the tiny sizes this sees, hence the scalar inner loop.
    """
    n, m = cost.shape
    a = cost.tolist()
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)  # row matched to col j (1-based; 0 = free)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = a[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = -1
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = [-1] * n
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _optimal_cost(cost: np.ndarray) -> float:
    col_of_row, _, _ = _jv_assign(cost)
    return float(sum(cost[i, j] for i, j in enumerate(col_of_row)))


def _lex_refine(cost: np.ndarray, base_pairs: list[tuple[int, int]], opt: float, tol: float):
    """Lexicographically smallest optimal assignment, by fixing pairs greedily.

    Works on the original orientation: pairs are emitted sorted by row, and
    candidate (row, col) choices are accepted iff an optimal completion
    exists. Only invoked when the optimum is not provably unique.
    """
    n, m = cost.shape
    k = min(n, m)
    rows_left = list(range(n))
    cols_left = list(range(m))
    fixed: list[tuple[int, int]] = []
    remaining = opt
    while len(fixed) < k:
        r = rows_left[0]
        chosen = None
        sub_rows = rows_left[1:]
        # a row may be skipped only if enough rows remain to fill the quota
        may_skip = len(rows_left) - 1 >= k - len(fixed)
        for c in cols_left:
            rest_cols = [x for x in cols_left if x != c]
            need = k - len(fixed) - 1
            if need > 0:
                if len(sub_rows) < need or len(rest_cols) < need:
                    continue
                sub = cost[np.ix_(sub_rows, rest_cols)]
                if sub.shape[0] > sub.shape[1]:
                    completion = _best_k_assignment(sub.T)
                else:
                    completion = _best_k_assignment(sub)
            else:
                completion = 0.0
            if cost[r, c] + completion <= remaining + tol:
                chosen = c
                break
        if chosen is None:
            if not may_skip:
                raise AssertionError("lexicographic refinement lost the optimum")
            rows_left.pop(0)
            continue
        fixed.append((r, chosen))
        remaining -= cost[r, chosen]
        rows_left.pop(0)
        cols_left.remove(chosen)
    return fixed


def _best_k_assignment(cost: np.ndarray) -> float:
    """Minimum assignment cost matching all rows (requires rows <= cols)."""
    if cost.shape[0] == 0:
        return 0.0
    return _optimal_cost(cost)


def hungarian_match(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost bipartite assignment covering the smaller side.

    Returns min(n, m) pairs sorted by row. Among equal-cost optima the
    lexicographically smallest pair sequence wins; the (cheap) common case of
    a provably unique optimum skips that refinement.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"expected a 2-d cost matrix, got shape {cost.shape}")
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    transposed = n > m
    work = cost.T.copy() if transposed else cost
    col_of_row, u, v = _jv_assign(work)
    pairs = [(j, i) if transposed else (i, j) for i, j in enumerate(col_of_row)]
    pairs.sort()
    opt = float(sum(cost[r, c] for r, c in pairs))
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    # complementary slackness: optima only use tight edges. One tight edge per
    # row of the reduced problem means the optimum is unique.
    slack = work - np.asarray(u)[:, None] - np.asarray(v)[None, :]
    if np.all((slack <= tol).sum(axis=1) == 1):
        return pairs
    return sorted(_lex_refine(cost, pairs, opt, tol))


def dice_loss(mask: np.ndarray, gt: np.ndarray) -> float:
    """1 - 2|M∩G| / (|M| + |G|) with a soft mask M."""
    denom = float(mask.sum() + gt.sum())
    if denom == 0.0:
        return 0.0
    return 1.0 - 2.0 * float((mask * gt).sum()) / denom


def bce_loss(mask: np.ndarray, gt: np.ndarray) -> float:
    """Mean binary cross-entropy with probabilities clamped away from {0,1}."""
    m = np.clip(mask, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return float(-(gt * np.log(m) + (1.0 - gt) * np.log(1.0 - m)).mean())


def match_cost(masks: np.ndarray, probs: np.ndarray, gt_masks: np.ndarray, gt_slots: np.ndarray) -> np.ndarray:
    """Matching cost (query k, gt segment j): -p_k(c_j) + BCE + Dice.

    masks are (N, P) soft values, gt_masks (J, P) binary; both flattened over
    pixels. Vectorized: the per-pixel logs are shared across all J columns.
    """
    masks = masks.reshape(masks.shape[0], -1)
    if gt_masks.shape[0] == 0:
        return np.empty((masks.shape[0], 0))
    gt = gt_masks.reshape(gt_masks.shape[0], -1)
    if masks.shape[1] != gt.shape[1]:
        raise ValueError("masks and gt segments disagree on pixel count")
    p = masks.shape[1]
    clamped = np.clip(masks, BCE_CLAMP, 1.0 - BCE_CLAMP)
    log_m, log_1m = np.log(clamped), np.log(1.0 - clamped)
    bce = -(log_m @ gt.T + log_1m @ (1.0 - gt).T) / p
    inter = masks @ gt.T
    denom = masks.sum(axis=1)[:, None] + gt.sum(axis=1)[None, :]
    dice = np.where(denom > 0, 1.0 - 2.0 * inter / np.maximum(denom, 1e-300), 0.0)
    return -probs[:, gt_slots] + bce + dice


def pixel_features(img: np.ndarray) -> np.ndarray:
    """(H*W, 8) features: r, g, b, x/W, y/H, 3x3 in-bounds mean r, g, b."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)))
    ones = np.pad(np.ones((h, w)), ((1, 1), (1, 1)))
    acc = np.zeros_like(img)
    cnt = np.zeros((h, w))
    for dr in range(3):
        for dc in range(3):
            acc += padded[dr : dr + h, dc : dc + w]
            cnt += ones[dr : dr + h, dc : dc + w]
    mean3 = acc / cnt[:, :, None]
    ys, xs = np.mgrid[0:h, 0:w]
    feats = np.concatenate(
        [img, (xs / w)[:, :, None], (ys / h)[:, :, None], mean3], axis=2
    )
    return feats.reshape(h * w, 8)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _normalize_rows(u: np.ndarray):
    """Row normalization with a floor so all-zero rows map to zero, not NaN."""
    norms = np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-30)
    return u / norms, norms


@dataclass
class QueryModel:
    """N-query soft-mask predictor with a text-embedding classifier head."""

    embed_w: np.ndarray  # (8, 32)
    embed_b: np.ndarray  # (32,)
    queries: np.ndarray  # (N, 32)
    mask_bias: np.ndarray  # (N,)
    w_c: np.ndarray  # (32, 32)
    noobj: np.ndarray  # (N,)
    class_embs: np.ndarray  # (S, 32) frozen text embeddings
    class_indices: list[int]  # vocabulary indices the classifier covers
    s_b: float = 10.0
    embed_checksum: str = ""

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        return [
            ("embed_w", self.embed_w),
            ("embed_b", self.embed_b),
            ("queries", self.queries),
            ("mask_bias", self.mask_bias),
            ("w_c", self.w_c),
            ("noobj", self.noobj),
        ]


def init_query_model(
    class_embs: np.ndarray,
    class_indices: list[int],
    seed: int,
    n_queries: int = 16,
    dim: int = 32,
) -> QueryModel:
    rng = SplitMix64(seed)
    return QueryModel(
        embed_w=rng.uniform_array((8, dim), -0.05, 0.05),
        embed_b=rng.uniform_array((dim,), -0.05, 0.05),
        queries=rng.uniform_array((n_queries, dim), -0.05, 0.05),
        mask_bias=rng.uniform_array((n_queries,), -0.05, 0.05),
        w_c=rng.uniform_array((dim, dim), -0.05, 0.05),
        noobj=rng.uniform_array((n_queries,), -0.05, 0.05),
        class_embs=np.array(class_embs, dtype=np.float64),
        class_indices=list(class_indices),
        embed_checksum=embedding_checksum(class_embs),
    )


def query_model_forward(model: QueryModel, feats: np.ndarray):
    """Soft masks (N, P) and class probabilities (N, S+1) from pixel features."""
    if feats.shape[1] != model.embed_w.shape[0]:
        raise ValueError(f"expected {model.embed_w.shape[0]}-dim pixel features")
    psi = feats @ model.embed_w + model.embed_b
    mask_logits = model.queries @ psi.T + model.mask_bias[:, None]
    masks = _sigmoid(mask_logits)
    un, _ = _normalize_rows(model.queries @ model.w_c)
    logits = np.concatenate(
        [model.s_b * (un @ model.class_embs.T), model.noobj[:, None]], axis=1
    )
    return masks, softmax(logits, axis=1)


def extract_gt_segments(labels: np.ndarray, class_indices: list[int]):
    """One binary mask per covered class present in the (non-ignore) labels."""
    gt_masks, slots = [], []
    for slot, cls in enumerate(class_indices):
        mask = labels == cls
        if mask.any():
            gt_masks.append(mask.astype(np.float64).ravel())
            slots.append(slot)
    if not gt_masks:
        return np.empty((0, labels.size)), np.empty(0, dtype=np.int64)
    return np.stack(gt_masks), np.array(slots, dtype=np.int64)


def query_model_loss_and_grads(model: QueryModel, batch: list[tuple[np.ndarray, np.ndarray]]):
    """Mean loss over (pixel features, label map) items plus analytic grads.

    Matching (Hungarian on match_cost) is recomputed per image and treated as
    a constant: matched queries pay CE + BCE + Dice, unmatched pay 0.1 x CE
    against the no-object slot.
    """
    n_cls = model.class_embs.shape[0]
    grads = {name: np.zeros_like(arr) for name, arr in model.param_items()}
    total = 0.0
    for feats, labels in batch:
        p = feats.shape[0]
        psi = feats @ model.embed_w + model.embed_b
        mask_logits = model.queries @ psi.T + model.mask_bias[:, None]
        masks = _sigmoid(mask_logits)
        un, u_norms = _normalize_rows(model.queries @ model.w_c)
        logits = np.concatenate(
            [model.s_b * (un @ model.class_embs.T), model.noobj[:, None]], axis=1
        )
        probs = softmax(logits, axis=1)

        gt_masks, gt_slots = extract_gt_segments(labels, model.class_indices)
        if len(gt_masks):
            pairs = hungarian_match(match_cost(masks, probs, gt_masks, gt_slots))
        else:
            pairs = []
        matched = {k: j for k, j in pairs}

        targets = np.full(model.n_queries, n_cls, dtype=np.int64)
        weights = np.full(model.n_queries, NO_OBJECT_WEIGHT)
        for k, j in matched.items():
            targets[k] = gt_slots[j]
            weights[k] = 1.0
        ce = -log_softmax(logits, axis=1)[np.arange(model.n_queries), targets]
        loss = float((weights * ce).sum())

        dlogits = probs.copy()
        dlogits[np.arange(model.n_queries), targets] -= 1.0
        dlogits *= weights[:, None]

        dmask_logits = np.zeros_like(mask_logits)
        for k, j in matched.items():
            g = gt_masks[j]
            m = masks[k]
            clamped = np.clip(m, BCE_CLAMP, 1.0 - BCE_CLAMP)
            loss += float(-(g * np.log(clamped) + (1 - g) * np.log(1 - clamped)).mean())
            inter = float((m * g).sum())
            denom = float(m.sum() + g.sum())
            loss += 1.0 - 2.0 * inter / denom if denom > 0 else 0.0
            # BCE through the sigmoid collapses to (m - g)/P on the unclamped range
            unclamped = (m > BCE_CLAMP) & (m < 1.0 - BCE_CLAMP)
            dml = np.where(unclamped, (clamped - g) / p, 0.0)
            if denom > 0:
                d_dice_dm = -2.0 * (g * denom - inter) / (denom * denom)
                dml = dml + d_dice_dm * m * (1.0 - m)
            dmask_logits[k] = dml

        dq = dmask_logits @ psi
        grads["mask_bias"] += dmask_logits.sum(axis=1)
        dpsi = dmask_logits.T @ model.queries
        grads["embed_w"] += feats.T @ dpsi
        grads["embed_b"] += dpsi.sum(axis=0)

        dun = model.s_b * (dlogits[:, :n_cls] @ model.class_embs)
        duu = (dun - (dun * un).sum(axis=1, keepdims=True) * un) / u_norms
        grads["w_c"] += model.queries.T @ duu
        dq = dq + duu @ model.w_c.T
        grads["queries"] += dq
        grads["noobj"] += dlogits[:, n_cls]
        total += loss
    b = len(batch)
    for name in grads:
        grads[name] /= b
    return total / b, grads


@dataclass
class QueryTrainConfig:
    n_queries: int = 16
    steps: int = 3000
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 42


def train_query_model(
    items: list[tuple[np.ndarray, np.ndarray]],
    class_embs: np.ndarray,
    class_indices: list[int],
    config: QueryTrainConfig,
):
    """Fit a query model on (pixel features, label map) pairs.

    The classifier head (text embeddings) stays frozen; only the masks' and
    queries' parameters train. Returns (model, log dict).
    """
    if not items:
        raise ValueError("need at least one training item")
    model = init_query_model(
        class_embs, class_indices, config.seed, config.n_queries, dim=class_embs.shape[1]
    )
    rng = SplitMix64(config.seed)
    velocity = {name: np.zeros_like(arr) for name, arr in model.param_items()}
    batch_size = min(config.batch_size, len(items))
    first_loss = None
    loss = 0.0
    for step in range(config.steps):
        batch = [items[i] for i in sample_distinct(rng, len(items), batch_size)]
        loss, grads = query_model_loss_and_grads(model, batch)
        if not math.isfinite(loss):
            raise DivergenceError(f"query-model loss became non-finite at step {step}")
        if first_loss is None:
            first_loss = loss
        for name, arr in model.param_items():
            velocity[name] = config.momentum * velocity[name] + grads[name]
            arr -= config.lr * velocity[name]
    log = {"first_batch_loss": first_loss, "last_batch_loss": loss, "steps": config.steps}
    return model, log


def propose(model: QueryModel, img: np.ndarray, image_id: str = "image") -> ProposalSet:
    """All N query masks for one image, with their class scores attached."""
    h, w = img.shape[:2]
    masks, probs = query_model_forward(model, pixel_features(img))
    return ProposalSet(image_id, [m.reshape(h, w) for m in masks], probs)


def save_query_model(model: QueryModel, path: str | Path) -> None:
    doc = {
        "kind": "query_model",
        "s_b": model.s_b,
        "class_indices": model.class_indices,
        "embed_checksum": model.embed_checksum,
        "class_embs": model.class_embs.tolist(),
        "params": {name: arr.tolist() for name, arr in model.param_items()},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_query_model(path: str | Path) -> QueryModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != "query_model":
        raise ValueError(f"{path}: not a query-model checkpoint")
    p = doc["params"]
    return QueryModel(
        embed_w=np.array(p["embed_w"]),
        embed_b=np.array(p["embed_b"]),
        queries=np.array(p["queries"]),
        mask_bias=np.array(p["mask_bias"]),
        w_c=np.array(p["w_c"]),
        noobj=np.array(p["noobj"]),
        class_embs=np.array(doc["class_embs"]),
        class_indices=[int(i) for i in doc["class_indices"]],
        s_b=doc["s_b"],
        embed_checksum=doc["embed_checksum"],
    )


def export_proposals(pset: ProposalSet, directory: str | Path) -> None:
    """One P5 file per mask (values x255) plus a JSON index."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    files = []
    for i, mask in enumerate(pset.masks):
        name = f"{pset.image_id}_p{i:03d}.pgm"
        write_pgm(root / name, np.round(mask * 255.0).astype(np.uint8))
        files.append(name)
    doc = {
        "image_id": pset.image_id,
        "files": files,
        "class_scores": None if pset.class_scores is None else pset.class_scores.tolist(),
    }
    (root / f"{pset.image_id}_proposals.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n"
    )
