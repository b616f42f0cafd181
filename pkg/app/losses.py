"""
Training objectives.

Classification: source cross-entropy and confidence-gated target
cross-entropy. Contrastive: the cross-domain class-level loss in both
directions, its multi-source extension, and the two ablation variants
(instance-level InfoNCE on target data, intra-domain class-level).

Contrastive terms are averaged over positive pairs. For a positive pair
(i, j) the denominator holds the pair itself plus every key whose label
differs from the query's class; other positives of the class are left out.
Everything runs through log-sum-exp with a per-row shift.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .numgrad import Graph, Tensor, constant
from .pseudo import PseudoLabelResult
from .schemas import Variant

logger = logging.getLogger(__name__)

Snapshot = Tuple[np.ndarray, np.ndarray]  # (keys, labels) of a memory bank


@dataclass
class ContrastiveTerm:
    value: Tensor
    pair_count: int
    raw_sum: float
    pair_counts: Dict[str, int] = field(default_factory=dict)


@dataclass
class LossReport:
    l_src: float
    l_tar: float
    l_tcl: float
    total: float
    lam: float
    gated_count: int
    positive_pair_count: int
    raw_tcl_sum: float = 0.0
    pair_counts: Dict[str, int] = field(default_factory=dict)


def _zero() -> Tensor:
    return constant(0.0)


def _check_tau(tau: float) -> None:
    if tau <= 0:
        raise ConfigError(f"temperature tau must be positive, got {tau}")


# ============================================================
# CLASSIFICATION
# ============================================================

def loss_src(graph: Graph, logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean cross-entropy of the query classifier on labeled source samples."""
    picked = graph.gather(graph.log_softmax_rows(logits), labels)
    return graph.scale(graph.mean(picked), -1.0)


def loss_tar(graph: Graph, logits: Tensor, pseudo: Sequence[PseudoLabelResult]) -> Tuple[Tensor, int]:
    """Mean cross-entropy against pseudo-labels, over gated samples only."""
    rows = [i for i, p in enumerate(pseudo) if p.gated]
    if not rows:
        return _zero(), 0
    labels = [pseudo[i].label for i in rows]
    picked = graph.gather(graph.log_softmax_rows(graph.take_rows(logits, rows)), labels)
    return graph.scale(graph.mean(picked), -1.0), len(rows)


# ============================================================
# CONTRASTIVE
# ============================================================

def info_nce(graph: Graph, queries: Tensor, k_pos: np.ndarray, k_neg: np.ndarray, tau: float) -> Tensor:
    """
    Instance-level InfoNCE averaged over query rows: row i is contrasted
    against its own positive key k_pos[i] and every row of k_neg.
    """
    _check_tau(tau)
    k_pos = np.asarray(k_pos, dtype=np.float64).reshape(queries.shape)
    k_neg = np.asarray(k_neg, dtype=np.float64).reshape(-1, queries.shape[1])
    n, K = queries.shape[0], k_neg.shape[0]
    if K == 0 or n == 0:
        return _zero()

    pos = graph.div(graph.sum(graph.mul(queries, constant(k_pos)), axis=1, keepdims=True), tau)  # (n, 1)
    neg = graph.div(graph.inner(queries, constant(k_neg)), tau)                                   # (n, K)
    shift = np.maximum(pos.values, neg.values.max(axis=1, keepdims=True))
    pos_s = graph.sub(pos, constant(shift))
    neg_s = graph.sub(neg, constant(np.broadcast_to(shift, (n, K))))
    den = graph.add(graph.exp(pos_s), graph.sum(graph.exp(neg_s), axis=1, keepdims=True))
    return graph.mean(graph.sub(graph.log(den), pos_s))


def class_contrastive(graph: Graph, queries: Tensor, query_labels: Sequence[int], keys: np.ndarray,
                      key_labels: Sequence[int], tau: float, name: str = "") -> ContrastiveTerm:
    """
    Class-level contrastive term between a batch of queries and a memory of
    labeled keys. Every (query, key) pair sharing a label is a positive pair.
    """
    _check_tau(tau)
    keys = np.asarray(keys, dtype=np.float64)
    key_labels = np.asarray(key_labels, dtype=np.int64)
    query_labels = np.asarray(query_labels, dtype=np.int64)
    if keys.shape[0] == 0 or queries.shape[0] == 0:
        return ContrastiveTerm(_zero(), 0, 0.0, {name: 0} if name else {})

    positive = query_labels[:, None] == key_labels[None, :]
    pair_count = int(positive.sum())
    if pair_count == 0:
        return ContrastiveTerm(_zero(), 0, 0.0, {name: 0} if name else {})

    negative = ~positive
    # rows without negatives contribute exactly zero
    contributing = positive & negative.any(axis=1, keepdims=True)
    n, K = positive.shape

    logits = graph.div(graph.inner(queries, constant(keys)), tau)
    shift = logits.values.max(axis=1, keepdims=True)
    shifted = graph.sub(logits, constant(np.broadcast_to(shift, (n, K))))
    e = graph.exp(shifted)
    neg_mass = graph.sum(graph.mul(e, constant(negative.astype(np.float64))), axis=1, keepdims=True)
    neg_wide = graph.matmul(neg_mass, constant(np.ones((1, K))))
    # off-pair entries get +1 so the log stays finite; they are masked out below
    den = graph.add(graph.add(e, neg_wide), constant((~contributing).astype(np.float64)))
    per_pair = graph.sub(graph.log(den), shifted)
    total = graph.sum(graph.mul(per_pair, constant(contributing.astype(np.float64))))
    value = graph.div(total, pair_count)
    return ContrastiveTerm(value, pair_count, total.item(), {name: pair_count} if name else {})


def _combine(graph: Graph, terms: List[ContrastiveTerm]) -> ContrastiveTerm:
    if not terms:
        return ContrastiveTerm(_zero(), 0, 0.0)
    value = terms[0].value
    for term in terms[1:]:
        value = graph.add(value, term.value)
    counts: Dict[str, int] = {}
    for term in terms:
        counts.update(term.pair_counts)
    return ContrastiveTerm(
        value=value,
        pair_count=sum(t.pair_count for t in terms),
        raw_sum=sum(t.raw_sum for t in terms),
        pair_counts=counts,
    )


def loss_st(graph: Graph, queries_src: Tensor, labels_src: Sequence[int], target_bank: Snapshot,
            tau: float) -> ContrastiveTerm:
    """Source queries against the target memory (pseudo-labeled keys)."""
    keys, labels = target_bank
    return class_contrastive(graph, queries_src, labels_src, keys, labels, tau, name="s,t")


def loss_ts(graph: Graph, queries_tar: Tensor, pseudo_labels_tar: Sequence[int], source_bank: Snapshot,
            tau: float) -> ContrastiveTerm:
    """Target queries (pseudo-labeled) against a source memory (ground-truth keys)."""
    keys, labels = source_bank
    return class_contrastive(graph, queries_tar, pseudo_labels_tar, keys, labels, tau, name="t,s")


def loss_tcl(graph: Graph, queries_src: Tensor, labels_src: Sequence[int], queries_tar: Tensor,
             pseudo_labels_tar: Sequence[int], source_bank: Snapshot, target_bank: Snapshot,
             tau: float) -> ContrastiveTerm:
    ts = loss_ts(graph, queries_tar, pseudo_labels_tar, source_bank, tau)
    st = loss_st(graph, queries_src, labels_src, target_bank, tau)
    return _combine(graph, [ts, st])


def loss_tcl_multi(graph: Graph, queries_src: Sequence[Tensor], labels_src: Sequence[Sequence[int]],
                   queries_tar: Tensor, pseudo_labels_tar: Sequence[int], source_banks: Sequence[Snapshot],
                   target_bank: Snapshot, tau: float) -> ContrastiveTerm:
    """
    Sum over ordered source pairs (m != n) of source-vs-source terms (ground
    truth on both sides), plus both directions between every source and the
    target. With a single source this is exactly loss_tcl.
    """
    M = len(queries_src)
    if M < 1:
        raise ConfigError("at least one source domain is required")
    if not (len(labels_src) == len(source_banks) == M):
        raise ConfigError("per-source queries, labels and banks must have the same length")

    terms = []
    for m in range(M):
        for n in range(M):
            if m != n:
                keys, labels = source_banks[n]
                terms.append(class_contrastive(graph, queries_src[m], labels_src[m], keys, labels, tau,
                                               name=f"s{m},s{n}"))
    t_keys, t_labels = target_bank
    for m in range(M):
        terms.append(class_contrastive(graph, queries_src[m], labels_src[m], t_keys, t_labels, tau,
                                       name=f"s{m},t"))
    for m in range(M):
        keys, labels = source_banks[m]
        terms.append(class_contrastive(graph, queries_tar, pseudo_labels_tar, keys, labels, tau,
                                       name=f"t,s{m}"))
    return _combine(graph, terms)


def loss_icdl(graph: Graph, queries_src: Sequence[Tensor], labels_src: Sequence[Sequence[int]],
              queries_tar: Tensor, pseudo_labels_tar: Sequence[int], source_banks: Sequence[Snapshot],
              target_bank: Snapshot, tau: float) -> ContrastiveTerm:
    """Intra-domain class-level variant: each domain's queries against its own memory only."""
    terms = []
    for m, (q, y) in enumerate(zip(queries_src, labels_src)):
        keys, labels = source_banks[m]
        terms.append(class_contrastive(graph, q, y, keys, labels, tau, name=f"s{m},s{m}"))
    t_keys, t_labels = target_bank
    terms.append(class_contrastive(graph, queries_tar, pseudo_labels_tar, t_keys, t_labels, tau, name="t,t"))
    return _combine(graph, terms)


def loss_idl(graph: Graph, queries_tar: Tensor, keys_tar: np.ndarray, target_bank: Snapshot,
             tau: float) -> ContrastiveTerm:
    """Instance-level variant: each target query against its own key, target memory as negatives."""
    bank_keys, _ = target_bank
    value = info_nce(graph, queries_tar, keys_tar, bank_keys, tau)
    pairs = queries_tar.shape[0] if len(bank_keys) else 0
    return ContrastiveTerm(value, pairs, value.item() * pairs, {"t,t-instance": pairs})


# ============================================================
# VARIANT DISPATCH / TOTAL
# ============================================================

@dataclass
class ContrastiveInputs:
    """Everything a variant loss may read in one training step."""
    queries_src: List[Tensor]
    labels_src: List[np.ndarray]
    queries_tar: Tensor
    pseudo_labels_tar: np.ndarray
    keys_tar: np.ndarray
    source_banks: List[Snapshot]
    target_bank: Snapshot


def variant_loss(graph: Graph, variant: Variant, inputs: ContrastiveInputs, tau: float) -> Optional[ContrastiveTerm]:
    if variant in (Variant.TCL, Variant.SOURCE_COMBINE):
        return loss_tcl_multi(graph, inputs.queries_src, inputs.labels_src, inputs.queries_tar,
                              inputs.pseudo_labels_tar, inputs.source_banks, inputs.target_bank, tau)
    if variant == Variant.ICDL:
        return loss_icdl(graph, inputs.queries_src, inputs.labels_src, inputs.queries_tar,
                         inputs.pseudo_labels_tar, inputs.source_banks, inputs.target_bank, tau)
    if variant == Variant.IDL:
        return loss_idl(graph, inputs.queries_tar, inputs.keys_tar, inputs.target_bank, tau)
    return None


def loss_total(graph: Graph, l_src: Tensor, l_tar: Tensor, gated_count: int,
               variant_fn: Optional[Callable[[Graph], Optional[ContrastiveTerm]]],
               lam: float, ramp: float = 1.0) -> Tuple[Tensor, LossReport]:
    """
    total = L_src + L_tar + (lam * ramp) * L_variant.

    lam == 0 (or no variant) skips the variant entirely. A zero ramp with a
    nonzero lam still evaluates the variant for reporting, outside the
    recorded graph, and leaves it out of the total.
    """
    weight = lam * ramp
    base = graph.add(l_src, l_tar)
    term: Optional[ContrastiveTerm] = None

    if variant_fn is not None and lam != 0.0:
        if weight == 0.0:
            term = variant_fn(Graph(record=False))
        else:
            term = variant_fn(graph)

    if term is None or weight == 0.0:
        total = base
    else:
        total = graph.add(base, graph.scale(term.value, weight))

    report = LossReport(
        l_src=l_src.item(),
        l_tar=l_tar.item(),
        l_tcl=term.value.item() if term is not None else 0.0,
        total=total.item(),
        lam=weight,
        gated_count=gated_count,
        positive_pair_count=term.pair_count if term is not None else 0,
        raw_tcl_sum=term.raw_sum if term is not None else 0.0,
        pair_counts=dict(term.pair_counts) if term is not None else {},
    )
    return total, report
