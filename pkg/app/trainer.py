"""
Training loop.

One step takes one batch per domain and runs, in order: key encoding (no
gradient), target pseudo-labeling and gating, query encoding, the losses
against the current memory snapshots, an SGD step on the query encoder, the
momentum update of the key encoder, and finally the memory enqueue. Banks are
read before they are written, so a batch never contrasts with itself.

All randomness comes from one seed split into five streams: data, augmentation,
initialization, shuffling and the clustering pool.
"""
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .encoders import SGD, Architecture, EncoderPair, save_checkpoint
from .errors import ConfigError, DataFormatError, GraphError
from .losses import ContrastiveInputs, LossReport, loss_src, loss_tar, loss_total, variant_loss
from .membank import MemoryBank
from .numgrad import Graph
from .pseudo import ClusterState, PseudoLabelResult, pseudo_labels_from_logits, refine_pseudo_labels, \
    with_cluster_labels
from .schemas import METRICS_COLUMNS, MetricsRow, RunManifest, RunSummary, TrainConfig, Variant
from .synthdata import AugmentPolicy, DomainData, SuiteData, get_suite, load_suite, make_views

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "model.ckpt"
METRICS_FILE = "metrics.csv"
MEMORY_FILE = "memory.npz"
MANIFEST_FILE = "manifest.json"
SUMMARY_FILE = "summary.json"


# --- SEEDING ---

@dataclass
class RunStreams:
    data_seed: int
    augment: np.random.Generator
    init: np.random.Generator
    shuffle: np.random.Generator
    cluster: np.random.Generator


def seed_streams(seed: int) -> RunStreams:
    data, augment, init, shuffle, cluster = np.random.SeedSequence(seed).spawn(5)
    return RunStreams(
        data_seed=int(data.generate_state(1)[0]),
        augment=np.random.default_rng(augment),
        init=np.random.default_rng(init),
        shuffle=np.random.default_rng(shuffle),
        cluster=np.random.default_rng(cluster),
    )


def data_seed(seed: int) -> int:
    """The generator seed `train` uses for a run seed; gen-data writes the same datasets."""
    return seed_streams(seed).data_seed


def load_run_data(config: TrainConfig) -> SuiteData:
    return load_suite(config.suite.value, data_seed(config.seed), target=config.target, sources=config.sources,
                      n_per_domain=config.n_per_domain, n_test=config.n_test)


# --- HASHING ---

def canonical_json(payload) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_hash(config: TrainConfig) -> str:
    """Git blob hash of the canonical config JSON."""
    body = canonical_json(config.snapshot())
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


# ============================================================
# STATE
# ============================================================

@dataclass
class Batch:
    domain: int
    indices: np.ndarray
    x_query: np.ndarray
    x_key: np.ndarray
    labels: np.ndarray  # true labels; only diagnostics read them for the target


@dataclass
class TrainState:
    config: TrainConfig
    pair: EncoderPair
    optimizer: SGD
    sources: List[DomainData]
    target: DomainData
    source_banks: List[MemoryBank]
    target_bank: MemoryBank
    streams: RunStreams
    image_shape: Optional[tuple] = None
    cluster: Optional[ClusterState] = None
    step: int = 0
    epoch: int = 0

    @property
    def num_sources(self) -> int:
        return len(self.sources)

    def banks(self) -> List[MemoryBank]:
        return self.source_banks + [self.target_bank]


def combine_sources(sources: Sequence[DomainData]) -> DomainData:
    """Pool several labeled domains into one (the SourceCombine baseline)."""
    first = sources[0]
    x = np.concatenate([s.x for s in sources])
    y = np.concatenate([s.y for s in sources])
    name = "+".join(s.name for s in sources)
    return DomainData(spec=replace(first.spec, name=name, n_samples=len(y)), x=x, y=y)


def init_state(config: TrainConfig, data: Optional[SuiteData] = None) -> TrainState:
    data = data or load_run_data(config)
    streams = seed_streams(config.seed)
    sources = list(data.sources)
    if config.variant == Variant.SOURCE_COMBINE and len(sources) > 1:
        sources = [combine_sources(sources)]
    if not sources:
        raise ConfigError("at least one source domain is required")

    spec = data.target.spec
    arch = Architecture(input_dim=spec.dim, hidden=tuple(config.hidden), proj_dim=config.proj_dim,
                        num_classes=spec.num_classes)
    pair = EncoderPair(arch, alpha=config.alpha, rng=streams.init)
    optimizer = SGD(pair.theta_q, lr=config.lr, momentum=config.sgd_momentum)
    source_banks = [
        MemoryBank(m, config.memory_size, config.proj_dim, spec.num_classes, name=f"source-{s.name}")
        for m, s in enumerate(sources)
    ]
    target_bank = MemoryBank(len(sources), config.memory_size, config.proj_dim, spec.num_classes,
                             name=f"target-{data.target.name}")
    return TrainState(config=config, pair=pair, optimizer=optimizer, sources=sources, target=data.target,
                      source_banks=source_banks, target_bank=target_bank, streams=streams,
                      image_shape=spec.image_shape)


# ============================================================
# BATCHES
# ============================================================

def steps_per_epoch(state: TrainState) -> int:
    b = state.config.batch_size
    return min(len(d) // b for d in state.sources + [state.target])


def epoch_batches(state: TrainState) -> List[List[Batch]]:
    """Shuffle every domain, then cut one batch per domain per step. Views are drawn in domain order."""
    cfg = state.config
    domains = state.sources + [state.target]
    perms = [state.streams.shuffle.permutation(len(d)) for d in domains]
    suite_weak, suite_strong = augment_policies(cfg)
    steps = []
    for s in range(steps_per_epoch(state)):
        batches = []
        for m, (d, perm) in enumerate(zip(domains, perms)):
            idx = perm[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            is_target = m == len(domains) - 1
            q, k = make_views(d.x[idx], suite_weak, suite_strong, state.streams.augment,
                              target=is_target, image_shape=state.image_shape)
            batches.append(Batch(domain=m, indices=idx, x_query=q, x_key=k, labels=d.y[idx]))
        steps.append(batches)
    return steps


def augment_policies(config: TrainConfig) -> Tuple[AugmentPolicy, AugmentPolicy]:
    """The suite's (weak, strong) policies, with `flip_prob` overridden when the config sets it."""
    suite = get_suite(config.suite.value)
    if config.flip_prob is None:
        return suite.weak, suite.strong
    return replace(suite.weak, flip_prob=config.flip_prob), replace(suite.strong, flip_prob=config.flip_prob)


# ============================================================
# STEP
# ============================================================

def warmup_ramp(epoch: int, warmup_epochs: int) -> float:
    """Linear 0 -> 1 over the warmup epochs; exactly 0 at epoch 0."""
    if warmup_epochs <= 0:
        return 1.0
    return min(1.0, epoch / warmup_epochs)


def learning_rate(config: TrainConfig, step: int) -> float:
    if config.lr_warmup_steps <= 0:
        return config.lr
    return config.lr * min(1.0, (step + 1) / config.lr_warmup_steps)


@dataclass
class StepResult:
    report: LossReport
    pseudo: List[PseudoLabelResult]
    pl_acc: float
    gated_fraction: float


def train_step(state: TrainState, batches: Sequence[Batch]) -> StepResult:
    cfg = state.config
    cc = cfg.contrastive()
    pair = state.pair
    if len(batches) != state.num_sources + 1:
        raise ConfigError(f"expected {state.num_sources + 1} batches (sources + target), got {len(batches)}")
    src_batches, tgt_batch = list(batches[:-1]), batches[-1]

    # (1) key encoding, no gradient
    src_keys = [pair.encode_key(b.x_key) for b in src_batches]
    tgt_key = pair.encode_key(tgt_batch.x_key)

    # (2) pseudo-labels and gate
    pseudo = pseudo_labels_from_logits(tgt_key.logits.values, cc.rho, gate_open=cfg.target_loss)
    if state.cluster is not None:
        pseudo = with_cluster_labels(pseudo, state.cluster.assign(tgt_key.proj.values))
    classifier_labels = np.array([p.label for p in pseudo], dtype=np.int64)

    # (3) query encoding
    graph = Graph()
    src_q = [pair.encode_query(b.x_query, graph) for b in src_batches]
    tgt_q = pair.encode_query(tgt_batch.x_query, graph)

    # (4) losses against the current bank snapshots
    l_src = loss_src(graph, src_q[0].logits, src_batches[0].labels)
    for out, b in zip(src_q[1:], src_batches[1:]):
        l_src = graph.add(l_src, loss_src(graph, out.logits, b.labels))
    if len(src_q) > 1:
        l_src = graph.scale(l_src, 1.0 / len(src_q))
    l_tar, gated = loss_tar(graph, tgt_q.logits, pseudo)

    variant_fn = None
    if cc.variant != Variant.NONE:
        inputs = ContrastiveInputs(
            queries_src=[o.proj for o in src_q],
            labels_src=[b.labels for b in src_batches],
            queries_tar=tgt_q.proj,
            pseudo_labels_tar=classifier_labels,
            keys_tar=tgt_key.proj.values,
            source_banks=[bank.snapshot() for bank in state.source_banks],
            target_bank=state.target_bank.snapshot(),
        )
        variant_fn = lambda g: variant_loss(g, cc.variant, inputs, cc.tau)  # noqa: E731
    total, report = loss_total(graph, l_src, l_tar, gated, variant_fn, cc.lambda_,
                               warmup_ramp(state.epoch, cfg.warmup_epochs))

    # (5) backward + SGD on the query encoder
    pair.theta_q.zero_grad()
    query_snapshot = pair.snapshot_query()
    graph.backward(total)
    if pair.key_has_gradients():
        raise GraphError("a gradient reached the key encoder")
    state.optimizer.lr = learning_rate(cfg, state.step)
    state.optimizer.step()

    # (6) momentum update from the pre-step query values
    pair.momentum_update(query_snapshot)

    # (7) enqueue this batch's keys
    for bank, keys, b in zip(state.source_banks, src_keys, src_batches):
        bank.enqueue(keys.proj.values, b.labels)
    state.target_bank.enqueue(tgt_key.proj.values, [p.cluster_label for p in pseudo])

    state.step += 1
    n_t = len(pseudo)
    return StepResult(
        report=report,
        pseudo=pseudo,
        pl_acc=float(np.mean(classifier_labels == tgt_batch.labels)) if n_t else 0.0,
        gated_fraction=gated / n_t if n_t else 0.0,
    )


# ============================================================
# CLUSTERING / EVALUATION
# ============================================================

@dataclass
class ClusterReport:
    state: Optional[ClusterState]
    accuracy: float
    pool: int


def cluster_accuracy(labels: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean(np.asarray(labels) == np.asarray(truth))) if len(truth) else 0.0


def sample_pool(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    """Sorted indices of `size` rows drawn without replacement; every row when size >= n."""
    if size >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=size, replace=False))


def refresh_clusters(state: TrainState) -> ClusterReport:
    """Epoch-end k-means over un-augmented target key features, anchored at source class centroids."""
    cfg = state.config
    rows = sample_pool(state.streams.cluster, len(state.target), cfg.cluster_pool)
    pool = len(rows)
    tgt = state.pair.encode_key(state.target.x[rows])
    src_feats, src_labels = [], []
    for d in state.sources:
        idx = sample_pool(state.streams.cluster, len(d), cfg.cluster_pool)
        src_feats.append(state.pair.encode_key(d.x[idx]).proj.values)
        src_labels.append(d.y[idx])
    classifier_labels = np.argmax(tgt.logits.values, axis=1)
    labels, cluster = refine_pseudo_labels(state.pair, tgt.proj.values, classifier_labels,
                                           np.concatenate(src_feats), np.concatenate(src_labels), cfg.kmeans_iters)
    state.cluster = cluster
    return ClusterReport(state=cluster, accuracy=cluster_accuracy(labels, state.target.y[rows]), pool=pool)


@dataclass
class EvalReport:
    accuracy: float
    per_class: List[float]
    class_mean: float
    n: int
    encoder: str = "query"


def evaluate(pair: EncoderPair, x: np.ndarray, y: np.ndarray, encoder: str = "query") -> EvalReport:
    """Argmax accuracy on un-augmented inputs. The query classifier is the default."""
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise DataFormatError("cannot evaluate an empty dataset")
    if encoder == "query":
        logits = pair.encode_query(x, Graph(record=False)).logits.values
    elif encoder == "key":
        logits = pair.encode_key(x).logits.values
    else:
        raise ConfigError(f"unknown encoder '{encoder}' (query or key)")
    pred = np.argmax(logits, axis=1)
    per_class = []
    for c in range(pair.num_classes):
        mask = y == c
        per_class.append(float(np.mean(pred[mask] == c)) if mask.any() else float("nan"))
    present = [a for a in per_class if not np.isnan(a)]
    return EvalReport(
        accuracy=float(np.mean(pred == y)),
        per_class=per_class,
        class_mean=float(np.mean(present)),
        n=len(y),
        encoder=encoder,
    )


# ============================================================
# TRAIN
# ============================================================

@dataclass
class TrainResult:
    out_dir: str
    checkpoint: str
    metrics: str
    memory: str
    manifest: RunManifest
    summary: RunSummary
    rows: List[MetricsRow] = field(default_factory=list, repr=False)


def build_manifest(config: TrainConfig, out_dir: str) -> RunManifest:
    return RunManifest(
        config=config.snapshot(),
        seed=config.seed,
        suite=config.suite.value,
        variant=config.variant.value,
        out_dir=out_dir,
        config_hash=config_hash(config),
    )


def write_metrics(path: str, rows: Sequence[MetricsRow]) -> None:
    frame = pd.DataFrame([r.model_dump() for r in rows], columns=METRICS_COLUMNS)
    frame.to_csv(path, index=False)


def read_metrics(path: str) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def dump_memory(path: str, banks: Sequence[MemoryBank]) -> None:
    payload = {"names": np.array([b.name for b in banks])}
    for i, bank in enumerate(banks):
        keys, labels = bank.snapshot()
        payload[f"keys_{i}"] = keys
        payload[f"labels_{i}"] = labels
        payload[f"steps_{i}"] = bank.steps()
    np.savez(path, **payload)


def _row(state: TrainState, report: LossReport, gated_fraction: float, pl_acc: float,
         tgt_acc: Optional[float], wall_ms: float) -> MetricsRow:
    return MetricsRow(
        epoch=state.epoch,
        step=state.step,
        l_src=report.l_src,
        l_tar=report.l_tar,
        l_tcl=report.l_tcl,
        total=report.total,
        gated_fraction=gated_fraction,
        pl_acc=pl_acc,
        tgt_acc=tgt_acc,
        wall_ms=wall_ms if state.config.record_wall_time else 0.0,
    )


def train(config: TrainConfig, out_dir: str, data: Optional[SuiteData] = None) -> TrainResult:
    """Run every epoch and write manifest, metrics, checkpoint, memory dump and summary to out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = build_manifest(config, out_dir)
    manifest_path = os.path.join(out_dir, MANIFEST_FILE)
    with open(manifest_path, "w") as f:
        f.write(manifest.model_dump_json(indent=2))

    data = data or load_run_data(config)
    state = init_state(config, data)
    logger.info(
        f"training {config.variant.value} on {config.suite.value}: "
        f"{[d.name for d in state.sources]} -> {state.target.name}, seed={config.seed}, "
        f"{steps_per_epoch(state)} steps/epoch, {state.pair.theta_q.num_values()} parameters"
    )
    if steps_per_epoch(state) == 0:
        raise ConfigError(f"batch_size {config.batch_size} is larger than the smallest domain")

    rows: List[MetricsRow] = []
    final_eval: Optional[EvalReport] = None
    for epoch in range(config.epochs):
        state.epoch = epoch
        started = time.perf_counter()
        results: List[StepResult] = []
        for batches in epoch_batches(state):
            result = train_step(state, batches)
            results.append(result)
            if state.step % config.log_every == 0:
                r = result.report
                rows.append(_row(state, r, result.gated_fraction, result.pl_acc, None,
                                 (time.perf_counter() - started) * 1000.0))
                logger.debug(f"step {state.step}: total={r.total:.4f} src={r.l_src:.4f} "
                             f"tar={r.l_tar:.4f} tcl={r.l_tcl:.4f} gated={r.gated_count}")

        clusters = refresh_clusters(state)
        final_eval = evaluate(state.pair, data.target_test.x, data.target_test.y)
        wall_ms = (time.perf_counter() - started) * 1000.0
        mean = LossReport(
            l_src=float(np.mean([r.report.l_src for r in results])),
            l_tar=float(np.mean([r.report.l_tar for r in results])),
            l_tcl=float(np.mean([r.report.l_tcl for r in results])),
            total=float(np.mean([r.report.total for r in results])),
            lam=results[-1].report.lam,
            gated_count=sum(r.report.gated_count for r in results),
            positive_pair_count=sum(r.report.positive_pair_count for r in results),
        )
        gated_fraction = float(np.mean([r.gated_fraction for r in results]))
        pl_acc = float(np.mean([r.pl_acc for r in results]))
        rows.append(_row(state, mean, gated_fraction, pl_acc, final_eval.accuracy, wall_ms))
        logger.info(
            f"epoch {epoch + 1}/{config.epochs}: total={mean.total:.4f} src={mean.l_src:.4f} "
            f"tar={mean.l_tar:.4f} tcl={mean.l_tcl:.4f} (lambda {mean.lam:.2f}) gated={gated_fraction:.2f} "
            f"pl_acc={pl_acc:.3f} cluster_acc={clusters.accuracy:.3f} tgt_acc={final_eval.accuracy:.3f} "
            f"[{wall_ms:.0f} ms]"
        )

    checkpoint = os.path.join(out_dir, CHECKPOINT_FILE)
    metrics = os.path.join(out_dir, METRICS_FILE)
    memory = os.path.join(out_dir, MEMORY_FILE)
    save_checkpoint(state.pair, checkpoint)
    write_metrics(metrics, rows)
    dump_memory(memory, state.banks())

    key_eval = evaluate(state.pair, data.target_test.x, data.target_test.y, encoder="key")
    summary = RunSummary(
        out_dir=out_dir,
        checkpoint=checkpoint,
        metrics=metrics,
        target_accuracy=final_eval.accuracy,
        key_accuracy=key_eval.accuracy,
        class_mean_accuracy=final_eval.class_mean,
        per_class_accuracy=final_eval.per_class,
    )
    with open(os.path.join(out_dir, SUMMARY_FILE), "w") as f:
        f.write(summary.model_dump_json(indent=2))
    logger.info(f"✓ {config.variant.value} seed={config.seed}: target accuracy {final_eval.accuracy:.4f} -> {out_dir}")
    return TrainResult(out_dir=out_dir, checkpoint=checkpoint, metrics=metrics, memory=memory,
                       manifest=manifest, summary=summary, rows=rows)


def run_multisource(config: TrainConfig, out_dir: str) -> TrainResult:
    """
    M labeled sources into one target. TCL keeps one bank per source and sums
    every directed source/source and source/target term; TCL-SourceCombine
    pools the sources into a single domain and bank first.
    """
    data = load_run_data(config)
    if len(data.sources) < 1:
        raise ConfigError("multi-source training needs at least one source domain")
    logger.info(f"multi-source run: M={len(data.sources)} ({config.variant.value})")
    return train(config, out_dir, data=data)


def load_manifest(run_dir: str) -> RunManifest:
    path = os.path.join(run_dir, MANIFEST_FILE)
    try:
        with open(path) as f:
            return RunManifest.model_validate_json(f.read())
    except FileNotFoundError:
        raise DataFormatError(f"{run_dir} has no {MANIFEST_FILE}") from None


def load_memory(path: str) -> Dict[str, Dict[str, np.ndarray]]:
    try:
        payload = np.load(path)
    except (OSError, ValueError) as e:
        raise DataFormatError(f"cannot read memory dump {path}: {e}") from e
    names = [str(n) for n in payload["names"]]
    return {
        name: {"keys": payload[f"keys_{i}"], "labels": payload[f"labels_{i}"], "steps": payload[f"steps_{i}"]}
        for i, name in enumerate(names)
    }
