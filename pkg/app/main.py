# ============================================
# MAIN.PY: command-line harness
# ============================================
# gen-data | train | eval | ablate | sweep-lambda | leave-one-out | acceptance | gradcheck | inspect-memory
# Exit codes: 0 ok, 1 usage/config, 2 data, 3 numeric.

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError
from slugify import slugify
from sqlalchemy.orm import Session

from . import database, models
from .encoders import Architecture, EncoderPair, encode, init_params, read_checkpoint
from .errors import ConfigError, DataFormatError, MemoryBankError, NumericError, TCLError
from .losses import info_nce, loss_icdl, loss_idl, loss_src, loss_st, loss_tar, loss_tcl_multi, loss_ts, \
    class_contrastive
from .membank import KEY_NORM_TOLERANCE
from .numgrad import GradcheckResult, Tensor, gradcheck
from .preview import write_preview
from .pseudo import PseudoLabelResult
from .schemas import TrainConfig, Variant
from .synthdata import SPLIT_TRAIN, generate_domain, get_suite, write_csv, write_dataset
from .trainer import CHECKPOINT_FILE, MEMORY_FILE, METRICS_FILE, SUMMARY_FILE, config_hash, data_seed, evaluate, \
    load_manifest, load_memory, load_run_data, read_metrics, train

logger = logging.getLogger(__name__)

# --- CONFIGURATION ---
DATA_DIR = database.DATA_DIR
LOG_LEVEL = os.environ.get("TCL_LOG_LEVEL", "INFO")

DEFAULT_SEEDS = [0, 1, 2, 3, 4]
DEFAULT_SWEEP_SEEDS = [0, 1, 2]
DEFAULT_LAMBDA_GRID = [round(0.1 * i, 1) for i in range(11)]

REQUIRED_KEYS = ("suite", "variant")
LIST_KEYS = ("hidden", "sources")
OPTIONAL_KEYS = ("target", "sources", "n_per_domain", "flip_prob")


def configure_logging(level: Optional[str] = None):
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


# --- REGISTRY SESSION ---
# Tests swap get_db for an in-memory session, the same way a web app overrides a dependency.
dependency_overrides: Dict[Callable, Callable] = {}


def get_db():
    database.init_db()
    yield from database.get_db()


@contextmanager
def registry_session():
    provider = dependency_overrides.get(get_db, get_db)
    gen = provider()
    db = next(gen)
    try:
        yield db
    finally:
        gen.close()


# ============================================
# CONFIG FILES
# ============================================

def known_keys() -> List[str]:
    keys = [k for k in TrainConfig.model_fields if k != "lambda_"]
    return keys + ["lambda"]


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Flat `key = value` lines, `#` comments. Returns raw strings."""
    values: Dict[str, str] = {}
    allowed = set(known_keys()) | {"lambda_"}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "lambda_":
            key = "lambda"
        if key not in allowed:
            raise ConfigError(f"{source}:{lineno}: unknown config key '{key}'")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate config key '{key}'")
        values[key] = value
    return values


def read_config_file(path: str) -> Dict[str, str]:
    try:
        with open(path) as f:
            return parse_config_text(f.read(), source=path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None


def _coerce(key: str, value):
    if not isinstance(value, str):
        return value
    if key in OPTIONAL_KEYS and value.lower() in ("", "none"):
        return None
    if key in LIST_KEYS:
        return [v.strip() for v in value.split(",") if v.strip()]
    return value


def build_config(values: Dict[str, object], overrides: Optional[Dict[str, object]] = None) -> TrainConfig:
    """Merge overrides over file values and validate. Errors name the offending key."""
    merged = dict(values)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged["lambda" if key == "lambda_" else key] = value
    for key in REQUIRED_KEYS:
        if key not in merged:
            raise ConfigError(f"missing config key '{key}'")
    try:
        return TrainConfig(**{k: _coerce(k, v) for k, v in merged.items()})
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"invalid config: {problems}") from None


def config_from_args(args) -> TrainConfig:
    values = read_config_file(args.config) if args.config else {}
    overrides = {
        "seed": args.seed,
        "lambda": getattr(args, "lam", None),
        "variant": getattr(args, "variant", None),
        "epochs": getattr(args, "epochs", None),
        "rho": getattr(args, "rho", None),
        "target": getattr(args, "target", None),
        "suite": getattr(args, "suite", None),
    }
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in known_keys():
            raise ConfigError(f"unknown config key '{key}'")
        overrides[key] = value
    return build_config(values, overrides)


# ============================================
# RUN CELLS
# ============================================

def run_slug(config: TrainConfig, cell: str = "") -> str:
    return slugify(f"{config.suite.value}-{cell or config.variant.value}-seed-{config.seed}")


def _train_cell(config_json: str, out_dir: str) -> Tuple[float, float]:
    """Process-pool entry point: one fully seeded training run."""
    config = TrainConfig.model_validate_json(config_json)
    summary = train(config, out_dir).summary
    return summary.target_accuracy, summary.class_mean_accuracy


def _cached_run(db: Session, config: TrainConfig, out_dir: str) -> Optional[models.Run]:
    run = (
        db.query(models.Run)
        .filter(models.Run.config_hash == config_hash(config), models.Run.out_dir == out_dir,
                models.Run.status == "done")
        .order_by(models.Run.id.desc())
        .first()
    )
    if run and os.path.exists(os.path.join(out_dir, SUMMARY_FILE)):
        return run
    return None


def run_cells(db: Session, cells: Sequence[Tuple[str, TrainConfig, str]], group: str, threads: int = 1) -> List[models.Run]:
    """
    Train (cell, config, out_dir) triples and record them in the registry.
    Runs with an identical config hash and a finished run directory are reused.
    """
    runs: List[models.Run] = []
    pending = []
    for cell, config, out_dir in cells:
        cached = _cached_run(db, config, out_dir)
        if cached:
            logger.info(f"✓ reusing {cell} seed={config.seed} ({cached.target_accuracy:.4f})")
            runs.append(cached)
            continue
        run = models.Run(config_hash=config_hash(config), group=group, cell=cell, suite=config.suite.value,
                         variant=config.variant.value, target=config.target or get_suite(config.suite.value).default_target,
                         seed=config.seed, lam=config.lambda_, out_dir=out_dir)
        db.add(run)
        db.commit()
        db.refresh(run)
        runs.append(run)
        pending.append((run, config, out_dir))

    def finish(run, outcome):
        acc, class_mean = outcome
        run.finish(acc, class_mean)
        db.commit()

    if threads > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [(run, pool.submit(_train_cell, cfg.model_dump_json(by_alias=True), out)) for run, cfg, out in pending]
            for run, future in futures:
                try:
                    finish(run, future.result())
                except Exception:
                    run.fail()
                    db.commit()
                    raise
    else:
        for run, cfg, out in pending:
            try:
                finish(run, _train_cell(cfg.model_dump_json(by_alias=True), out))
            except Exception:
                run.fail()
                db.commit()
                raise
    return runs


def summarize(runs: Sequence[models.Run], key: str = "cell") -> pd.DataFrame:
    """Per-run rows in cell order, then one mean/std row per cell."""
    frame = pd.DataFrame([
        {key: getattr(r, key), "seed": r.seed, "tgt_acc": r.target_accuracy}
        for r in runs
    ])
    stats = frame.groupby(key, sort=False)["tgt_acc"].agg(["mean", "std"]).reset_index()
    summary = pd.DataFrame({key: stats[key], "seed": "mean", "tgt_acc": stats["mean"], "std": stats["std"].fillna(0.0)})
    frame["std"] = np.nan
    frame["seed"] = frame["seed"].astype(str)
    return pd.concat([frame, summary], ignore_index=True)


def _parse_list(text: Optional[str], cast, default):
    if not text:
        return list(default)
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}") from None


def _out_dir(args, *parts) -> str:
    return os.path.join(args.out or os.path.join(DATA_DIR, "runs"), *parts)


# ============================================
# COMMANDS
# ============================================

def cmd_gen_data(args) -> int:
    suite_name = args.suite or (read_config_file(args.config).get("suite") if args.config else None)
    if not suite_name:
        raise ConfigError("gen-data needs --suite or a config with a suite key")
    suite = get_suite(suite_name)
    seed = args.seed if args.seed is not None else 0
    out = args.out or os.path.join(DATA_DIR, suite.name)
    os.makedirs(out, exist_ok=True)
    n = args.n or suite.default_n

    generated = []
    for spec in suite.domains:
        data = generate_domain(replace(spec, n_samples=n), data_seed(seed), SPLIT_TRAIN)
        path = os.path.join(out, f"{spec.name}.tclds")
        write_dataset(path, data)
        if args.csv:
            write_csv(os.path.join(out, f"{spec.name}.csv"), data)
        generated.append(data)
        logger.info(f"✓ {spec.name}: {len(data)} samples -> {path}")
    if args.preview:
        write_preview(os.path.join(out, "preview.png"), generated)
        logger.info(f"✓ preview sheet -> {os.path.join(out, 'preview.png')}")
    return 0


def cmd_train(args) -> int:
    config = config_from_args(args)
    out_dir = args.out or _out_dir(args, run_slug(config))
    with registry_session() as db:
        runs = run_cells(db, [(config.variant.value, config, out_dir)], group="train")
        accuracy = runs[0].target_accuracy
    print(f"target accuracy {accuracy:.4f} ({out_dir})")
    return 0


def cmd_eval(args) -> int:
    if args.run:
        manifest = load_manifest(args.run)
        config = TrainConfig(**manifest.config)
        checkpoint = os.path.join(args.run, CHECKPOINT_FILE)
    else:
        if not (args.checkpoint and args.config):
            raise ConfigError("eval needs --run DIR or --checkpoint with --config")
        config = config_from_args(args)
        checkpoint = args.checkpoint
    data = load_run_data(config)
    pair = EncoderPair.from_checkpoint(checkpoint, alpha=config.alpha)
    rows = []
    for encoder in ("query", "key"):
        report = evaluate(pair, data.target_test.x, data.target_test.y, encoder=encoder)
        rows.append({"encoder": encoder, "accuracy": report.accuracy, "class_mean": report.class_mean,
                     **{f"class_{c}": a for c, a in enumerate(report.per_class)}})
    frame = pd.DataFrame(rows)
    if args.csv:
        frame.to_csv(args.csv, index=False)
    print(frame.to_string(index=False))
    return 0


ABLATION_CELLS = ("TCL", "w/o L_tar", "w/o L_tcl", "IDL", "ICDL")


def ablation_config(base: TrainConfig, cell: str) -> TrainConfig:
    changes = {
        "TCL": {"variant": Variant.TCL},
        "w/o L_tar": {"variant": Variant.TCL, "target_loss": False},
        "w/o L_tcl": {"variant": Variant.TCL, "lambda_": 0.0},
        "IDL": {"variant": Variant.IDL},
        "ICDL": {"variant": Variant.ICDL},
        "Source Only": {"variant": Variant.NONE, "target_loss": False, "lambda_": 0.0},
        "TCL-SourceCombine": {"variant": Variant.SOURCE_COMBINE},
    }[cell]
    return base.model_copy(update=changes)


def cmd_ablate(args) -> int:
    base = config_from_args(args)
    seeds = _parse_list(args.seeds, int, DEFAULT_SEEDS)
    cells = list(ABLATION_CELLS) + (["Source Only"] if args.baseline else [])
    jobs = []
    for cell in cells:
        for seed in seeds:
            config = ablation_config(base, cell).model_copy(update={"seed": seed})
            jobs.append((cell, config, _out_dir(args, "ablate", run_slug(config, cell))))
    with registry_session() as db:
        runs = run_cells(db, jobs, group="ablate", threads=args.threads)
        table = summarize(runs)
    path = os.path.join(_out_dir(args), "ablate.csv")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    table.to_csv(path, index=False)
    print(table.to_string(index=False))
    logger.info(f"✓ ablation summary -> {path}")
    return 0


def cmd_sweep_lambda(args) -> int:
    base = config_from_args(args)
    seeds = _parse_list(args.seeds, int, DEFAULT_SWEEP_SEEDS)
    grid = sorted(_parse_list(args.grid, float, DEFAULT_LAMBDA_GRID))
    jobs = []
    for lam in grid:
        for seed in seeds:
            config = base.model_copy(update={"lambda_": lam, "seed": seed})
            config = TrainConfig(**config.snapshot())  # re-validate the grid value
            cell = "w/o L_tcl" if lam == 0 and config.variant == Variant.TCL else f"lambda-{lam:g}"
            out_dir = _out_dir(args, "ablate" if cell == "w/o L_tcl" else "sweep", run_slug(config, cell))
            jobs.append((cell, config, out_dir))
    with registry_session() as db:
        runs = run_cells(db, jobs, group="sweep", threads=args.threads)
        frame = pd.DataFrame([{"lambda": r.lam, "seed": r.seed, "tgt_acc": r.target_accuracy} for r in runs])
    path = os.path.join(_out_dir(args), "sweep_lambda.csv")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    frame.to_csv(path, index=False)
    print(frame.to_string(index=False))
    logger.info(f"✓ lambda sweep -> {path}")
    return 0


def cmd_leave_one_out(args) -> int:
    base = config_from_args(args)
    seeds = _parse_list(args.seeds, int, DEFAULT_SEEDS)
    suite = get_suite(base.suite.value)
    jobs = []
    for target in suite.names:
        for seed in seeds:
            config = base.model_copy(update={"target": target, "sources": None, "seed": seed})
            jobs.append((target, config, _out_dir(args, "leave-one-out", run_slug(config, f"{target}-{base.variant.value}"))))
    with registry_session() as db:
        runs = run_cells(db, jobs, group="leave-one-out", threads=args.threads)
        frame = pd.DataFrame([{"target": r.target, "seed": r.seed, "tgt_acc": r.target_accuracy} for r in runs])
    stats = frame.groupby("target", sort=False)["tgt_acc"].agg(["mean", "std"]).reset_index()
    frame["std"] = np.nan
    frame["seed"] = frame["seed"].astype(str)
    table = pd.concat([frame, pd.DataFrame({"target": stats["target"], "seed": "mean", "tgt_acc": stats["mean"],
                                            "std": stats["std"].fillna(0.0)})], ignore_index=True)
    path = os.path.join(_out_dir(args), "leave_one_out.csv")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    table.to_csv(path, index=False)
    print(table.to_string(index=False))
    return 0


# --- ACCEPTANCE ---

ACCEPTANCE_CELLS = ("Source Only", "TCL", "w/o L_tar", "w/o L_tcl", "IDL", "ICDL", "TCL-SourceCombine")
ADAPTATION_MARGIN = 0.10
GATE_TREND_EPOCHS = 10


def gate_trend(metrics: pd.DataFrame, epochs: int = GATE_TREND_EPOCHS) -> float:
    """Least-squares slope of the epoch-end gated fraction over the first `epochs` epochs."""
    ends = metrics[metrics["tgt_acc"].notna()].head(epochs)
    if len(ends) < 2:
        return 0.0
    return float(np.polyfit(ends["epoch"].to_numpy(float), ends["gated_fraction"].to_numpy(float), 1)[0])


def acceptance_checks(per_seed: pd.DataFrame, gate_slopes: Sequence[float]) -> pd.DataFrame:
    """
    Orderings over a seeds x cells accuracy frame. Per-seed checks need all
    but one seed to hold (4 of 5).
    """
    mean = per_seed.mean()
    need = max(len(per_seed) - 1, 1)

    def wins(a: str, b: str) -> int:
        return int((per_seed[a] >= per_seed[b]).sum())

    gain = mean["TCL"] - mean["Source Only"]
    rows = [
        ("TCL beats Source Only", gain >= ADAPTATION_MARGIN, f"gain {gain:+.4f} (need {ADAPTATION_MARGIN:+.2f})"),
    ]
    for other in ("w/o L_tar", "w/o L_tcl"):
        w = wins("TCL", other)
        rows.append((f"TCL >= {other}", mean["TCL"] >= mean[other] and w >= need,
                     f"means {mean['TCL']:.4f} vs {mean[other]:.4f}, {w}/{len(per_seed)} seeds"))
    rows.append(("TCL >= ICDL >= IDL", mean["TCL"] >= mean["ICDL"] >= mean["IDL"],
                 f"means {mean['TCL']:.4f} / {mean['ICDL']:.4f} / {mean['IDL']:.4f}"))
    rows.append(("TCL >= TCL-SourceCombine", mean["TCL"] >= mean["TCL-SourceCombine"],
                 f"means {mean['TCL']:.4f} vs {mean['TCL-SourceCombine']:.4f}"))
    rising = sum(s >= 0.0 for s in gate_slopes)
    rows.append(("gated fraction rises", rising >= need and len(gate_slopes) > 0,
                 f"{rising}/{len(gate_slopes)} seeds with non-negative slope"))
    return pd.DataFrame(rows, columns=["check", "holds", "detail"])


def cmd_acceptance(args) -> int:
    base = config_from_args(args)
    seeds = _parse_list(args.seeds, int, DEFAULT_SEEDS)
    jobs = []
    for cell in ACCEPTANCE_CELLS:
        for seed in seeds:
            config = ablation_config(base, cell).model_copy(update={"seed": seed})
            jobs.append((cell, config, _out_dir(args, "ablate", run_slug(config, cell))))
    with registry_session() as db:
        runs = run_cells(db, jobs, group="acceptance", threads=args.threads)
        table = summarize(runs)
        frame = pd.DataFrame([{"cell": r.cell, "seed": r.seed, "tgt_acc": r.target_accuracy, "out_dir": r.out_dir}
                              for r in runs])
    per_seed = frame.pivot(index="seed", columns="cell", values="tgt_acc")
    slopes = [gate_trend(read_metrics(os.path.join(out, METRICS_FILE)))
              for out in frame.loc[frame["cell"] == "TCL", "out_dir"]]
    checks = acceptance_checks(per_seed, slopes)

    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    table.to_csv(os.path.join(out, "acceptance.csv"), index=False)
    checks.to_csv(os.path.join(out, "acceptance_checks.csv"), index=False)
    print(table.to_string(index=False))
    print(checks.to_string(index=False))
    for _, row in checks.iterrows():
        if row["holds"]:
            logger.info(f"✓ {row['check']}: {row['detail']}")
        else:
            logger.warning(f"✗ {row['check']}: {row['detail']}")
    return 0


# --- GRADIENT CHECK SUITE ---

def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _bank(rng: np.random.Generator, size: int, d: int, num_classes: int):
    labels = rng.integers(0, num_classes, size=size)
    labels[:num_classes] = np.arange(num_classes)
    return _unit_rows(rng, size, d), labels


def _query(rng: np.random.Generator, b: int, d: int) -> Tensor:
    return Tensor(rng.standard_normal((b, d)), requires_grad=True, name="queries")


def _case_info_nce(rng, tau):
    q = _query(rng, 3, 4)
    k_pos, k_neg = _unit_rows(rng, 3, 4), _unit_rows(rng, 5, 4)
    return (lambda g: info_nce(g, g.l2normalize_rows(q), k_pos, k_neg, tau)), [q]


def _case_loss_src(rng, tau):
    logits = Tensor(rng.standard_normal((4, 3)), requires_grad=True, name="logits")
    labels = rng.integers(0, 3, size=4)
    return (lambda g: loss_src(g, logits, labels)), [logits]


def _case_loss_tar(rng, tau):
    logits = Tensor(rng.standard_normal((4, 3)), requires_grad=True, name="logits")
    labels = rng.integers(0, 3, size=4)
    gates = rng.random(4) < 0.5
    gates[0] = True
    pseudo = [PseudoLabelResult(int(y), 0.99, int(y), bool(gt)) for y, gt in zip(labels, gates)]
    return (lambda g: loss_tar(g, logits, pseudo)[0]), [logits]


def _case_loss_st(rng, tau):
    q = _query(rng, 4, 4)
    labels = rng.integers(0, 3, size=4)
    bank = _bank(rng, 8, 4, 3)
    return (lambda g: loss_st(g, g.l2normalize_rows(q), labels, bank, tau).value), [q]


def _case_loss_ts(rng, tau):
    q = _query(rng, 4, 4)
    pseudo = rng.integers(0, 3, size=4)
    bank = _bank(rng, 8, 4, 3)
    return (lambda g: loss_ts(g, g.l2normalize_rows(q), pseudo, bank, tau).value), [q]


def _case_loss_tcl_multi(rng, tau):
    qs = [_query(rng, 3, 4) for _ in range(2)]
    ys = [rng.integers(0, 3, size=3) for _ in range(2)]
    qt = _query(rng, 3, 4)
    yt = rng.integers(0, 3, size=3)
    banks = [_bank(rng, 6, 4, 3) for _ in range(2)]
    tbank = _bank(rng, 6, 4, 3)

    def fn(g):
        return loss_tcl_multi(g, [g.l2normalize_rows(q) for q in qs], ys, g.l2normalize_rows(qt), yt,
                              banks, tbank, tau).value
    return fn, qs + [qt]


def _case_idl(rng, tau):
    q = _query(rng, 3, 4)
    keys = _unit_rows(rng, 3, 4)
    bank = _bank(rng, 6, 4, 3)
    return (lambda g: loss_idl(g, g.l2normalize_rows(q), keys, bank, tau).value), [q]


def _case_icdl(rng, tau):
    qs = _query(rng, 3, 4)
    ys = rng.integers(0, 3, size=3)
    qt = _query(rng, 3, 4)
    yt = rng.integers(0, 3, size=3)
    sbank, tbank = _bank(rng, 6, 4, 3), _bank(rng, 6, 4, 3)

    def fn(g):
        return loss_icdl(g, [g.l2normalize_rows(qs)], [ys], g.l2normalize_rows(qt), yt, [sbank], tbank, tau).value
    return fn, [qs, qt]


def _case_encoder(rng, tau):
    arch = Architecture(input_dim=5, hidden=(6,), proj_dim=3, num_classes=3)
    params = init_params(arch, rng)
    x = rng.standard_normal((4, 5))
    labels = rng.integers(0, 3, size=4)
    keys, key_labels = _bank(rng, 6, 3, 3)

    def fn(g):
        out = encode(params, x, g, arch)
        term = class_contrastive(g, out.proj, labels, keys, key_labels, tau)
        return g.add(loss_src(g, out.logits, labels), term.value)
    return fn, [t for _, t in params.items()]


GRADCHECK_CASES: Dict[str, Callable] = {
    "info_nce": _case_info_nce,
    "loss_src": _case_loss_src,
    "loss_tar": _case_loss_tar,
    "loss_st": _case_loss_st,
    "loss_ts": _case_loss_ts,
    "loss_tcl_multi": _case_loss_tcl_multi,
    "loss_idl": _case_idl,
    "loss_icdl": _case_icdl,
    "encoder": _case_encoder,
}


def gradcheck_suite(seed: int = 0, instances: int = 20, tau: float = 0.05,
                    cases: Optional[Dict[str, Callable]] = None) -> List[GradcheckResult]:
    """Worst relative error per loss over random small instances."""
    rng = np.random.default_rng(seed)
    results = []
    for name, build in (cases or GRADCHECK_CASES).items():
        worst, checked, passed = 0.0, 0, True
        for _ in range(instances):
            fn, params = build(rng, tau)
            r = gradcheck(fn, params, name=name)
            worst = max(worst, r.max_rel_error)
            checked += r.checked
            passed = passed and r.passed
        results.append(GradcheckResult(name=name, max_rel_error=worst, checked=checked, passed=passed))
    return results


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = gradcheck_suite(seed=seed, instances=args.instances)
    frame = pd.DataFrame([{"loss": r.name, "max_rel_error": r.max_rel_error, "checked": r.checked,
                           "passed": r.passed} for r in results])
    print(frame.to_string(index=False))
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")
    logger.info(f"✓ gradcheck passed ({len(results)} losses)")
    return 0


# --- MEMORY INSPECTION ---

def memory_frame(run_dir: str) -> pd.DataFrame:
    """Every bank entry of a finished run, validated against the run's checkpoint."""
    tensors = read_checkpoint(os.path.join(run_dir, CHECKPOINT_FILE))
    q_shapes = {n[2:]: v.shape for n, v in tensors.items() if n.startswith("q.")}
    arch = Architecture.from_shapes(q_shapes)
    path = os.path.join(run_dir, MEMORY_FILE)
    if not os.path.exists(path):
        raise DataFormatError(f"{run_dir} has no {MEMORY_FILE}")
    rows = []
    for name, bank in load_memory(path).items():
        keys, labels, steps = bank["keys"], bank["labels"], bank["steps"]
        if keys.size and keys.shape[1] != arch.proj_dim:
            raise MemoryBankError(f"{name}: key dim {keys.shape[1]} does not match checkpoint ({arch.proj_dim})")
        if len(labels) and (labels.min() < 0 or labels.max() >= arch.num_classes):
            raise MemoryBankError(f"{name}: labels outside [0, {arch.num_classes})")
        norms = np.linalg.norm(keys, axis=1) if keys.size else np.zeros(0)
        if len(norms) and np.max(np.abs(norms - 1.0)) > KEY_NORM_TOLERANCE:
            raise MemoryBankError(f"{name}: keys are not unit-norm")
        for i in range(len(labels)):
            row = {"step": int(steps[i]), "domain": name, "label": int(labels[i])}
            row.update({f"k_{j}": float(v) for j, v in enumerate(keys[i])})
            rows.append(row)
    return pd.DataFrame(rows)


def cmd_inspect_memory(args) -> int:
    if not args.run:
        raise ConfigError("inspect-memory needs --run DIR")
    frame = memory_frame(args.run)
    if args.csv:
        frame.to_csv(args.csv, index=False)
        logger.info(f"✓ {len(frame)} memory entries -> {args.csv}")
    else:
        frame.to_csv(sys.stdout, index=False)
    return 0


# ============================================
# PARSER / ENTRY POINT
# ============================================

class HarnessParser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="parallel training runs for harness commands")
    common.add_argument("--log-level", default=None)

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--lambda", dest="lam", type=float)
    training.add_argument("--variant")
    training.add_argument("--epochs", type=int)
    training.add_argument("--rho", type=float)
    training.add_argument("--target")
    training.add_argument("--suite")
    training.add_argument("--set", action="append", metavar="KEY=VALUE", help="any other config key")

    parser = HarnessParser(prog="tcl", description="Transferable contrastive domain adaptation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a suite's datasets")
    p.add_argument("--suite")
    p.add_argument("--n", type=int, help="samples per domain")
    p.add_argument("--csv", action="store_true", help="also write CSV mirrors")
    p.add_argument("--preview", action="store_true", help="also write a PNG contact sheet")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common, training], help="train one run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common, training], help="evaluate a checkpoint on the held-out target split")
    p.add_argument("--run", help="run directory")
    p.add_argument("--checkpoint")
    p.add_argument("--csv", help="write the report to this CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common, training], help="TCL vs w/o L_tar, w/o L_tcl, IDL, ICDL")
    p.add_argument("--seeds", help="comma separated, default 0,1,2,3,4")
    p.add_argument("--baseline", action="store_true", help="add a source-only cell")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-lambda", parents=[common, training], help="accuracy over a lambda grid")
    p.add_argument("--seeds", help="comma separated, default 0,1,2")
    p.add_argument("--grid", help="comma separated, default 0,0.1,...,1.0")
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("leave-one-out", parents=[common, training], help="each domain in turn as target")
    p.add_argument("--seeds", help="comma separated, default 0,1,2,3,4")
    p.set_defaults(func=cmd_leave_one_out)

    p = sub.add_parser("acceptance", parents=[common, training],
                       help="every comparison cell over seeds, plus the ordering checks")
    p.add_argument("--seeds", help="comma separated, default 0,1,2,3,4")
    p.set_defaults(func=cmd_acceptance)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss")
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect-memory", parents=[common], help="dump a run's memory banks as CSV")
    p.add_argument("--run", help="run directory")
    p.add_argument("--csv", help="output file (stdout when omitted)")
    p.set_defaults(func=cmd_inspect_memory)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.log_level)
        return args.func(args)
    except TCLError as e:
        logger.error(str(e))
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return DataFormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
