"""Cross-validation runs, per-case reports and their JSON/CSV output."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .baseline import combine, stagewise_train
from .inference import InferenceConfig, IterationTrace, segment_volume, segment_with_oracle_boxes
from .model import DEFAULT_ARCH, TINY_ARCH, VIEWPOINTS, Architecture, init_bundle, save_bundle
from .recurrent import TrainConfig, TrainLog, train, unrolled_loss
from .synthgen import Corpus, PhantomSpec, generate_corpus, read_corpus
from .tensor import check_gradients
from .volume import dsc

logger = logging.getLogger(__name__)

METHODS = ("rstn", "stagewise", "mix")
D_POINTS = (1, 2, 3, 5, 10)


@dataclass
class ExperimentConfig:
    """Everything a cross-validation run depends on.

    Either ``corpus`` names a manifest on disk, or ``phantom`` / ``n_cases``
    / ``seed_base`` describe a corpus generated in memory.
    """

    corpus: str | None = None
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    n_cases: int = 48
    seed_base: int = 1000
    folds: int = 4
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferenceConfig = field(default_factory=InferenceConfig)
    method: str = "rstn"
    seed: int = 0
    oracle: bool = False  # also evaluate with ground-truth crop boxes
    out: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")

    def to_json(self) -> dict:
        return {
            "corpus": self.corpus,
            "phantom": self.phantom.to_json(),
            "n_cases": self.n_cases,
            "seed_base": self.seed_base,
            "folds": self.folds,
            "train": self.train.to_json(),
            "infer": asdict(self.infer),
            "method": self.method,
            "seed": self.seed,
            "oracle": self.oracle,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        kw = {}
        if "phantom" in d:
            kw["phantom"] = PhantomSpec.from_json(d.pop("phantom"))
        if "train" in d:
            kw["train"] = train_config_from_json(d.pop("train"))
        if "infer" in d:
            kw["infer"] = InferenceConfig(**d.pop("infer"))
        d.pop("out", None)
        return cls(**d, **kw)


def train_config_from_json(d: dict) -> TrainConfig:
    d = dict(d)
    arch = d.pop("arch", None)
    d.pop("weights", None)
    if isinstance(arch, str):
        arch = {"default": DEFAULT_ARCH, "tiny": TINY_ARCH}[arch]
    elif isinstance(arch, dict):
        arch = Architecture.from_json(arch)
    return TrainConfig(**d, **({"arch": arch} if arch is not None else {}))


# -- folds ----------------------------------------------------------------

def assign_folds(ids: list[str], k: int, seed: int) -> list[list[str]]:
    """Shuffle the sorted ids with a seeded generator and cut into ``k`` near-equal folds."""
    if len(ids) < k:
        raise ValueError(f"corpus of {len(ids)} cases cannot fill {k} folds")
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    order = np.random.Generator(np.random.Philox(seed)).permutation(len(ids))
    ranked = sorted(ids)
    return [sorted(ranked[i] for i in part) for part in np.array_split(order, k)]


# -- report ---------------------------------------------------------------

@dataclass
class CaseResult:
    id: str
    fold: int
    dsc: float
    coarse_dsc: float
    iterations: int
    termination: str
    d: list[float]


def _stats(values) -> dict:
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        return {"mean": None, "std": None, "max": None, "min": None}
    return {"mean": float(a.mean()), "std": float(a.std()), "max": float(a.max()), "min": float(a.min())}


@dataclass
class Report:
    """Per-case results for one or more evaluated methods.

    ``sections`` maps a method label (``rstn``, ``stagewise``, ``rstn+oracle``,
    ``stagewise/joint`` ...) to its case list, in fold order.
    """

    primary: str
    thr: float
    T: int
    folds: list[list[str]]
    sections: dict[str, list[CaseResult]] = field(default_factory=dict)

    def cases(self, section: str | None = None) -> list[CaseResult]:
        return self.sections[section or self.primary]

    def dsc(self, section: str | None = None) -> np.ndarray:
        return np.array([c.dsc for c in self.cases(section)])

    def summary(self, section: str | None = None) -> dict:
        cases = self.cases(section)
        iters = [c.iterations for c in cases]
        max_t = max(iters, default=0)
        table = []
        for t in D_POINTS:
            if t > min(self.T, max_t):
                break
            vals = [c.d[t - 1] for c in cases if len(c.d) >= t]
            table.append({"t": t, "n": len(vals), **_stats(vals)})
        return {
            "n": len(cases),
            "dsc": _stats([c.dsc for c in cases]),
            "coarse_dsc": _stats([c.coarse_dsc for c in cases]),
            "iterations": _stats(iters),
            "convergence_rate": float(np.mean([c.termination == "threshold" for c in cases])) if cases else None,
            "d_table": table,
        }

    def to_json(self) -> dict:
        return {
            "primary": self.primary,
            "thr": self.thr,
            "T": self.T,
            "folds": self.folds,
            "summary": {name: self.summary(name) for name in self.sections},
            "cases": {name: [asdict(c) for c in cs] for name, cs in self.sections.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "Report":
        sections = {k: [CaseResult(**c) for c in v] for k, v in d["cases"].items()}
        return cls(d["primary"], d["thr"], d["T"], d["folds"], sections)

    def csv_text(self, section: str | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "fold", "dsc", "coarse_dsc", "iterations", "termination"])
        for c in self.cases(section):
            w.writerow([c.id, c.fold, repr(c.dsc), repr(c.coarse_dsc), c.iterations, c.termination])
        return buf.getvalue()


def report_emit(report: Report, out: str | os.PathLike, formats=("json", "csv")) -> list[Path]:
    """Write ``report.json`` and one ``<section>.csv`` per section under ``out``."""
    out = Path(out)
    bad = set(formats) - {"json", "csv"}
    if bad:
        raise ValueError(f"unknown report formats {sorted(bad)}")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {out}: {e}") from e
    written = []
    if "json" in formats:
        p = out / "report.json"
        p.write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
        written.append(p)
    if "csv" in formats:
        for name in report.sections:
            p = out / f"{_label(name)}.csv"
            p.write_text(report.csv_text(name))
            written.append(p)
    return written


def _label(name: str) -> str:
    return name.replace("/", "-").replace("+", "_")


# -- cross-validation -----------------------------------------------------

def load_corpus(cfg: ExperimentConfig) -> Corpus:
    if cfg.corpus is not None:
        return read_corpus(cfg.corpus)
    return generate_corpus(cfg.phantom, cfg.n_cases, cfg.seed_base)


def fold_seed(seed: int, fold: int) -> int:
    return int(seed) * 1009 + fold


def evaluate(bundles, volumes, masks, ids, fold: int, cfg: InferenceConfig, oracle: bool = False,
             traces: dict | None = None) -> list[CaseResult]:
    out = []
    for cid, x, y in zip(ids, volumes, masks):
        if oracle:
            z, tr = segment_with_oracle_boxes(bundles, x, y, cfg)
        else:
            z, tr = segment_volume(bundles, x, cfg)
        out.append(case_result(cid, fold, z.data, y.data, tr))
        if traces is not None:
            traces[cid] = tr
    return out


def case_result(cid, fold, z, y, tr: IterationTrace) -> CaseResult:
    return CaseResult(cid, fold, dsc(z, y), dsc(tr.masks[0], y), tr.iterations, tr.termination, [float(v) for v in tr.d])


def crossval(cfg: ExperimentConfig, log: list | None = None) -> Report:
    """Train on the complement of each fold, test on the fold, concatenate.

    ``method="mix"`` trains both models per fold and also evaluates the two
    crossed coarse/fine pairings.  With ``out`` set, weights, traces, the
    report and a run log are written there.
    """
    corpus = load_corpus(cfg)
    ids = corpus.ids
    folds = assign_folds(ids, cfg.folds, cfg.seed)
    index = {cid: i for i, cid in enumerate(ids)}
    out = Path(cfg.out) if cfg.out else None
    run_log = log if log is not None else []
    report = Report(cfg.method, cfg.infer.thr, cfg.infer.T, folds)
    want_joint = cfg.method in ("rstn", "mix")
    want_stage = cfg.method in ("stagewise", "mix")

    for k, test_ids in enumerate(folds):
        train_ids = [c for c in ids if c not in set(test_ids)]
        if set(train_ids) & set(test_ids):
            raise AssertionError("train and test folds overlap")
        run_log.append({"event": "fold", "fold": k, "train": train_ids, "test": test_ids,
                        "disjoint": not (set(train_ids) & set(test_ids))})
        tr_v = [corpus.volumes[index[c]] for c in train_ids]
        tr_m = [corpus.masks[index[c]] for c in train_ids]
        te_v = [corpus.volumes[index[c]] for c in test_ids]
        te_m = [corpus.masks[index[c]] for c in test_ids]
        seed = fold_seed(cfg.seed, k)
        logger.info("fold %d: %d train, %d test cases", k, len(train_ids), len(test_ids))

        models = {}
        if want_joint:
            tlog = TrainLog()
            models["rstn"] = train(tr_v, tr_m, cfg.train, seed, tlog)
            run_log.append({"event": "train", "fold": k, "method": "rstn", **_loss_summary(tlog)})
        if want_stage:
            tlog = TrainLog()
            models["stagewise"] = stagewise_train(tr_v, tr_m, cfg.train, seed, tlog)
            run_log.append({"event": "train", "fold": k, "method": "stagewise", **_loss_summary(tlog)})
        for name, bundles in models.items():
            for b in bundles.values():
                b.meta["fold"] = k
                b.meta["train_ids"] = train_ids
            if out is not None:
                for v, b in bundles.items():
                    save_bundle(b, out / "weights" / f"fold{k}" / f"{name}_{v}")

        evals = {name: bundles for name, bundles in models.items()}
        if cfg.method == "mix":
            evals["stagewise/joint"] = combine(models["stagewise"], models["rstn"])
            evals["joint/stagewise"] = combine(models["rstn"], models["stagewise"])
        for name, bundles in evals.items():
            modes = [False, True] if cfg.oracle else [False]
            for oracle in modes:
                label = name + ("+oracle" if oracle else "")
                traces = {} if out is not None else None
                res = evaluate(bundles, te_v, te_m, test_ids, k, cfg.infer, oracle, traces)
                report.sections.setdefault(label, []).extend(res)
                if traces:
                    tdir = out / "traces" / _label(label)
                    tdir.mkdir(parents=True, exist_ok=True)
                    for cid, tr in traces.items():
                        (tdir / f"{cid}.json").write_text(json.dumps(tr.to_json(), sort_keys=True))

    if out is not None:
        report_emit(report, out)
        (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True))
        (out / "run_log.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in run_log))
    return report


def _loss_summary(tlog: TrainLog) -> dict:
    """First- and last-10% mean total loss per viewpoint."""
    s = {}
    for v in VIEWPOINTS:
        losses = tlog.losses(v)
        if losses.size:
            n = max(1, losses.size // 10)
            s[v] = {"first": float(losses[:n].mean()), "last": float(losses[-n:].mean()), "steps": int(losses.size)}
    return {"losses": s}


# -- gradient check on the unrolled loss ----------------------------------

def gradcheck_fixture(seed: int = 2, size: int = 9):
    """Random 9x9 slice, square target and a randomly weighted tiny bundle."""
    r = np.random.default_rng(seed)
    stack = r.random((3, size, size))
    y = np.zeros((size, size))
    c = size // 2
    y[c - 1:c + 2, c:c + 3] = 1
    b = init_bundle("axial", seed, TINY_ARCH, saliency_kernel=3, saliency_layers=2)
    for _, t in b.named_tensors():
        t.data[...] = r.uniform(-0.6, 0.6, t.shape)
    return b, stack, y


def gradcheck_unrolled(T: int = 1, phase: int = 2, seed: int = 2, margin: int = 2, step: float = 1e-5) -> dict:
    """Finite-difference check of the full unrolled loss over every bundle parameter."""
    b, stack, y = gradcheck_fixture(seed)
    cfg = TrainConfig(T=T, margin=margin, phase2_steps=0, arch=TINY_ARCH)
    _, state = unrolled_loss(b, stack, y, cfg, phase)
    gap = float(min(np.min(np.abs(p - 0.5)) for p in state.probs[:-1]))
    res = check_gradients(lambda: unrolled_loss(b, stack, y, cfg, phase)[0], b.parameters(), step=step)
    return {"T": T, "phase": phase, "seed": seed, "step": step, "max_rel_error": float(res.max_rel_error),
            "checked": res.checked, "skipped": res.skipped, "threshold_gap": gap,
            "boxes": [bx.as_tuple() for bx in state.boxes[1:]]}


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    """Copy of ``cfg`` with command-line style overrides applied to the nested configs."""
    train_kw = {k: kw.pop(k) for k in ("saliency_kernel", "saliency_layers") if kw.get(k) is not None}
    infer_kw = {}
    for src, dst in (("thr", "thr"), ("max_iter", "T"), ("oracle_boxes", "oracle_boxes")):
        v = kw.pop(src, None)
        if v is not None:
            infer_kw[dst] = v
    margin = kw.pop("margin", None)
    if margin is not None:
        train_kw["margin"] = infer_kw["margin"] = margin
    kw = {k: v for k, v in kw.items() if v is not None}
    return replace(cfg, train=replace(cfg.train, **train_kw), infer=replace(cfg.infer, **infer_kw), **kw)
