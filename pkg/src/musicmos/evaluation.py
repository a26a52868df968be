"""Cross-validated evaluation, ablation deltas, degradation concordance, data-efficiency sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .audio import AudioClip, DegradationSpec, all_standard_specs, apply_degradation
from .dataset import DIMENSIONS, FoldSplit, MosTarget
from .errors import (
    ComparabilityError,
    CompletenessError,
    DegenerateError,
    DegradationError,
    MusicMosError,
    SingularityError,
    UndefinedCorrelationError,
)
from .stats import (
    ESTIMATORS,
    CorrEstimate,
    bootstrap_replicates,
    bonferroni_threshold,
    cohens_q,
    estimate,
    spearman,
    steiger_test,
)

log = logging.getLogger(__name__)

DELTA_THRESHOLD = 0.02
SYSTEM_KINDS = ("srcc", "pcc", "tau")


def _safe_estimate(kind: str, x, y, B: int, seed: int) -> CorrEstimate | None:
    try:
        return estimate(kind, x, y, B=B, seed=seed)
    except (UndefinedCorrelationError, DegenerateError) as exc:
        log.warning("%s undefined: %s", kind, exc)
        return None


def _est_dict(e: CorrEstimate | None) -> dict | None:
    return None if e is None else e.to_dict()


# --------------------------------------------------------------------------
# utterance level


@dataclass
class UtteranceReport:
    fold: int
    n_clips: int
    correlations: dict[str, dict[str, CorrEstimate | None]]  # dim -> {pcc, srcc}

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "n_clips": self.n_clips,
            "correlations": {
                d: {k: _est_dict(v) for k, v in sorted(c.items())} for d, c in sorted(self.correlations.items())
            },
        }

    def value(self, dim: str = "mi", kind: str = "srcc") -> float | None:
        e = self.correlations.get(dim, {}).get(kind)
        return None if e is None else e.value


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    system_id: str
    predicted: dict
    human: dict


def evaluate_predictions(
    fold_index: int,
    test_ids: Sequence[str],
    predictions: Mapping[str, Mapping[str, float]],
    targets: Mapping[str, MosTarget],
    system_of: Mapping[str, str],
    dims: Sequence[str] = DIMENSIONS,
    B: int = 1000,
    seed: int = 42,
) -> tuple[UtteranceReport, list[ClipRecord]]:
    missing = [c for c in test_ids if c not in predictions]
    if missing:
        raise CompletenessError(
            f"fold {fold_index}: no prediction for {len(missing)} test clip(s), e.g. {missing[:5]}"
        )
    ids = sorted(test_ids)
    records = [
        ClipRecord(
            c,
            system_of[c],
            {d: float(predictions[c][d]) for d in dims},
            {d: float(targets[c][d]) for d in dims},
        )
        for c in ids
    ]
    corr = {}
    for d in dims:
        pred = [r.predicted[d] for r in records]
        human = [r.human[d] for r in records]
        corr[d] = {k: _safe_estimate(k, pred, human, B, seed) for k in ("pcc", "srcc")}
    return UtteranceReport(fold_index, len(ids), corr), records


def evaluate_fold(
    model,
    fold: FoldSplit,
    inputs: Mapping[str, object],
    targets: Mapping[str, MosTarget],
    system_of: Mapping[str, str],
    B: int = 1000,
    seed: int = 42,
) -> tuple[UtteranceReport, list[ClipRecord]]:
    """Predict the fold's test clips with ``model`` and correlate with human MOS."""
    from .trainer import predict

    missing = [c for c in fold.test_ids if c not in inputs]
    if missing:
        raise CompletenessError(f"fold {fold.fold_index}: no features for {len(missing)} test clip(s), e.g. {missing[:5]}")
    preds = predict(model, list(fold.test_ids), inputs)
    return evaluate_predictions(fold.fold_index, fold.test_ids, preds, targets, system_of, model.dims, B, seed)


# --------------------------------------------------------------------------
# system level


@dataclass(frozen=True)
class SystemMean:
    system_id: str
    predicted: float
    human: float
    n_clips: int


def system_means(records: Iterable[ClipRecord], dim: str = "mi") -> list[SystemMean]:
    """Per-system mean prediction and mean human MOS, sorted by system id."""
    acc: dict[str, list[list[float]]] = {}
    for r in records:
        p, h = acc.setdefault(r.system_id, [[], []])
        p.append(r.predicted[dim])
        h.append(r.human[dim])
    return [
        SystemMean(s, float(np.mean(p)), float(np.mean(h)), len(p))
        for s, (p, h) in sorted(acc.items())
    ]


@dataclass
class SystemReport:
    dim: str
    systems: list[SystemMean]
    correlations: dict[str, CorrEstimate | None]
    bootstrap_sd: dict[str, float | None] = field(default_factory=dict)

    def value(self, kind: str = "srcc") -> float | None:
        e = self.correlations.get(kind)
        return None if e is None else e.value

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "n_systems": len(self.systems),
            "systems": [asdict(s) for s in self.systems],
            "correlations": {k: _est_dict(v) for k, v in sorted(self.correlations.items())},
            "bootstrap_sd": dict(sorted(self.bootstrap_sd.items())),
        }


def system_level(means: Sequence[SystemMean], dim: str = "mi", B: int = 1000, seed: int = 42) -> SystemReport:
    """SRCC/PCC/tau over system means, BCa intervals resampling systems."""
    if len(means) < 3:
        raise DegenerateError(f"system-level correlation needs >= 3 systems, got {len(means)}")
    x = np.array([m.predicted for m in means])
    y = np.array([m.human for m in means])
    corr, sd = {}, {}
    for kind in SYSTEM_KINDS:
        corr[kind] = _safe_estimate(kind, x, y, B, seed)
        sd[kind] = None
        if corr[kind] is not None and B > 1 and len(means) >= 8:
            try:
                sd[kind] = float(np.std(bootstrap_replicates(x, y, ESTIMATORS[kind], B, seed), ddof=1))
            except MusicMosError:
                pass
    return SystemReport(dim, list(means), corr, sd)


def mean_sd(values: Sequence[float | None]) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return float(np.mean(vals)), sd


# --------------------------------------------------------------------------
# bundle


@dataclass
class EvaluationBundle:
    mode: str
    encoder_id: str
    folds_fingerprint: str
    seed: int
    B: int
    utterance: list[UtteranceReport]
    system: dict[str, SystemReport]  # pooled across folds
    per_fold_system: list[dict]  # {fold, dim -> {kind -> value}}
    records: list[ClipRecord]
    dims: tuple[str, ...] = DIMENSIONS

    def summary(self) -> dict:
        out = {}
        for d in self.dims:
            utt = {k: mean_sd([u.value(d, k) for u in self.utterance]) for k in ("pcc", "srcc")}
            sysf = {k: mean_sd([f[d].get(k) for f in self.per_fold_system]) for k in SYSTEM_KINDS}
            out[d] = {
                "utterance_fold_mean_sd": {k: list(v) for k, v in utt.items()},
                "system_fold_mean_sd": {k: list(v) for k, v in sysf.items()},
                "system_pooled": {k: self.system[d].value(k) for k in SYSTEM_KINDS},
            }
        return out

    def system_srcc(self, dim: str = "mi") -> float:
        v = self.system[dim].value("srcc")
        if v is None:
            raise UndefinedCorrelationError(f"{self.mode}: system-level SRCC for {dim} is undefined")
        return v

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "encoder_id": self.encoder_id,
            "folds_fingerprint": self.folds_fingerprint,
            "seed": self.seed,
            "B": self.B,
            "dims": list(self.dims),
            "summary": self.summary(),
            "utterance": [u.to_dict() for u in self.utterance],
            "system": {d: r.to_dict() for d, r in sorted(self.system.items())},
            "per_fold_system": self.per_fold_system,
            "predictions": [asdict(r) for r in self.records],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvaluationBundle":
        def est(d):
            return None if d is None else CorrEstimate(**d)

        dims = tuple(data["dims"])
        utter = [
            UtteranceReport(
                u["fold"], u["n_clips"],
                {d: {k: est(v) for k, v in c.items()} for d, c in u["correlations"].items()},
            )
            for u in data["utterance"]
        ]
        system = {
            d: SystemReport(
                d,
                [SystemMean(**s) for s in r["systems"]],
                {k: est(v) for k, v in r["correlations"].items()},
                r.get("bootstrap_sd", {}),
            )
            for d, r in data["system"].items()
        }
        records = [ClipRecord(**r) for r in data["predictions"]]
        return cls(data["mode"], data["encoder_id"], data["folds_fingerprint"], data["seed"], data["B"],
                   utter, system, data["per_fold_system"], records, dims)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def system_csv(self) -> str:
        """One row per dimension: pooled system correlations with CIs plus fold mean/SD."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "dim", "kind", "value", "ci_low", "ci_high", "fold_mean", "fold_sd", "bootstrap_sd"])
        summ = self.summary()
        for d in self.dims:
            for k in SYSTEM_KINDS:
                e = self.system[d].correlations.get(k)
                m, s = summ[d]["system_fold_mean_sd"][k]
                w.writerow([self.mode, d, k, _fmt(e and e.value), _fmt(e and e.ci_low), _fmt(e and e.ci_high),
                            _fmt(m), _fmt(s), _fmt(self.system[d].bootstrap_sd.get(k))])
        return buf.getvalue()

    def utterance_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "fold", "dim", "kind", "value", "ci_low", "ci_high", "n_clips"])
        for u in self.utterance:
            for d in self.dims:
                for k in ("pcc", "srcc"):
                    e = u.correlations[d].get(k)
                    w.writerow([self.mode, u.fold, d, k, _fmt(e and e.value), _fmt(e and e.ci_low),
                                _fmt(e and e.ci_high), u.n_clips])
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.6f}"


def build_bundle(
    mode: str,
    encoder_id: str,
    folds_fingerprint: str,
    fold_results: Sequence[tuple[UtteranceReport, list[ClipRecord]]],
    dims: Sequence[str] = DIMENSIONS,
    B: int = 1000,
    seed: int = 42,
) -> EvaluationBundle:
    """Pool per-fold results: system means over every fold's test predictions."""
    utter = sorted((u for u, _ in fold_results), key=lambda u: u.fold)
    records = sorted((r for _, recs in fold_results for r in recs), key=lambda r: r.clip_id)
    system = {d: system_level(system_means(records, d), d, B, seed) for d in dims}
    per_fold = []
    for u, recs in sorted(fold_results, key=lambda t: t[0].fold):
        row: dict = {"fold": u.fold}
        for d in dims:
            means = system_means(recs, d)
            x = [m.predicted for m in means]
            y = [m.human for m in means]
            row[d] = {}
            for k in SYSTEM_KINDS:
                try:
                    row[d][k] = ESTIMATORS[k](x, y)
                except UndefinedCorrelationError:
                    row[d][k] = None
        per_fold.append(row)
    return EvaluationBundle(mode, encoder_id, folds_fingerprint, seed, B, utter, system, per_fold, records, tuple(dims))


# --------------------------------------------------------------------------
# ablation


@dataclass(frozen=True)
class AblationDelta:
    label: str
    value_a: float
    value_b: float
    delta: float
    q: float | None
    meets_threshold: bool
    q_fold_mean: float | None = None  # mean of per-fold q, the other reporting convention

    def to_dict(self) -> dict:
        return asdict(self)


def delta_from_values(a: float, b: float, label: str = "", threshold: float = DELTA_THRESHOLD) -> AblationDelta:
    d = b - a
    try:
        q = cohens_q(b, a)
    except SingularityError:
        q = None  # a correlation of exactly +-1 has no finite Fisher z
    # round away float noise so that e.g. 0.977 - 0.957 still meets 0.02
    return AblationDelta(label, a, b, d, q, round(d, 12) >= threshold)


def ablation_compare(
    bundle_a: EvaluationBundle,
    bundle_b: EvaluationBundle,
    dim: str = "mi",
    label: str | None = None,
    threshold: float = DELTA_THRESHOLD,
) -> AblationDelta:
    if bundle_a.folds_fingerprint != bundle_b.folds_fingerprint:
        raise ComparabilityError(
            f"{bundle_a.mode} and {bundle_b.mode} were evaluated on different folds "
            f"({bundle_a.folds_fingerprint} vs {bundle_b.folds_fingerprint})"
        )
    label = label or f"{bundle_b.mode}-{bundle_a.mode}"
    out = delta_from_values(bundle_a.system_srcc(dim), bundle_b.system_srcc(dim), label, threshold)
    return replace(out, q_fold_mean=_fold_mean_q(bundle_a, bundle_b, dim))


def _fold_mean_q(bundle_a: EvaluationBundle, bundle_b: EvaluationBundle, dim: str) -> float | None:
    qs = []
    for fa, fb in zip(bundle_a.per_fold_system, bundle_b.per_fold_system):
        a, b = fa[dim].get("srcc"), fb[dim].get("srcc")
        if a is None or b is None:
            return None
        try:
            qs.append(cohens_q(b, a))
        except SingularityError:
            return None
    return float(np.mean(qs)) if qs else None


PROGRESSIVE_STEPS = (("A1", "A2"), ("A2", "A3a"), ("A3a", "A3b"), ("A3b", "A3c"), ("A1", "A4"), ("A3c", "A4"))


def ablation_table(
    bundles: Mapping[str, EvaluationBundle],
    steps: Sequence[tuple[str, str]] = PROGRESSIVE_STEPS,
    dim: str = "mi",
) -> list[AblationDelta]:
    return [ablation_compare(bundles[a], bundles[b], dim) for a, b in steps if a in bundles and b in bundles]


@dataclass(frozen=True)
class SteigerRow:
    label: str
    r_reference: float
    r_other: float
    r_between: float
    n: int
    z: float | None
    p: float | None
    q: float | None
    significant: bool
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def steiger_table(
    bundles: Mapping[str, EvaluationBundle],
    reference: str = "A3c",
    others: Sequence[str] | None = None,
    dim: str = "mi",
    alpha: float = 0.05,
) -> list[SteigerRow]:
    """Reference mode against each other mode on the pooled system means.

    Correlations are system-level SRCC; the between-metric correlation is
    the SRCC of the two modes' system means. Significance is Bonferroni
    adjusted over the rows produced.
    """
    ref = bundles[reference]
    others = [m for m in (others or sorted(bundles)) if m != reference and m in bundles]
    raw = []
    for m in others:
        other = bundles[m]
        if other.folds_fingerprint != ref.folds_fingerprint:
            raise ComparabilityError(f"{reference} and {m} were evaluated on different folds")
        a = {s.system_id: s for s in ref.system[dim].systems}
        b = {s.system_id: s for s in other.system[dim].systems}
        if set(a) != set(b):
            raise ComparabilityError(f"{reference} and {m} cover different systems")
        ids = sorted(a)
        r_between = spearman([a[s].predicted for s in ids], [b[s].predicted for s in ids])
        try:
            res = steiger_test(ref.system_srcc(dim), other.system_srcc(dim), r_between, len(ids))
        except (SingularityError, DegenerateError) as exc:
            res = exc
        raw.append((m, res, r_between, len(ids)))
    # the correction counts every requested comparison, defined or not
    threshold = bonferroni_threshold(len(raw), alpha) if raw else alpha
    rows = []
    for m, r, rb, n in raw:
        label = f"{reference} vs. {m}"
        r12, r13 = ref.system_srcc(dim), bundles[m].system_srcc(dim)
        if isinstance(r, Exception):
            rows.append(SteigerRow(label, r12, r13, rb, n, None, None, None, False, f"undefined: {r}"))
        else:
            rows.append(SteigerRow(label, r12, r13, rb, n, r.z, r.p, r.q, r.p < threshold))
    return rows


# --------------------------------------------------------------------------
# degradation concordance


def select_top_quartile(
    test_ids: Sequence[str], targets: Mapping[str, MosTarget], dim: str = "mi", fraction: float = 0.25
) -> list[str]:
    """The ceil(fraction * n) test clips with the highest human MOS; ties by clip id."""
    k = math.ceil(fraction * len(test_ids))
    ranked = sorted(test_ids, key=lambda c: (-targets[c][dim], c))
    return sorted(ranked[:k])


@dataclass
class ConcordanceCell:
    kind: str
    severity: str
    parameter: float
    fraction: float | None
    n_pairs: int
    complete: bool
    failures: list[str] = field(default_factory=list)


@dataclass
class ConcordanceReport:
    cells: list[ConcordanceCell]
    n_clips: int
    seed: int

    @property
    def complete(self) -> bool:
        return all(c.complete for c in self.cells)

    @property
    def overall(self) -> float | None:
        vals = [c.fraction for c in self.cells if c.fraction is not None]
        return float(np.mean(vals)) if vals else None

    def cell(self, kind: str, severity: str) -> ConcordanceCell:
        for c in self.cells:
            if c.kind == kind and c.severity == severity:
                return c
        raise KeyError((kind, severity))

    def to_dict(self) -> dict:
        return {
            "n_clips": self.n_clips,
            "seed": self.seed,
            "complete": self.complete,
            "overall": self.overall,
            "cells": [asdict(c) for c in self.cells],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ConcordanceReport":
        return cls([ConcordanceCell(**c) for c in data["cells"]], data["n_clips"], data["seed"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "severity", "parameter", "concordance", "n_pairs", "complete"])
        for c in self.cells:
            w.writerow([c.kind, c.severity, c.parameter, _fmt(c.fraction), c.n_pairs, int(c.complete)])
        return buf.getvalue()


Scorer = Callable[[AudioClip], float]


def degradation_concordance(
    scorer: Scorer,
    clips: Sequence[AudioClip],
    specs: Sequence[DegradationSpec] | None = None,
    seed: int = 0,
    degrade: Callable[[AudioClip, DegradationSpec, int], AudioClip] = apply_degradation,
) -> ConcordanceReport:
    """Fraction of clips whose original outscores its degraded rendition, per spec.

    Ties count as failures. A spec that leaves the audio unchanged is
    rejected. A clip whose degradation fails is dropped from its cell and
    the cell is marked incomplete.
    """
    specs = list(specs) if specs is not None else all_standard_specs()
    for s in specs:
        if s.is_identity:
            raise DegradationError(f"{s.label}: identity degradation has no defined concordance")
    originals = [float(scorer(c)) for c in clips]
    cells = []
    for s in specs:
        wins = n = 0
        failures = []
        for clip, orig in zip(clips, originals):
            try:
                degraded = degrade(clip, s, seed)
            except (DegradationError, ValueError, RuntimeError) as exc:
                log.warning("degradation %s failed on %s: %s", s.label, clip.clip_id, exc)
                failures.append(clip.clip_id)
                continue
            n += 1
            wins += orig > float(scorer(degraded))
        cells.append(ConcordanceCell(
            s.kind, s.severity, float(s.parameter), wins / n if n else None, n, not failures, failures
        ))
    return ConcordanceReport(cells, len(clips), seed)


# --------------------------------------------------------------------------
# data efficiency


SWEEP_SIZES: tuple[int | str, ...] = (100, 150, 250, 500, 750, 1000, "full")


@dataclass
class SweepCell:
    mode: str
    n: int
    label: str
    srcc: float | None = None
    pcc: float | None = None
    status: str = "ok"  # ok | failed | skipped
    error: str = ""


@dataclass
class SweepTable:
    cells: list[SweepCell]
    seed: int

    def get(self, mode: str, n: int) -> SweepCell | None:
        for c in self.cells:
            if c.mode == mode and c.n == n:
                return c
        return None

    def crossover(self, efficient: str = "A3a", baseline: str = "A1") -> int | None:
        """Smallest n at which ``efficient`` beats ``baseline`` trained on 2n clips."""
        for c in sorted((c for c in self.cells if c.mode == efficient and c.srcc is not None), key=lambda c: c.n):
            other = self.get(baseline, 2 * c.n)
            if other is not None and other.srcc is not None and c.srcc > other.srcc:
                return c.n
        return None

    @property
    def complete(self) -> bool:
        return all(c.status != "failed" for c in self.cells)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "crossover": self.crossover(), "complete": self.complete,
                "cells": [asdict(c) for c in self.cells]}

    @classmethod
    def from_dict(cls, data: dict) -> "SweepTable":
        return cls([SweepCell(**c) for c in data["cells"]], data["seed"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "n_train", "label", "srcc", "pcc", "status"])
        for c in self.cells:
            w.writerow([c.mode, c.n, c.label, _fmt(c.srcc), _fmt(c.pcc), c.status])
        return buf.getvalue()


Runner = Callable[[str, FoldSplit], tuple[float, float]]


def data_efficiency_sweep(
    runner: Runner,
    fold: FoldSplit,
    system_of: Mapping[str, str],
    modes: Sequence[str] = ("A1", "A3a"),
    sizes: Sequence[int | str] = SWEEP_SIZES,
    seed: int = 0,
) -> SweepTable:
    """Train each (mode, n) on nested subsamples of ``fold``'s training set.

    ``runner(mode, subfold)`` trains and returns the test-set (SRCC, PCC)
    on MI. Sizes above the available pool are skipped; a failing run is
    recorded and the sweep continues.
    """
    from .dataset import subsample_train

    full = len(fold.train_ids)
    cells = []
    for mode in modes:
        for size in sizes:
            n = full if size == "full" else int(size)
            label = f"full ({full})" if size == "full" else str(n)
            cell = SweepCell(mode, n, label)
            if n > full:
                cell.status, cell.error = "skipped", f"only {full} training clips"
            else:
                try:
                    sub = fold if n == full else subsample_train(fold, n, seed, system_of)
                    cell.srcc, cell.pcc = runner(mode, sub)
                except Exception as exc:  # keep the sweep going; the cell carries the failure
                    log.error("sweep %s n=%d failed: %s", mode, n, exc)
                    cell.status, cell.error = "failed", f"{type(exc).__name__}: {exc}"
            cells.append(cell)
    return SweepTable(cells, seed)
