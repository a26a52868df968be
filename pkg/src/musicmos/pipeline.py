"""Command implementations: feature extraction through reports, on a fixed run layout.

Layout under ``<output_root>/<config-hash>/``::

    config.json  folds.json
    <mode>/fold<k>/model-seed<s>.ckpt  train_log.jsonl  state.pt
    <mode>/evaluation.json  system.csv  utterance.csv
    ablation.json  ablation.csv  steiger.csv
    degradation.json  degradation.csv
    sweep/sweep.json  sweep.csv
    report.json
"""

from __future__ import annotations

import contextlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch

from .audio import AudioClip, all_standard_specs, load_and_normalize
from .cache import FeatureCache
from .config import RunConfig
from .dataset import (
    ClipAnnotation,
    FoldSplit,
    aggregate_targets,
    folds_fingerprint,
    load_folds,
    load_manifest,
    make_folds,
    save_folds,
    system_map,
)
from .encoder import FeatureMatrix, build_encoder, extract, get_spec, preprocessing_fingerprint
from .errors import CompletenessError, ConfigError, MusicMosError
from .evaluation import (
    ConcordanceReport,
    EvaluationBundle,
    SweepTable,
    ablation_table,
    build_bundle,
    data_efficiency_sweep,
    degradation_concordance,
    evaluate_fold,
    evaluate_predictions,
    select_top_quartile,
    steiger_table,
)
from .model import QualityModel, clamp_scores, load_checkpoint, save_checkpoint
from .objectives import Mode
from .trainer import build_model, predict, train

log = logging.getLogger(__name__)


def write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path


def write_csv(path: Path, body: str, provenance: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    header = (
        f"# config_hash={provenance['config_hash']} code_version={provenance['code_version']} "
        f"seeds={json.dumps(provenance['seeds'], sort_keys=True)}\n"
    )
    path.write_text(header + body, encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# workspace


class Workspace:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = cfg.output_root / cfg.config_hash()
        self._annotations: list[ClipAnnotation] | None = None
        self._features: dict[str, dict[str, FeatureMatrix]] = {}
        self._encoders: dict[str, torch.nn.Module] = {}

    # paths
    def mode_dir(self, mode: str | Mode) -> Path:
        return self.root / Mode.parse(mode).value

    def fold_dir(self, mode: str | Mode, fold: int) -> Path:
        return self.mode_dir(mode) / f"fold{fold}"

    def checkpoint_path(self, mode: str | Mode, fold: int) -> Path:
        return self.fold_dir(mode, fold) / f"model-seed{self.cfg.seed}.ckpt"

    def bundle_path(self, mode: str | Mode) -> Path:
        return self.mode_dir(mode) / "evaluation.json"

    def init(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / "config.json"
        if not path.exists():
            path.write_text(self.cfg.to_json() + "\n", encoding="utf-8")

    # data
    @property
    def annotations(self) -> list[ClipAnnotation]:
        if self._annotations is None:
            self._annotations = load_manifest(self.cfg.manifest)
        return self._annotations

    @property
    def targets(self):
        return {t.clip_id: t for t in aggregate_targets(self.annotations)}

    @property
    def system_of(self) -> dict[str, str]:
        return system_map(self.annotations)

    def folds(self) -> list[FoldSplit]:
        path = self.root / "folds.json"
        if path.exists():
            return load_folds(path)
        f = self.cfg["folds"]
        folds = make_folds(self.annotations, f["n_folds"], f["val_fraction"], f["seed"])
        self.init()
        save_folds(folds, path)
        return folds

    def fold(self, index: int) -> FoldSplit:
        folds = self.folds()
        if not 0 <= index < len(folds):
            raise ConfigError(f"fold {index} out of range (0..{len(folds) - 1})")
        return folds[index]

    def load_clip(self, ann: ClipAnnotation) -> AudioClip:
        a = self.cfg["audio"]
        return load_and_normalize(ann.audio_path, a["sample_rate"], a["seconds"], ann.clip_id)

    # encoders and features
    def encoder(self, encoder_id: str, fresh: bool = False) -> torch.nn.Module:
        spec = get_spec(encoder_id, self.cfg["encoder_layer"])
        if fresh:
            return build_encoder(spec, self.cfg["weights_root"], seed=0)
        if encoder_id not in self._encoders:
            self._encoders[encoder_id] = build_encoder(spec, self.cfg["weights_root"], seed=0)
        return self._encoders[encoder_id]

    def feature_cache(self, encoder_id: str) -> FeatureCache:
        a = self.cfg["audio"]
        return FeatureCache(
            self.cfg.cache_root, encoder_id, self.cfg["encoder_layer"],
            preprocessing_fingerprint(a["sample_rate"], a["seconds"]),
        )

    def _autocast(self):
        if self.cfg["train"].get("precision", "f32") == "mixed-bf16":
            return torch.autocast("cpu", dtype=torch.bfloat16)
        return contextlib.nullcontext()

    def extract_all(self, encoder_id: str, force: bool = False) -> "ExtractSummary":
        cache = self.feature_cache(encoder_id)
        summary = ExtractSummary(encoder_id)
        feats: dict[str, FeatureMatrix] = {}
        for ann in self.annotations:
            fm = None if force else cache.get(ann.clip_id)
            if fm is not None:
                summary.hits += 1
                feats[ann.clip_id] = fm
                continue
            summary.misses += 1
            try:
                with self._autocast():
                    fm = extract(self.load_clip(ann), self.encoder(encoder_id))
                cache.put(fm)
                feats[ann.clip_id] = fm
            except MusicMosError as exc:
                summary.failures.append({"clip_id": ann.clip_id, "error": f"{type(exc).__name__}: {exc}"})
        self._features[encoder_id] = feats
        return summary

    def features(self, encoder_id: str) -> dict[str, FeatureMatrix]:
        if encoder_id not in self._features:
            summary = self.extract_all(encoder_id)
            if summary.failures:
                raise CompletenessError(f"feature extraction failed for {len(summary.failures)} clip(s): "
                                        f"{summary.failures[:3]}")
        return self._features[encoder_id]

    def prepared_inputs(self, encoder: torch.nn.Module) -> dict[str, torch.Tensor]:
        """Encoder-ready inputs for modes that run the encoder inside training."""
        return {a.clip_id: encoder.prepare(self.load_clip(a)) for a in self.annotations}


@dataclass
class ExtractSummary:
    encoder_id: str
    hits: int = 0
    misses: int = 0
    failures: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {**asdict(self), "extracted": self.misses - len(self.failures)}


# --------------------------------------------------------------------------
# commands


def cmd_extract(cfg: RunConfig, force: bool = False, mode: str | None = None) -> ExtractSummary:
    ws = Workspace(cfg)
    return ws.extract_all(cfg.encoder_id(mode), force=force)


def _inputs_for(ws: Workspace, mode: Mode, model: QualityModel) -> dict:
    if model.encoder is not None:
        return ws.prepared_inputs(model.encoder)
    return ws.features(model.encoder_spec.encoder_id)


def train_one(
    ws: Workspace, mode: Mode, fold: FoldSplit, out_dir: Path | None = None,
) -> tuple[QualityModel, object, dict]:
    """Train one model for ``fold``; returns (model, log, inputs used)."""
    cfg = ws.cfg
    tcfg = cfg.train_config(mode)
    enc_id = cfg.encoder_id(mode)
    spec = get_spec(enc_id, cfg["encoder_layer"])
    encoder = ws.encoder(enc_id, fresh=True) if mode.adapts_encoder else None
    model = build_model(tcfg, spec, encoder)
    inputs = _inputs_for(ws, mode, model)
    log_path = resume = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path, resume = out_dir / "train_log.jsonl", out_dir / "state.pt"
    model, tlog = train(model, fold, inputs, ws.targets, tcfg, log_path=log_path, resume_path=resume)
    return model, tlog, inputs


def cmd_train(cfg: RunConfig, fold_index: int, force: bool = False) -> Path:
    ws = Workspace(cfg)
    ws.init()
    mode = cfg.mode
    ckpt = ws.checkpoint_path(mode, fold_index)
    if ckpt.exists() and not force:
        log.info("%s exists, skipping (use --force to retrain)", ckpt)
        return ckpt
    out_dir = ws.fold_dir(mode, fold_index)
    if force:
        for stale in ("state.pt", "train_log.jsonl"):
            (out_dir / stale).unlink(missing_ok=True)
    fold = ws.fold(fold_index)
    model, tlog, _ = train_one(ws, mode, fold, out_dir)
    tcfg = cfg.train_config(mode)
    extra_tensors = {}
    if tlog.log_vars:
        extra_tensors = {f"extra.log_var.{h}": torch.tensor(v) for h, v in tlog.log_vars.items()}
    save_checkpoint(
        model, ckpt, train_fingerprint=tcfg.fingerprint(), extra_tensors=extra_tensors,
        extra_meta={"mode": mode.value, "fold": fold_index, "seed": cfg.seed,
                    "provenance": cfg.provenance(), "train": tlog.summary()},
    )
    (out_dir / "state.pt").unlink(missing_ok=True)
    return ckpt


def load_fold_model(ws: Workspace, mode: Mode, fold_index: int, path: Path | None = None) -> QualityModel:
    path = path or ws.checkpoint_path(mode, fold_index)
    if not path.exists():
        raise CompletenessError(f"no checkpoint for mode {mode.value} fold {fold_index} (expected {path})")
    enc_id = ws.cfg.encoder_id(mode)
    encoder = ws.encoder(enc_id, fresh=True) if mode.adapts_encoder else None
    return load_checkpoint(path, expected_encoder_id=enc_id, encoder=encoder)


def cmd_evaluate(cfg: RunConfig, force: bool = False) -> EvaluationBundle:
    ws = Workspace(cfg)
    mode = cfg.mode
    out = ws.bundle_path(mode)
    if out.exists() and not force:
        return EvaluationBundle.from_dict(json.loads(out.read_text(encoding="utf-8")))
    folds = ws.folds()
    missing = [f.fold_index for f in folds if not ws.checkpoint_path(mode, f.fold_index).exists()]
    if missing:
        raise CompletenessError(f"mode {mode.value}: missing checkpoint(s) for fold(s) {missing}")
    ev = cfg["evaluation"]
    results = []
    for f in folds:
        model = load_fold_model(ws, mode, f.fold_index)
        inputs = _inputs_for(ws, mode, model)
        results.append(evaluate_fold(model, f, inputs, ws.targets, ws.system_of, ev["bootstrap_B"],
                                     ev["bootstrap_seed"]))
    bundle = build_bundle(mode.value, cfg.encoder_id(mode), folds_fingerprint(folds), results,
                          B=ev["bootstrap_B"], seed=ev["bootstrap_seed"])
    prov = cfg.provenance(bootstrap=ev["bootstrap_seed"])
    write_json(out, {"provenance": prov, **bundle.to_dict()})
    write_csv(ws.mode_dir(mode) / "system.csv", bundle.system_csv(), prov)
    write_csv(ws.mode_dir(mode) / "utterance.csv", bundle.utterance_csv(), prov)
    return bundle


def available_bundles(ws: Workspace) -> dict[str, EvaluationBundle]:
    out = {}
    for m in Mode:
        p = ws.bundle_path(m)
        if p.exists():
            out[m.value] = EvaluationBundle.from_dict(json.loads(p.read_text(encoding="utf-8")))
    return out


def _opt(v, fmt: str = ".6f") -> str:
    return "" if v is None else format(v, fmt)


def cmd_ablate(cfg: RunConfig) -> dict:
    ws = Workspace(cfg)
    bundles = available_bundles(ws)
    if len(bundles) < 2:
        raise CompletenessError(f"ablation needs evaluation bundles for >= 2 modes, found {sorted(bundles)}")
    ev = cfg["evaluation"]
    deltas = ablation_table(bundles)
    ref = ev["steiger_reference"] if ev["steiger_reference"] in bundles else sorted(bundles)[-1]
    steiger = steiger_table(bundles, reference=ref, alpha=ev["alpha"])
    prov = cfg.provenance()
    payload = {"provenance": prov, "deltas": [d.to_dict() for d in deltas],
               "steiger_reference": ref, "steiger": [s.to_dict() for s in steiger],
               "alpha_adj": ev["alpha"] / max(len(steiger), 1)}
    write_json(ws.root / "ablation.json", payload)
    rows = ["step,srcc_a,srcc_b,delta,cohens_q,cohens_q_fold_mean,meets_threshold"]
    rows += [f"{d.label},{d.value_a:.6f},{d.value_b:.6f},{d.delta:+.6f},{_opt(d.q)},{_opt(d.q_fold_mean)},"
             f"{int(d.meets_threshold)}"
             for d in deltas]
    write_csv(ws.root / "ablation.csv", "\n".join(rows) + "\n", prov)
    rows = ["comparison,z,p,cohens_q,significant,note"]
    rows += [f"{s.label},{_opt(s.z)},{_opt(s.p, '.6g')},{_opt(s.q)},{int(s.significant)},{s.note}" for s in steiger]
    write_csv(ws.root / "steiger.csv", "\n".join(rows) + "\n", prov)
    return payload


class ClipScorer:
    """Scores decoded audio with a trained model through the training preprocessing path."""

    def __init__(self, model: QualityModel, base_encoder: torch.nn.Module | None):
        self.model = model.eval()
        self.base_encoder = base_encoder

    @torch.no_grad()
    def __call__(self, clip: AudioClip) -> dict[str, float]:
        if self.model.encoder is not None:
            x = self.model.encoder.prepare(clip)
        else:
            x = torch.from_numpy(extract(clip, self.base_encoder).frames)
        out = self.model.predict(x.unsqueeze(0))
        return {d: float(v[0]) for d, v in out.items()}

    def mi(self, clip: AudioClip) -> float:
        return self(clip)["mi"]


def scorer_for(ws: Workspace, model: QualityModel) -> ClipScorer:
    base = None if model.encoder is not None else ws.encoder(model.encoder_spec.encoder_id)
    return ClipScorer(model, base)


@dataclass
class ScoreLine:
    path: str
    mi: float | None
    ta: float | None
    ms: float | None
    error: str = ""

    def format(self) -> str:
        if self.error:
            return f"{self.path}\tERROR\t{self.error}"
        return f"{self.path}\t{self.mi:.4f}\t{self.ta:.4f}\t{self.ms:.1f}"


def cmd_score(
    checkpoint: Path, paths: Sequence[str | Path], cfg: RunConfig | None = None,
) -> list[ScoreLine]:
    """Score audio files; per-file failures are reported and the batch continues."""
    from .model import read_checkpoint

    meta, _ = read_checkpoint(checkpoint)
    weights = cfg["weights_root"] if cfg is not None else None
    audio = cfg["audio"] if cfg is not None else {"sample_rate": 24000, "seconds": 10.0}
    spec = get_spec(meta["encoder_id"], meta.get("encoder_layer", -1))
    adapted = meta.get("lora") is not None or meta.get("full_encoder")
    encoder = build_encoder(spec, weights) if adapted else None
    model = load_checkpoint(checkpoint, encoder=encoder)
    scorer = ClipScorer(model, None if adapted else build_encoder(spec, weights))
    lines = []
    for p in paths:
        try:
            clip = load_and_normalize(p, audio["sample_rate"], audio["seconds"])
            t0 = time.perf_counter()
            s = scorer(clip)
            ms = (time.perf_counter() - t0) * 1000
            mi, ta = (float(clamp_scores(s[d])) for d in ("mi", "ta"))
            lines.append(ScoreLine(str(p), mi, ta, ms))
        except MusicMosError as exc:
            lines.append(ScoreLine(str(p), None, None, None, f"{type(exc).__name__}: {exc}"))
    return lines


def cmd_degrade(cfg: RunConfig, checkpoint: Path | None = None, force: bool = False, mode: str | None = None):
    ws = Workspace(cfg)
    out = ws.root / "degradation.json"
    deg = cfg["degradation"]
    mode = Mode.parse(mode or deg["mode"])
    if out.exists() and not force and checkpoint is None:
        previous = json.loads(out.read_text(encoding="utf-8"))
        if previous.get("mode") == mode.value:
            return ConcordanceReport.from_dict(previous)
    model = load_fold_model(ws, mode, 0, Path(checkpoint) if checkpoint else None)
    fold = ws.fold(0)
    selected = select_top_quartile(fold.test_ids, ws.targets, "mi")
    by_id = {a.clip_id: a for a in ws.annotations}
    clips = [ws.load_clip(by_id[c]) for c in selected]
    report = degradation_concordance(scorer_for(ws, model).mi, clips, all_standard_specs(), seed=deg["seed"])
    prov = cfg.provenance(degradation=deg["seed"])
    write_json(out, {"provenance": prov, "mode": mode.value, "selected": selected, **report.to_dict()})
    write_csv(ws.root / "degradation.csv", report.to_csv(), prov)
    return report


def cmd_sweep(cfg: RunConfig, force: bool = False):
    ws = Workspace(cfg)
    sw = cfg["sweep"]
    out = ws.root / "sweep" / "sweep.json"
    if out.exists() and not force:
        return SweepTable.from_dict(json.loads(out.read_text(encoding="utf-8")))
    fold = ws.fold(0)

    def runner(mode_name: str, sub: FoldSplit) -> tuple[float, float]:
        mode = Mode.parse(mode_name)
        model, _, inputs = train_one(ws, mode, sub)
        preds = predict(model, list(sub.test_ids), inputs)
        rep, _ = evaluate_predictions(sub.fold_index, sub.test_ids, preds, ws.targets, ws.system_of, B=0)
        return rep.value("mi", "srcc"), rep.value("mi", "pcc")

    table = data_efficiency_sweep(runner, fold, ws.system_of, sw["modes"], sw["sizes"], sw["seed"])
    prov = cfg.provenance(sweep=sw["seed"])
    write_json(out, {"provenance": prov, **table.to_dict()})
    write_csv(out.with_suffix(".csv"), table.to_csv(), prov)
    return table


def cmd_report(cfg: RunConfig) -> dict:
    """Collect whatever evaluation artefacts exist into one summary document."""
    ws = Workspace(cfg)
    bundles = available_bundles(ws)
    payload: dict = {"provenance": cfg.provenance(), "modes": {m: b.summary() for m, b in bundles.items()}}
    for name in ("ablation.json", "degradation.json", "sweep/sweep.json"):
        p = ws.root / name
        if p.exists():
            doc = json.loads(p.read_text(encoding="utf-8"))
            doc.pop("provenance", None)
            payload[name.split("/")[-1].removesuffix(".json")] = doc
    write_json(ws.root / "report.json", payload)
    return payload


def run_all_folds(cfg: RunConfig, folds: Iterable[int] | None = None, force: bool = False) -> list[Path]:
    ws = Workspace(cfg)
    indices = list(folds) if folds is not None else [f.fold_index for f in ws.folds()]
    return [cmd_train(cfg, k, force) for k in indices]
