import json
import math
import types

import numpy as np
import pytest

from musicmos.audio import AudioClip, DegradationSpec, all_standard_specs
from musicmos.dataset import FoldSplit, MosTarget
from musicmos.errors import (
    ComparabilityError,
    CompletenessError,
    DegenerateError,
    DegradationError,
)
from musicmos.evaluation import (
    EvaluationBundle,
    SweepCell,
    SweepTable,
    ablation_compare,
    ablation_table,
    build_bundle,
    data_efficiency_sweep,
    degradation_concordance,
    delta_from_values,
    evaluate_predictions,
    select_top_quartile,
    steiger_table,
    system_level,
    system_means,
)
from musicmos.stats import spearman


def corpus(n_systems=12, per_system=10, seed=0):
    rng = np.random.default_rng(seed)
    targets, system_of = {}, {}
    for s in range(n_systems):
        q = 1.5 + 3 * s / (n_systems - 1)
        for i in range(per_system):
            cid = f"s{s:02d}_{i:02d}"
            targets[cid] = MosTarget(cid, float(np.clip(q + rng.normal(0, 0.5), 1, 5)),
                                     float(np.clip(q + rng.normal(0, 0.7), 1, 5)))
            system_of[cid] = f"s{s:02d}"
    return targets, system_of


def fold_results(targets, system_of, noise=0.3, seed=0, n_folds=2, B=200):
    rng = np.random.default_rng(seed)
    ids = sorted(targets)
    out = []
    for k in range(n_folds):
        test = ids[k::n_folds]
        preds = {c: {"mi": targets[c].mi + rng.normal(0, noise), "ta": targets[c].ta + rng.normal(0, noise)}
                 for c in test}
        out.append(evaluate_predictions(k, test, preds, targets, system_of, B=B, seed=42))
    return out


def test_oracle_predictions_correlate_perfectly():
    targets, system_of = corpus()
    ids = sorted(targets)
    preds = {c: {"mi": targets[c].mi, "ta": targets[c].ta} for c in ids}
    rep, records = evaluate_predictions(0, ids, preds, targets, system_of, B=100)
    for d in ("mi", "ta"):
        for k in ("pcc", "srcc"):
            assert rep.value(d, k) == pytest.approx(1.0)
    sysrep = system_level(system_means(records, "mi"), "mi", B=100)
    for k in ("srcc", "pcc", "tau"):
        assert sysrep.value(k) == pytest.approx(1.0)
    assert rep.n_clips == len(ids)


def test_negated_predictions():
    targets, system_of = corpus()
    ids = sorted(targets)
    preds = {c: {"mi": -targets[c].mi, "ta": -targets[c].ta} for c in ids}
    rep, _ = evaluate_predictions(0, ids, preds, targets, system_of, B=100)
    assert rep.value("mi", "srcc") == pytest.approx(-1.0)


def test_missing_prediction_is_completeness_error():
    targets, system_of = corpus()
    ids = sorted(targets)
    preds = {c: {"mi": 3.0, "ta": 3.0} for c in ids[1:]}
    with pytest.raises(CompletenessError):
        evaluate_predictions(0, ids, preds, targets, system_of)


def test_cis_bracket_estimates():
    targets, system_of = corpus()
    for u, _ in fold_results(targets, system_of, noise=0.8):
        for d in ("mi", "ta"):
            for e in u.correlations[d].values():
                assert e.ci_low <= e.value <= e.ci_high


def test_system_means_match_brute_force():
    targets, system_of = corpus(n_systems=31, per_system=6)
    results = fold_results(targets, system_of, noise=0.6, n_folds=3)
    bundle = build_bundle("A1", "toy-64", "fp", results, B=100)
    # independent aggregation straight from the clip predictions
    sums = {}
    for _, recs in results:
        for r in recs:
            p = sums.setdefault(r.system_id, [0.0, 0.0, 0])
            p[0] += r.predicted["mi"]
            p[1] += r.human["mi"]
            p[2] += 1
    ids = sorted(sums)
    x = [sums[s][0] / sums[s][2] for s in ids]
    y = [sums[s][1] / sums[s][2] for s in ids]
    assert len(bundle.system["mi"].systems) == 31
    assert bundle.system_srcc("mi") == spearman(x, y)


def test_adjacent_system_swap():
    from musicmos.evaluation import SystemMean

    means = [SystemMean(f"s{i:02d}", float(i), float(i), 1) for i in range(31)]
    means[10], means[11] = (SystemMean("s10", 11.0, 10.0, 1), SystemMean("s11", 10.0, 11.0, 1))
    rep = system_level(means, B=50)
    assert rep.value("srcc") == pytest.approx(1 - 6 * 2 / (31 * 960), abs=1e-12)


def test_too_few_systems():
    from musicmos.evaluation import SystemMean

    with pytest.raises(DegenerateError):
        system_level([SystemMean("a", 1, 1, 1), SystemMean("b", 2, 2, 1)])


def test_bundle_round_trip_and_csv():
    targets, system_of = corpus()
    bundle = build_bundle("A2", "toy-64", "fp", fold_results(targets, system_of), B=100)
    back = EvaluationBundle.from_dict(json.loads(bundle.to_json()))
    assert back.to_json() == bundle.to_json()
    summ = bundle.summary()["mi"]
    assert len(summ["system_fold_mean_sd"]["srcc"]) == 2
    assert bundle.system_csv().splitlines()[0].startswith("mode,dim,kind,value")
    assert len(bundle.utterance_csv().splitlines()) == 1 + 2 * 2 * 2
    assert len(bundle.per_fold_system) == 2


def test_bundle_deterministic():
    targets, system_of = corpus()
    a = build_bundle("A1", "toy-64", "fp", fold_results(targets, system_of), B=100)
    b = build_bundle("A1", "toy-64", "fp", fold_results(targets, system_of), B=100)
    assert a.to_json() == b.to_json()


# ---------------------------------------------------------------- ablation


def test_delta_examples():
    same = delta_from_values(0.9, 0.9)
    assert same.delta == 0 and same.q == 0 and not same.meets_threshold
    d = delta_from_values(0.957, 0.953, "A2-A1")
    assert d.delta == pytest.approx(-0.004, abs=1e-12)
    assert d.q == pytest.approx(0.046, abs=1e-3) and abs(d.q - 0.050) <= 0.01
    d = delta_from_values(0.953, 0.960)
    assert d.delta == pytest.approx(0.007, abs=1e-12) and not d.meets_threshold
    assert delta_from_values(0.957, 0.977).meets_threshold
    assert delta_from_values(0.5, 1.0).q is None


def _bundle(mode, fp="fp", noise=0.3, seed=0):
    targets, system_of = corpus()
    return build_bundle(mode, "toy-64", fp, fold_results(targets, system_of, noise=noise, seed=seed), B=50)


def test_ablation_compare_and_table():
    a, b = _bundle("A1", seed=1), _bundle("A2", seed=2)
    d = ablation_compare(a, b)
    assert d.label == "A2-A1" and d.delta == pytest.approx(b.system_srcc() - a.system_srcc())
    with pytest.raises(ComparabilityError):
        ablation_compare(a, _bundle("A2", fp="other"))
    table = ablation_table({"A1": a, "A2": b, "A3a": _bundle("A3a", seed=3)})
    assert [r.label for r in table] == ["A2-A1", "A3a-A2"]


def test_steiger_rows_and_bonferroni():
    bundles = {m: _bundle(m, noise=n, seed=i) for i, (m, n) in enumerate([("A1", 2.0), ("A2", 1.5), ("A3c", 1.0)])}
    rows = steiger_table(bundles, reference="A3c")
    assert [r.label for r in rows] == ["A3c vs. A1", "A3c vs. A2"]
    for r in rows:
        assert r.n == 12 and r.p is not None
        assert r.significant == (r.p < 0.05 / 2)


def test_steiger_undefined_row_has_note():
    bundles = {"A1": _bundle("A1", noise=0.0), "A3c": _bundle("A3c", noise=0.5, seed=4)}
    rows = steiger_table(bundles)
    assert rows[0].z is None and not rows[0].significant and rows[0].note.startswith("undefined")


# ---------------------------------------------------------------- degradation


def test_top_quartile_selection():
    targets = {f"c{i}": MosTarget(f"c{i}", float(i % 7), 3.0) for i in range(10)}
    picked = select_top_quartile(sorted(targets), targets)
    assert len(picked) == math.ceil(2.5) == 3
    assert set(picked) == {"c4", "c5", "c6"}
    assert len(select_top_quartile([f"x{i}" for i in range(456)],
                                   {f"x{i}": MosTarget(f"x{i}", 3.0, 3.0) for i in range(456)})) == 114


def _clips(n, seed=0):
    rng = np.random.default_rng(seed)
    return [AudioClip(0.3 * rng.normal(size=2400), 24000, f"c{i:03d}") for i in range(n)]


def test_concordance_constructed():
    clips = _clips(6)
    specs = [DegradationSpec.standard("noise", "severe")]
    orig = {c.clip_id: float(i) for i, c in enumerate(clips)}

    def degrade(clip, spec, seed):
        return AudioClip(clip.samples * 0.5, clip.sample_rate, clip.clip_id + "#d")

    def scorer(clip):
        base = orig[clip.clip_id.split("#")[0]]
        return base - 1.0 if clip.clip_id.endswith("#d") else base

    rep = degradation_concordance(scorer, clips, specs, degrade=degrade)
    assert rep.cell("noise", "severe").fraction == 1.0
    assert rep.cell("noise", "severe").n_pairs == 6 and rep.complete


def test_concordance_ties_fail():
    clips = _clips(4)
    rep = degradation_concordance(lambda c: 3.0, clips, [DegradationSpec.standard("noise", "mild")])
    assert rep.overall == 0.0


def test_concordance_random_scorer_near_chance():
    clips = _clips(114)
    rng = np.random.default_rng(7)
    rep = degradation_concordance(lambda c: float(rng.uniform()), clips, [DegradationSpec.standard("noise", "mild")])
    assert 0.4 <= rep.overall <= 0.6


def test_concordance_rejects_identity():
    spec = DegradationSpec("noise", "mild", math.inf)
    with pytest.raises(DegradationError):
        degradation_concordance(lambda c: 1.0, _clips(3), [spec])


def test_concordance_failure_marks_cell_incomplete():
    clips = _clips(5)

    def degrade(clip, spec, seed):
        if clip.clip_id == "c002" and spec.kind == "mp3":
            raise DegradationError("codec broke")
        return AudioClip(clip.samples * 0.5, clip.sample_rate, clip.clip_id)

    rep = degradation_concordance(lambda c: float(np.abs(c.samples).mean()), clips, degrade=degrade)
    assert len(rep.cells) == 12
    bad = [c for c in rep.cells if not c.complete]
    assert {c.kind for c in bad} == {"mp3"} and all(c.failures == ["c002"] and c.n_pairs == 4 for c in bad)
    assert not rep.complete
    assert {c.kind for c in rep.cells} == {s.kind for s in all_standard_specs()}


# ---------------------------------------------------------------- sweep


def test_sweep_grid_skip_and_failure():
    train = tuple(f"s{i % 4}_{i:03d}" for i in range(300))
    fold = FoldSplit(0, train, ("v",), ("t",))
    system_of = {c: c.split("_")[0] for c in train}
    seen = {}

    def runner(mode, sub):
        seen[(mode, len(sub.train_ids))] = set(sub.train_ids)
        if mode == "A3a" and len(sub.train_ids) == 250:
            raise RuntimeError("out of memory")
        return 0.5 + len(sub.train_ids) / 1000, 0.4

    table = data_efficiency_sweep(runner, fold, system_of, sizes=(100, 150, 250, 500, "full"))
    assert table.get("A1", 500).status == "skipped"
    assert table.get("A3a", 250).status == "failed" and "out of memory" in table.get("A3a", 250).error
    assert not table.complete
    assert table.get("A1", 300).label == "full (300)"
    assert seen[("A1", 100)] <= seen[("A1", 150)] <= seen[("A1", 250)]
    assert "n_train" in table.to_csv()


def test_sweep_crossover():
    cells = [SweepCell("A1", n, str(n), s) for n, s in [(100, 0.5), (200, 0.6), (300, 0.7), (600, 0.75)]]
    cells += [SweepCell("A3a", n, str(n), s) for n, s in [(100, 0.55), (150, 0.62), (300, 0.8)]]
    assert SweepTable(cells, 0).crossover() == 300
    cells[4] = SweepCell("A3a", 100, "100", 0.65)
    assert SweepTable(cells, 0).crossover() == 100


def test_sweep_monotone_on_synthetic_probe():
    from test_trainer import probe_task

    from musicmos.encoder import TOY
    from musicmos.trainer import TrainConfig, build_model, predict, train

    fold, inputs, targets = probe_task(n=720, noise=0.3, seed=2)
    system_of = {c: f"s{int(c[1:]) % 6}" for c in inputs}

    def runner(mode, sub):
        cfg = TrainConfig(mode=mode, max_epochs=8, patience=8, seed=0)
        model, _ = train(build_model(cfg, TOY), sub, inputs, targets, cfg)
        test = list(sub.test_ids)
        pred = predict(model, test, inputs)
        return spearman([pred[c]["mi"] for c in test], [targets[c].mi for c in test]), 0.0

    table = data_efficiency_sweep(runner, fold, system_of, modes=("A1",), sizes=(100, 250, "full"))
    srcc = [c.srcc for c in table.cells]
    assert all(b >= a - 0.02 for a, b in zip(srcc, srcc[1:])), srcc


def test_fold_mean_q_reported_alongside_pooled_q():
    from musicmos.evaluation import ablation_compare

    a = types.SimpleNamespace(folds_fingerprint="f", mode="A1", system_srcc=lambda d: 0.9,
                              per_fold_system=[{"mi": {"srcc": 0.9}}, {"mi": {"srcc": 0.8}}])
    b = types.SimpleNamespace(folds_fingerprint="f", mode="A2", system_srcc=lambda d: 0.95,
                              per_fold_system=[{"mi": {"srcc": 0.95}}, {"mi": {"srcc": 0.9}}])
    out = ablation_compare(a, b)
    expected = (abs(math.atanh(0.95) - math.atanh(0.9)) + abs(math.atanh(0.9) - math.atanh(0.8))) / 2
    assert out.q == pytest.approx(abs(math.atanh(0.95) - math.atanh(0.9)), abs=1e-12)
    assert out.q_fold_mean == pytest.approx(expected, abs=1e-12)
    b.per_fold_system[1]["mi"]["srcc"] = None
    assert ablation_compare(a, b).q_fold_mean is None
