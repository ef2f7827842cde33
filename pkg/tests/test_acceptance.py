"""Acceptance criteria 1-9, one verdict line each.

Each test records a PASS/FAIL line (printed again in the terminal summary)
and then asserts, so a failing criterion fails the suite.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
from _grad import numeric_grad, rel_error
from test_dataset import brute_rhythm, flat_record

from wsloc import nn
from wsloc.aggregation import AggregationSpec, aggregate
from wsloc.dataset import extract_beat_segments, extract_rhythm_segments
from wsloc.harness import parse_config, run_experiment
from wsloc.metrics import ConfusionMatrix, class_metrics, overall_metrics
from wsloc.model import Model, ModelConfig, TrainParams, batch_loss, train
from wsloc.qrs import pan_tompkins
from wsloc.signal_io import (
    AUX, RHYTHM_CODE, SKIP, BeatAnnotation, RhythmAnnotation, decode_annotations,
    decode_format212, encode_format212,
)
from wsloc.synth import pulse_train

# -- 1. metric golden values --------------------------------------------------


def test_criterion_1_metric_golden_values(verdict):
    t0 = time.perf_counter()
    af = ConfusionMatrix(("AF", "Other"), [[252423, 2988], [1566, 245345]])
    worst = max(abs(g - w) for g, w in zip(class_metrics(af, "AF").as_tuple(), (98.83, 99.37, 99.38, 99.09)))
    ok_af = worst <= 0.01
    labels = ("N", "LBBB", "RBBB", "APB", "PVC")
    beat = ConfusionMatrix(labels, [
        [74171, 10, 14, 105, 146],
        [30, 7978, 0, 0, 19],
        [24, 0, 7154, 30, 9],
        [329, 4, 348, 1726, 92],
        [345, 29, 4, 21, 6686],
    ])
    printed = {
        "N": (99.63, 97.07, 99.03, 98.99), "LBBB": (99.39, 99.95, 99.46, 99.91),
        "RBBB": (99.13, 99.60, 95.13, 99.57), "APB": (69.07, 99.84, 91.71, 99.06),
        "PVC": (94.37, 99.71, 96.17, 99.33),
    }
    dev = [abs(g - w) for lab in labels for g, w in zip(class_metrics(beat, lab).as_tuple(), printed[lab])]
    dev += [abs(g - w) for g, w in zip(overall_metrics(beat).as_tuple(), (98.43, 97.74, 98.39, 99.13))]
    elapsed = time.perf_counter() - t0
    ok = ok_af and max(dev) <= 0.05 and elapsed < 1.0
    verdict(1, ok, f"AF max dev {worst:.4f} (<=0.01), beat table max dev {max(dev):.4f} (<=0.05), "
                   f"{elapsed * 1000:.1f} ms")
    assert ok


# -- 2. gradient suite ----------------------------------------------------------


def _primitive_errors():
    r = np.random.default_rng(0)
    errs = {}

    x = r.standard_normal((2, 11, 3))
    w, b = r.standard_normal((4, 5, 3)), r.standard_normal(4)
    R = r.standard_normal((2, 11, 4))
    f = lambda: float((nn.conv1d_forward(x, w, b)[0] * R).sum())
    dx, dw, db = nn.conv1d_backward(R, nn.conv1d_forward(x, w, b)[1])
    errs["conv1d"] = max(rel_error(dx, numeric_grad(f, x)), rel_error(dw, numeric_grad(f, w)),
                         rel_error(db, numeric_grad(f, b)))

    x = r.standard_normal((3, 7, 2))
    g, be = r.standard_normal(2), r.standard_normal(2)
    R = r.standard_normal(x.shape)
    for train_mode in (True, False):
        rm, rv = r.standard_normal(2), 1 + r.random(2)
        f = lambda: float((nn.batchnorm_forward(x, g, be, rm.copy(), rv.copy(), train_mode)[0] * R).sum())
        dx, dg, dbe = nn.batchnorm_backward(R, nn.batchnorm_forward(x, g, be, rm.copy(), rv.copy(), train_mode)[1])
        errs[f"batchnorm(train={train_mode})"] = max(
            rel_error(dx, numeric_grad(f, x)), rel_error(dg, numeric_grad(f, g)),
            rel_error(dbe, numeric_grad(f, be)))

    # kink band: keep ReLU inputs away from 0
    x = r.standard_normal((2, 20, 3))
    x[np.abs(x) < 1e-3] = 0.5
    R = r.standard_normal(x.shape)
    f = lambda: float((nn.relu_forward(x)[0] * R).sum())
    errs["relu"] = rel_error(nn.relu_backward(R, nn.relu_forward(x)[1]), numeric_grad(f, x))

    x = r.standard_normal((2, 9, 2))
    R = r.standard_normal(x.shape)
    _, mask = nn.dropout_forward(x, 0.3, True, np.random.default_rng(1))
    f = lambda: float((x * mask * R).sum())
    errs["dropout"] = rel_error(nn.dropout_backward(R, mask), numeric_grad(f, x))

    # tie band: distinct values
    x = r.permutation(48).astype(float).reshape(2, 8, 3)
    R = r.standard_normal((2, 4, 3))
    f = lambda: float((nn.maxpool2_forward(x)[0] * R).sum())
    errs["maxpool2"] = rel_error(nn.maxpool2_backward(R, nn.maxpool2_forward(x)[1]), numeric_grad(f, x))

    x = r.standard_normal((2, 3, 2))
    R = r.standard_normal((2, 12, 2))
    f = lambda: float((nn.upsample_repeat(x, 4) * R).sum())
    errs["upsample"] = rel_error(nn.upsample_repeat_backward(R, 4), numeric_grad(f, x))

    a, c = r.standard_normal((1, 5, 2)), r.standard_normal((1, 5, 3))
    R = r.standard_normal((1, 5, 5))
    da, dc = nn.concat_channels_backward(R, [2, 3])
    f = lambda: float((nn.concat_channels([a, c]) * R).sum())
    errs["concat"] = max(rel_error(da, numeric_grad(f, a)), rel_error(dc, numeric_grad(f, c)))

    x = r.standard_normal((2, 5, 4))
    R = r.standard_normal(x.shape)
    f = lambda: float((nn.softmax_channels(x) * R).sum())
    errs["softmax"] = rel_error(nn.softmax_backward(R, nn.softmax_channels(x)), numeric_grad(f, x))

    s = r.uniform(0.05, 0.95, 6)
    t = (r.random(6) > 0.5).astype(float)
    f = lambda: nn.bce_loss(s, t)[0]
    errs["bce"] = rel_error(nn.bce_loss(s, t)[1], numeric_grad(f, s))
    return errs


def _end_to_end_errors():
    cfg = ModelConfig(depth=2, classes=2, filters=4, kernel=5, head_filters=4, dropout=0.0,
                      seed=0, dtype="float64")
    m = Model(cfg)
    r = np.random.default_rng(3)
    x = r.standard_normal((2, 32, 1))
    t = np.array([[1.0, 0.0], [1.0, 1.0]])
    mask = [[3, 9, 17, 25], [5, 12, 20, 28]]
    worst = {}
    for spec in ("GAP", "GMP", "LSE:3", "GARP", "GMRP", "LSER:3"):
        m.config = replace(cfg, aggregation=AggregationSpec.parse(spec))
        masks = mask if m.config.aggregation.masked else None
        m.zero_grad()
        batch_loss(m, x, t, masks, train=True, backward=True)
        analytic = {k: v.copy() for k, v in m.grads().items()}
        f = lambda: batch_loss(m, x, t, masks, train=True, backward=False)
        worst[spec] = max(rel_error(analytic[k], numeric_grad(f, p)) for k, p in m.params().items())
    return worst


def test_criterion_2_gradient_suite(verdict):
    t0 = time.perf_counter()
    prim = _primitive_errors()
    e2e = _end_to_end_errors()
    elapsed = time.perf_counter() - t0
    ok = max(prim.values()) <= 1e-4 and max(e2e.values()) <= 1e-3 and elapsed < 120
    verdict(2, ok, f"primitives max rel {max(prim.values()):.2e} (<=1e-4, worst "
                   f"{max(prim, key=prim.get)}), end-to-end max rel {max(e2e.values()):.2e} (<=1e-3, worst "
                   f"{max(e2e, key=e2e.get)}), {elapsed:.1f} s")
    assert ok, (prim, e2e)


# -- 3. aggregation properties ----------------------------------------------------


def test_criterion_3_aggregation_properties(verdict):
    t0 = time.perf_counter()
    r = np.random.default_rng(0)
    failures = []
    for i in range(10_000):
        n, m = int(r.integers(1, 257)), int(r.integers(1, 9))
        D = r.dirichlet(np.ones(m), size=n)
        gap = aggregate(D, AggregationSpec("GAP"))
        gmp = aggregate(D, AggregationSpec("GMP"))
        lse = {rr: aggregate(D, AggregationSpec("LSE", rr)) for rr in (1, 3, 5, 10)}
        tol = 1e-12
        for rr, v in lse.items():
            if not (np.all(gap <= v + tol) and np.all(v <= gmp + tol)):
                failures.append((i, "order", rr))
            if np.any(gmp - v > np.log(n) / rr + tol):
                failures.append((i, "bound", rr))
        if not (np.all(lse[1] <= lse[3] + tol) and np.all(lse[3] <= lse[5] + tol)
                and np.all(lse[5] <= lse[10] + tol)):
            failures.append((i, "monotone"))
        if abs(gap.sum() - 1) > 1e-9:
            failures.append((i, "gap sum"))
        mask = np.sort(r.choice(n, size=int(r.integers(1, n + 1)), replace=True))
        sub = D[mask]
        for masked, base in (("GARP", "GAP"), ("GMRP", "GMP"), ("LSER", "LSE")):
            a = aggregate(D, AggregationSpec(masked, 3), mask)
            b = aggregate(sub, AggregationSpec(base, 3))
            if not np.array_equal(a, b):
                failures.append((i, masked))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 30
    verdict(3, ok, f"10000 random maps, {len(failures)} property violations, {elapsed:.1f} s")
    assert ok, failures[:5]


# -- 4. codecs ----------------------------------------------------------------------


def _word(code, value):
    w = (code << 10) | value
    return bytes((w & 0xFF, w >> 8))


def test_criterion_4_codecs(verdict):
    t0 = time.perf_counter()
    r = np.random.default_rng(0)
    x = r.integers(-2048, 2048, size=(100_000, 2))
    ok_rand = np.array_equal(decode_format212(encode_format212(x), len(x), 2), x)
    edge = np.array([-2048, -1, 0, 2047])
    pairs = np.array([(a, b) for a in edge for b in edge])
    ok_edge = np.array_equal(decode_format212(encode_format212(pairs), len(pairs), 2), pairs)

    fixtures = []
    beats, _ = decode_annotations(b"".join(_word(1, d) for d in (100, 150, 200)) + b"\x00\x00")
    fixtures.append(beats.samples == [100, 250, 450] and beats.codes == ["N"] * 3)
    beats, rhythm = decode_annotations(_word(1, 100) + _word(1, 150) + _word(1, 200) + _word(RHYTHM_CODE, 50)
                                       + _word(AUX, 5) + b"(AFIB\x00" + b"\x00\x00")
    fixtures.append(list(zip(rhythm.onsets, rhythm.codes)) == [(500, "AF")])
    beats, _ = decode_annotations(_word(SKIP, 0) + bytes((1, 0, 0, 0)) + _word(5, 0) + _word(60, 3)
                                  + _word(8, 10) + b"\x00\x00")
    fixtures.append(beats.samples == [65536, 65546] and beats.codes == ["V", "A"])
    beats, rhythm = decode_annotations(b"\x00\x00")
    fixtures.append(beats.samples == [] and rhythm.onsets == [])
    elapsed = time.perf_counter() - t0
    ok = ok_rand and ok_edge and all(fixtures) and elapsed < 10
    verdict(4, ok, f"1e5 random pairs {'ok' if ok_rand else 'MISMATCH'}, boundary pairs "
                   f"{'ok' if ok_edge else 'MISMATCH'}, annotation fixtures {sum(fixtures)}/{len(fixtures)}, "
                   f"{elapsed:.1f} s")
    assert ok


# -- 5. segmentation oracle ------------------------------------------------------------


def test_criterion_5_segmentation_oracle(verdict):
    t0 = time.perf_counter()
    cases = [([0, 25000], ["AF", "Other"]), ([0, 25000, 25500], ["AF", "Other", "AF"]),
             ([0, 6000, 9000, 30000], ["Other", "AF", "Other", "AF"]), ([0], ["Other"])]
    mism = 0
    for onsets, codes in cases:
        segs = extract_rhythm_segments(flat_record(200), RhythmAnnotation(onsets, codes))
        got = [(s.start, s.label_set) for s in segs]
        mism += got != brute_rhythm(50000, onsets, codes, 5000, 1250, 62500, 750)
    r = np.random.default_rng(3)
    for trial in range(3):
        pos = np.sort(r.choice(13000, 300, replace=False))
        codes = list(r.choice(["N", "L", "R", "A", "V", "Q", "/"], 300))
        segs = extract_beat_segments(flat_record(130, rate=100), BeatAnnotation(pos.tolist(), codes))
        want = []
        for s in range(0, 13000 - 2000 + 1, 2000):
            labs = {c for p, c in zip(pos, codes) if s <= p < s + 2000 and c in "NLRAV"}
            if labs:
                want.append((s, labs))
        mism += [(s.start, set(s.label_set)) for s in segs] != want
    elapsed = time.perf_counter() - t0
    ok = mism == 0 and elapsed < 10
    verdict(5, ok, f"{len(cases)} rhythm + 3 beat fixtures vs brute force, {mism} mismatches, {elapsed:.1f} s")
    assert ok


# -- 6. QRS ------------------------------------------------------------------------------


def _match(found, truth, tol):
    found = np.asarray(found)
    used = np.zeros(len(found), bool)
    hits = 0
    for t in truth:
        d = np.abs(found - t).astype(float)
        d[used] = np.inf
        if len(d) and d.min() <= tol:
            used[int(d.argmin())] = True
            hits += 1
    return hits


def test_criterion_6_qrs(verdict):
    t0 = time.perf_counter()
    tp = n_truth = n_found = 0
    for rate in (100, 250, 360, 500, 1000):
        for seed in range(3):
            x, truth = pulse_train(rate=rate, seconds=60, snr_db=20, seed=seed)
            found = pan_tompkins(x, rate)
            tp += _match(found, truth, 0.05 * rate)
            n_truth += len(truth)
            n_found += len(found)
    recall, precision = tp / n_truth, tp / max(1, n_found)
    elapsed = time.perf_counter() - t0
    ok = recall >= 0.99 and precision >= 0.99 and elapsed < 30
    verdict(6, ok, f"recall {100 * recall:.2f}% precision {100 * precision:.2f}% (>=99%, +-50 ms) "
                   f"over {n_truth} pulses, {elapsed:.1f} s")
    assert ok


# -- 7 and 9. end-to-end weak supervision --------------------------------------------------

BEAT_EXPERIMENT = """
task = beat
labels = N,V,S
synth_seconds = 3000
synth_weights = N:0.6,V:0.2,S:0.2
window_seconds = 2
depth = 3
aggregation = GMRP
folds_to_run = 0
max_epochs = 30
patience = 5
figures = false
"""

RHYTHM_EXPERIMENT = """
task = rhythm
synth_seconds = 2400
window_seconds = 8
dense_stride_seconds = 1
sparse_stride_seconds = 40
min_rhythm_seconds = 1.5
depth = 3
aggregation = GMP
folds_to_run = 0
batch_size = 16
max_epochs = 30
patience = 5
figures = false
"""

_RHYTHM_RUNS = []


def _rhythm_run():
    t0 = time.perf_counter()
    rep = run_experiment(parse_config(RHYTHM_EXPERIMENT), write=False)
    _RHYTHM_RUNS.append(rep)
    return rep, time.perf_counter() - t0


def test_criterion_7_weak_supervision_localization(verdict):
    t0 = time.perf_counter()
    beat = run_experiment(parse_config(BEAT_EXPERIMENT), write=False)
    beat_time = time.perf_counter() - t0
    event_acc = np.trace(beat.confusion.counts) / beat.confusion.total
    rhythm, rhythm_time = _rhythm_run()
    median = rhythm.median_boundary_error_s
    ok_beat = beat.record_accuracy >= 0.95 and event_acc >= 0.85 and beat_time < 900
    ok_rhythm = median is not None and median <= 0.25 and rhythm_time < 900
    verdict(7, ok_beat and ok_rhythm,
            f"beat: {beat.folds[0].record_total} test segments, record acc {100 * beat.record_accuracy:.1f}% (>=95), event acc {100 * event_acc:.1f}% "
            f"(>=85), {beat_time:.0f} s; rhythm: median boundary error {median} s (<=0.25) over "
            f"{len(rhythm.boundary_errors_s)} boundaries, {rhythm_time:.0f} s")
    assert ok_beat and ok_rhythm


# -- 8. early stopping ------------------------------------------------------------------------


def test_criterion_8_early_stopping(verdict):
    t0 = time.perf_counter()
    cfg = ModelConfig(depth=2, classes=2, filters=4, kernel=5, head_filters=4, labels=("A", "B"), seed=0)
    model = Model(cfg)
    r = np.random.default_rng(0)
    from wsloc.dataset import Segment

    segs = [Segment("s", i * 64, 64, frozenset({"A" if i % 2 else "B"}), [(32, "A" if i % 2 else "B")],
                    None, r.standard_normal((64, 1))) for i in range(4)]
    hashes = {}
    patience = 10
    res = train(model, segs, [], TrainParams(max_epochs=50, patience=patience, batch_size=2),
                val_loss_fn=lambda m, epoch: float(epoch),  # strictly worsening after epoch 1
                on_epoch_end=lambda epoch, m: hashes.setdefault(epoch, m.weight_hash()))
    restored = model.weight_hash() == hashes[1]
    elapsed = time.perf_counter() - t0
    ok = res.stopped_epoch == patience + 1 and len(res.history) == patience + 1 and restored and elapsed < 60
    verdict(8, ok, f"stopped after {len(res.history)} epochs (expected {patience + 1}), best epoch "
                   f"{res.best_epoch}, restored weights hash {'matches' if restored else 'DIFFERS'}, "
                   f"{elapsed:.1f} s")
    assert ok


# -- 9. determinism -------------------------------------------------------------------------------


def test_criterion_9_determinism(verdict):
    if not _RHYTHM_RUNS:
        _rhythm_run()
    first = _RHYTHM_RUNS[0]
    second, elapsed = _rhythm_run()
    same = (np.array_equal(first.confusion.counts, second.confusion.counts)
            and np.array_equal(first.confusion_transition.counts, second.confusion_transition.counts))
    verdict(9, same, f"two rhythm runs with seed {first.config.seed}: merged confusion matrices "
                     f"{'bit-identical' if same else 'DIFFER'} ({first.confusion.counts.tolist()}), "
                     f"rerun {elapsed:.0f} s")
    assert same


@pytest.fixture(autouse=True, scope="module")
def _clear_runs():
    yield
    _RHYTHM_RUNS.clear()
