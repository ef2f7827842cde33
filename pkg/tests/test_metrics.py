import numpy as np
import pytest

from wsloc.metrics import (
    ConfusionMatrix, class_metrics, confusion_csv, confusion_from_beats, fmt_pct, format_report,
    merge_folds, metrics_csv, overall_metrics, parse_confusion_csv,
)

AF_LABELS = ("AF", "Other")
AF_COUNTS = [[252423, 2988], [1566, 245345]]

BEAT_LABELS = ("N", "LBBB", "RBBB", "APB", "PVC")
BEAT_COUNTS = [
    [74171, 10, 14, 105, 146],
    [30, 7978, 0, 0, 19],
    [24, 0, 7154, 30, 9],
    [329, 4, 348, 1726, 92],
    [345, 29, 4, 21, 6686],
]
# printed per-class values (Se, Sp, Ppr, Acc) and the weighted overall row
BEAT_EXPECTED = {
    "N": (99.63, 97.07, 99.03, 98.99),
    "LBBB": (99.39, 99.95, 99.46, 99.91),
    "RBBB": (99.13, 99.60, 95.13, 99.57),
    "APB": (69.07, 99.84, 91.71, 99.06),
    "PVC": (94.37, 99.71, 96.17, 99.33),
    "Overall": (98.43, 97.74, 98.39, 99.13),
}


def test_af_matrix_golden():
    m = class_metrics(ConfusionMatrix(AF_LABELS, AF_COUNTS), "AF")
    for got, want in zip(m.as_tuple(), (98.83, 99.37, 99.38, 99.09)):
        assert abs(got - want) <= 0.01


def test_beat_matrix_golden():
    cm = ConfusionMatrix(BEAT_LABELS, BEAT_COUNTS)
    for lab in BEAT_LABELS:
        for got, want in zip(class_metrics(cm, lab).as_tuple(), BEAT_EXPECTED[lab]):
            assert abs(got - want) <= 0.05, lab
    for got, want in zip(overall_metrics(cm).as_tuple(), BEAT_EXPECTED["Overall"]):
        assert abs(got - want) <= 0.05


def test_apb_sensitivity():
    cm = ConfusionMatrix(BEAT_LABELS, BEAT_COUNTS)
    assert abs(class_metrics(cm, "APB").se - 69.07) <= 0.01


def test_perfect_matrix_all_hundred():
    cm = ConfusionMatrix(("a", "b"), [[5, 0], [0, 7]])
    for lab in ("a", "b"):
        assert class_metrics(cm, lab).as_tuple() == (100.0, 100.0, 100.0, 100.0)


def test_one_vs_rest_identity():
    cm = ConfusionMatrix(BEAT_LABELS, BEAT_COUNTS)
    for k in range(5):
        assert sum(cm.one_vs_rest(k)) == cm.total


def test_single_class_overall_equals_class():
    cm = ConfusionMatrix(("a", "b"), [[9, 3], [0, 0]])
    overall = overall_metrics(cm)
    assert overall.as_tuple() == class_metrics(cm, "a").as_tuple()


def test_equal_classes_unweighted_mean():
    cm = ConfusionMatrix(("a", "b"), [[8, 2], [3, 7]])
    a, b = class_metrics(cm, "a"), class_metrics(cm, "b")
    o = overall_metrics(cm)
    for x, y, z in zip(a.as_tuple(), b.as_tuple(), o.as_tuple()):
        assert abs(z - (x + y) / 2) < 1e-12


def test_undefined_metric():
    cm = ConfusionMatrix(("a", "b"), [[4, 0], [0, 0]])
    m = class_metrics(cm, "b")
    assert m.se is None and fmt_pct(m.se) == "undef"


def test_confusion_from_beats():
    labels = ("N", "V", "A")
    assert confusion_from_beats(["N", "V"], ["N", "V"], labels).counts.tolist() == [
        [1, 0, 0], [0, 1, 0], [0, 0, 0]]
    assert confusion_from_beats(["N"], ["V"], labels).counts[0, 1] == 1
    with pytest.raises(ValueError):
        confusion_from_beats(["N"], [], labels)


def test_confusion_twenty_beat_fixture():
    ref = list("NNNNNNNNVVVVVAAAAANN")
    hyp = list("NNNNNNVNVVVNVAANAANA")
    tally = {}
    for r, h in zip(ref, hyp):
        tally[(r, h)] = tally.get((r, h), 0) + 1
    cm = confusion_from_beats(ref + ["excluded"], hyp + ["N"], ("N", "V", "A"))
    want = [[tally.get((r, h), 0) for h in "NVA"] for r in "NVA"]
    assert cm.counts.tolist() == want and cm.total == 20


def test_merge_folds():
    r = np.random.default_rng(0)
    folds = [ConfusionMatrix(("a", "b", "c"), r.integers(0, 50, (3, 3))) for _ in range(5)]
    merged = merge_folds(folds)
    assert np.array_equal(merged.counts, sum(f.counts for f in folds))
    assert merged.total == sum(f.total for f in folds)
    zero = ConfusionMatrix.zeros(("a", "b", "c"))
    assert np.array_equal(merge_folds([folds[0], zero]).counts, folds[0].counts)
    assert np.array_equal(merge_folds(folds[::-1]).counts, merged.counts)
    with pytest.raises(ValueError, match="vocabulary"):
        merge_folds([folds[0], ConfusionMatrix.zeros(("a", "b", "d"))])


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        ConfusionMatrix(("a", "b"), [[1, -1], [0, 0]])


def test_report_and_csv_round_trip():
    cm = ConfusionMatrix(AF_LABELS, AF_COUNTS)
    text = format_report(cm, "AF")
    assert "98.83" in text and "99.09" in text
    assert parse_confusion_csv(confusion_csv(cm)).counts.tolist() == AF_COUNTS
    rows = metrics_csv(cm).splitlines()
    assert rows[0] == "class,support,Se,Sp,Ppr,Acc" and rows[-1].startswith("Overall,")
