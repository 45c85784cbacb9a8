import numpy as np
import pytest
from hypothesis import given, strategies as st

from rebalance.budget import count_params
from rebalance.checkpoint import head_param_count
from rebalance.config import ConfigError
from rebalance.finetune import (attach_head, bio_entities, classification_dataset, entity_f1, evaluate,
                                finetune, load_task_checkpoint, load_task_file, lr_sweep, predict,
                                save_task_checkpoint, score, span_dataset, span_em_f1, tagging_dataset)
from rebalance.model import StateError, build, to_finetune, truncate_layers
from rebalance.tokenizer import WORD_MARK, Vocab

from conftest import tiny_config

WORDS = ["good", "bad", "nice", "awful", "movie", "the", "was", "paris", "rome", "in", "lives"]
VOCAB = Vocab.from_pieces([(WORD_MARK + w, -2.0) for w in WORDS])


def base_model(h=16, seed=0, layers=1):
    c = tiny_config(vocab_size=len(VOCAB), input_dim=h, output_dim=h, hidden=h, heads=2, ffn_dim=4 * h,
                    max_positions=16, layers=layers)
    return to_finetune(build(c, seed))


def toy_sentiment():
    rows = []
    for i in range(20):
        pos = i % 2 == 0
        w = ["good", "nice"][i // 2 % 2] if pos else ["bad", "awful"][i // 2 % 2]
        rows.append(("pos" if pos else "neg", w, None))
    return classification_dataset(rows, VOCAB, 16)


# -- heads ---------------------------------------------------------------------

def test_classification_head_size():
    c = tiny_config(vocab_size=50, input_dim=768, output_dim=768, hidden=768, heads=12, ffn_dim=3072)
    tm = attach_head(to_finetune(build(c)), "classification", 3)
    assert tm.num_params() - count_params(c).finetune_count == 768 * 3 + 3


def test_span_head_is_width_two():
    base = base_model()
    tm = attach_head(base, "span", 7)
    assert tm.num_params() - base.num_params() == 2 * 16 + 2


@pytest.mark.parametrize("kind, k, pooler", [("cls", 4, False), ("tag", 5, False), ("span", 2, False),
                                             ("cls", 3, True)])
def test_head_count_matches_formula(kind, k, pooler):
    base = base_model()
    tm = attach_head(base, kind, k, pooler=pooler)
    full = {"cls": "classification", "tag": "tagging", "span": "span"}[kind]
    assert tm.num_params() - base.num_params() == head_param_count(16, full, k, pooler)


def test_single_label_head_is_a_config_error():
    with pytest.raises(ConfigError):
        attach_head(base_model(), "classification", 1)


def test_head_needs_output_side_removed():
    with pytest.raises(StateError):
        attach_head(build(tiny_config()), "classification", 2)


def test_head_init_std():
    c = tiny_config(vocab_size=20, input_dim=256, output_dim=256, hidden=256, heads=4, ffn_dim=16)
    w = attach_head(to_finetune(build(c)), "tagging", 64, seed=1).head.params["head.weight"].data
    assert abs(w.std() - 0.02) < 0.003


# -- training ------------------------------------------------------------------

def test_separable_toy_reaches_full_train_accuracy():
    ds = toy_sentiment()
    # pinned: 29 of 30 seeds separate within 3 epochs at these settings
    tm = attach_head(base_model(h=32), "cls", 2)
    finetune(tm, ds, lr=1e-2, batch_size=2, epochs=3, seed=0, warmup_frac=0.1)
    assert evaluate(tm, ds)["accuracy"] == 100.0


def test_zero_epochs_leaves_model_unchanged():
    tm = attach_head(base_model(), "cls", 2)
    before = {n: t.data.copy() for n, t in tm.params.items()}
    finetune(tm, toy_sentiment(), epochs=0)
    for n, t in tm.params.items():
        np.testing.assert_array_equal(t.data, before[n])


def test_finetune_is_deterministic():
    runs = []
    for _ in range(2):
        tm = attach_head(base_model(), "cls", 2)
        runs.append([r["loss"] for r in finetune(tm, toy_sentiment(), lr=1e-3, batch_size=4, epochs=2, seed=5).history])
    assert runs[0] == runs[1]


def test_truncated_model_uses_same_path():
    base = truncate_layers(base_model(layers=2), 1)
    tm = attach_head(base, "cls", 2)
    finetune(tm, toy_sentiment(), lr=1e-2, batch_size=4, epochs=1)
    assert set(evaluate(tm, toy_sentiment())) == {"accuracy"}


def test_divergence_is_reported():
    tm = attach_head(base_model(), "cls", 2)
    tm.head.params["head.bias"].data[:] = np.nan
    with pytest.raises(FloatingPointError, match="diverged"):
        finetune(tm, toy_sentiment(), epochs=1)


def test_empty_train_set():
    ds = toy_sentiment()
    ds.examples = []
    with pytest.raises(ValueError):
        finetune(attach_head(base_model(), "cls", 2), ds)


def test_lr_sweep_picks_best_dev_rate():
    ds = toy_sentiment()
    best, results = lr_sweep(lambda: attach_head(base_model(h=32), "cls", 2), ds, ds, lrs=(1e-6, 1e-2),
                             batch_size=2, epochs=3)
    assert best == 1e-2 and set(results) == {1e-6, 1e-2}
    assert results[1e-2]["accuracy"] >= results[1e-6]["accuracy"]


def test_tagging_and_span_train_end_to_end():
    tag = tagging_dataset([[("paris", "B-LOC"), ("lives", "O")], [("rome", "B-LOC"), ("in", "O")]], VOCAB, 16)
    tm = attach_head(base_model(), "tag", len(tag.labels), labels=tag.labels)
    finetune(tm, tag, lr=1e-2, batch_size=2, epochs=2)
    assert set(evaluate(tm, tag)) == {"precision", "recall", "f1"}
    span = span_dataset([("in", "the movie was good", 14, 18)], VOCAB, 16)
    tm = attach_head(base_model(), "span", 2)
    finetune(tm, span, lr=1e-2, batch_size=1, epochs=2)
    s, e = predict(tm, span)[0]
    ps, pe = span.examples[0].passage
    assert ps <= s <= e <= pe


# -- datasets ------------------------------------------------------------------

def test_span_characters_map_to_passage_tokens():
    ds = span_dataset([("the movie", "paris was good", 10, 14)], VOCAB, 16)
    ex = ds.examples[0]
    # [CLS] the movie [SEP] paris was good [SEP]
    assert ex.passage == (4, 6) and ex.span == (6, 6)


def test_span_outside_kept_passage_is_skipped():
    ds = span_dataset([("the", "paris was good", 10, 14)], VOCAB, 6)
    assert len(ds) == 0 and ds.skipped == 1


def test_tagging_supervises_first_subword_only():
    v = Vocab.from_pieces([(WORD_MARK + "pa", -1.0), ("ris", -1.0), (WORD_MARK + "in", -1.0)])
    ds = tagging_dataset([[("paris", "B-LOC"), ("in", "O")]], v, 16)
    assert ds.examples[0].tags == [-1, ds.labels.index("B-LOC"), -1, ds.labels.index("O"), -1]


def test_task_files(tmp_path):
    (tmp_path / "c.tsv").write_text("pos\tgood\t\nneg\tbad\tthe movie\n", encoding="utf-8")
    (tmp_path / "t.txt").write_text("paris B-LOC\nlives O\n\nrome B-LOC\n", encoding="utf-8")
    (tmp_path / "s.tsv").write_text("in\tthe movie was good\t14\t18\n", encoding="utf-8")
    assert len(load_task_file("cls", tmp_path / "c.tsv", VOCAB, 16)) == 2
    assert len(load_task_file("tag", tmp_path / "t.txt", VOCAB, 16)) == 2
    assert len(load_task_file("span", tmp_path / "s.tsv", VOCAB, 16)) == 1
    (tmp_path / "bad.tsv").write_text("only-one-field\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="bad.tsv:1"):
        load_task_file("cls", tmp_path / "bad.tsv", VOCAB, 16)


def test_task_checkpoint_round_trip(tmp_path):
    tm = attach_head(base_model(), "cls", 3, seed=2, labels=["a", "b", "c"])
    save_task_checkpoint(tm, tmp_path / "t.ckpt")
    back = load_task_checkpoint(tmp_path / "t.ckpt")
    assert back.head.kind == "classification" and back.head.labels == ["a", "b", "c"]
    for n, t in tm.params.items():
        assert back.params[n].data.tobytes() == t.data.tobytes()


# -- metrics -------------------------------------------------------------------

def test_perfect_predictions():
    assert score("cls", [0, 1, 2], [0, 1, 2]) == {"accuracy": 100.0}
    tags = [["B-PER", "I-PER", "O"]]
    assert score("tag", tags, tags)["f1"] == 100.0
    assert score("span", [(1, 3)], [(1, 3)]) == {"em": 100.0, "f1": 100.0}


def test_span_overlap_example():
    em, f1 = span_em_f1((5, 8), (6, 9))
    assert em == 0.0 and 100 * f1 == pytest.approx(75.0)


def test_disjoint_entities_score_zero():
    assert entity_f1([["B-PER", "O", "O"]], [["O", "O", "B-PER"]]) == (0.0, 0.0, 0.0)


def test_stray_inside_tag_opens_an_entity():
    assert bio_entities(["O", "I-LOC", "I-LOC", "B-PER", "I-ORG"]) == {("LOC", 1, 2), ("PER", 3, 3), ("ORG", 4, 4)}


def test_type_change_splits_entities():
    assert bio_entities(["B-LOC", "I-PER"]) == {("LOC", 0, 0), ("PER", 1, 1)}


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=30), st.randoms())
def test_scores_are_order_independent(pairs, rnd):
    gold, pred = [g for g, _ in pairs], [p for _, p in pairs]
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    assert score("cls", gold, pred) == score("cls", [g for g, _ in shuffled], [p for _, p in shuffled])


@given(st.tuples(st.integers(0, 10), st.integers(0, 10)), st.tuples(st.integers(0, 10), st.integers(0, 10)))
def test_span_scores_bounded(g, p):
    g, p = tuple(sorted(g)), tuple(sorted(p))
    em, f1 = span_em_f1(g, p)
    assert 0 <= f1 <= 1 and (em == 1) == (g == p)
    assert (f1 == 1) == (g == p)
