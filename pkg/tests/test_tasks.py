"""Task generators, mixtures, encoding, and the accuracy metric."""

import numpy as np
import pytest

from mosld import ConfigError, Rng, Tensor, constant
from mosld.backbone import BackboneConfig, build_backbone
from mosld.tasks import (BOS, PAD, SEP, DatasetSplit, Example, TaskSpec,
                         accuracy, default_specs, encode_batch, gen_task,
                         greedy_decode, make_mixture, split_from_lines,
                         split_to_lines)


class EchoModel:
    """Stub model that always continues by repeating the prompt."""

    def __init__(self, prompt_len, vocab=64):
        self.prompt_len = prompt_len
        self.vocab = vocab

    def forward(self, tokens, mode, rng):
        b, t = tokens.shape
        emitted = t - (self.prompt_len + 2)
        nxt = tokens[:, 1 + emitted]
        logits = np.zeros((b, t, self.vocab))
        logits[np.arange(b), -1, nxt] = 1.0
        return Tensor(logits), constant(np.asarray(0.0)), {}


# ------------------------------------------------------------ definitions

def test_task_mappings():
    specs = default_specs()
    copy_ex = gen_task(specs["copy"], Rng(0))[0].examples[0]
    assert copy_ex.answer == copy_ex.prompt

    rev_ex = gen_task(specs["reverse"], Rng(0))[0].examples[0]
    assert rev_ex.answer == tuple(reversed(rev_ex.prompt))

    sort_ex = gen_task(specs["sort"], Rng(0))[0].examples[0]
    assert sort_ex.answer == tuple(sorted(sort_ex.prompt))

    succ_ex = gen_task(specs["succ"], Rng(0))[0].examples[0]
    assert succ_ex.answer == tuple(t + 1 for t in succ_ex.prompt)


def test_mod_add_arithmetic():
    # digits live at ids 40..49; (7, 6) encodes to (47, 46) and the
    # answer 3 = (7+6) mod 10 encodes to 43
    spec = default_specs()["mod_add"]
    train, test = gen_task(spec, Rng(1))
    for ex in train.examples + test.examples:
        a, b = ex.prompt
        assert ex.answer == (40 + ((a - 40) + (b - 40)) % 10,)
    all_prompts = {ex.prompt for ex in train.examples + test.examples}
    assert (47, 46) in all_prompts or len(all_prompts) == 100
    assert len(train.examples) == 80 and len(test.examples) == 20


def test_vocab_slices_stay_in_range():
    for spec in default_specs().values():
        train, test = gen_task(spec, Rng(2))
        lo, hi = spec.vocab_slice
        for ex in train.examples + test.examples:
            assert all(lo <= t < hi for t in ex.prompt)
            assert all(lo <= t < hi for t in ex.answer)
            assert all(t < 64 for t in ex.answer)


def test_copy_and_reverse_slices_disjoint():
    specs = default_specs()
    c = specs["copy"].vocab_slice
    r = specs["reverse"].vocab_slice
    assert set(range(*c)).isdisjoint(range(*r))


# ------------------------------------------------------------- generation

def test_gen_task_deterministic():
    spec = default_specs()["copy"]
    t1, _ = gen_task(spec, Rng(3))
    t2, _ = gen_task(spec, Rng(3))
    assert t1.examples == t2.examples


def test_gen_task_train_test_disjoint():
    for name, spec in default_specs().items():
        train, test = gen_task(spec, Rng(4))
        train_set = {ex.prompt for ex in train.examples}
        test_set = {ex.prompt for ex in test.examples}
        assert not train_set & test_set, name
        assert len(train_set) == len(train.examples)
        assert len(test_set) == len(test.examples)


def test_gen_task_rejects_impossible_sizes():
    spec = TaskSpec("mod_add", 2, (40, 50), 90, 20)  # only 100 exist
    with pytest.raises(ConfigError):
        gen_task(spec, Rng(5))


# --------------------------------------------------------------- mixture

def make_training_splits(n=100):
    specs = default_specs(n_train=n, n_test=10)
    return {name: gen_task(specs[name], Rng(6).split(i))[0]
            for i, name in enumerate(("copy", "reverse", "sort"))}


def test_mixture_concatenates_and_shuffles():
    splits = make_training_splits()
    small = DatasetSplit(splits["reverse"].examples[:50], "single:reverse",
                         "train")
    mix = make_mixture([splits["copy"], small], Rng(7))
    assert len(mix) == 150
    assert mix.setting == "mixture"
    # same seed, same order
    mix2 = make_mixture([splits["copy"], small], Rng(7))
    assert mix.examples == mix2.examples
    # conservation per task
    assert sum(ex.task == "copy" for ex in mix.examples) == 100
    assert sum(ex.task == "reverse" for ex in mix.examples) == 50


def test_mixture_refuses_test_splits_and_ood():
    specs = default_specs(n_train=50, n_test=10)
    train_c, test_c = gen_task(specs["copy"], Rng(8))
    train_r, _ = gen_task(specs["reverse"], Rng(9))
    with pytest.raises(ConfigError):
        make_mixture([train_c, test_c], Rng(10))
    succ_train, _ = gen_task(specs["succ"], Rng(11))
    with pytest.raises(ConfigError):
        make_mixture([train_c, succ_train], Rng(12))
    with pytest.raises(ConfigError):
        make_mixture([train_c], Rng(13))


# --------------------------------------------------------------- encoding

def test_encode_batch_layout():
    ex = Example((10, 11), (10, 11), "copy")
    inputs, targets, mask = encode_batch([ex], pad_to=8)
    # sequence: BOS 10 11 SEP 10 11 PAD PAD
    np.testing.assert_array_equal(
        inputs[0], [BOS, 10, 11, SEP, 10, 11, PAD])
    np.testing.assert_array_equal(
        targets, [10, 11, SEP, 10, 11, PAD, PAD])
    # loss reads exactly the answer positions
    np.testing.assert_array_equal(mask, [0, 0, 0, 1, 1, 0, 0])


def test_encode_batch_pads_to_longest():
    exs = [Example((10,), (10,), "copy"), Example((10, 11), (10, 11),
                                                  "copy")]
    inputs, _, _ = encode_batch(exs)
    assert inputs.shape == (2, 5)


def test_greedy_decode_echo_model():
    model = EchoModel(prompt_len=3)
    got = greedy_decode(model, [(10, 11, 12), (20, 21, 22)], 3)
    np.testing.assert_array_equal(got, [[10, 11, 12], [20, 21, 22]])


# --------------------------------------------------------------- accuracy

def test_accuracy_echo_model_copy_vs_reverse():
    specs = default_specs(n_train=30, n_test=30)
    _, copy_test = gen_task(specs["copy"], Rng(14))
    _, rev_test = gen_task(specs["reverse"], Rng(15))
    non_pal = [ex for ex in rev_test.examples
               if ex.prompt != tuple(reversed(ex.prompt))]
    both = DatasetSplit(copy_test.examples + non_pal, "mixture", "test")
    model = EchoModel(prompt_len=6)
    acc = accuracy(model, both)
    assert acc["copy"] == 1.0
    assert acc["reverse"] == 0.0
    np.testing.assert_allclose(acc["macro"], 0.5, atol=1e-12)


def test_accuracy_macro_is_mean_of_tasks():
    specs = default_specs(n_train=20, n_test=20)
    _, t1 = gen_task(specs["copy"], Rng(16))
    _, t2 = gen_task(specs["sort"], Rng(17))
    split = DatasetSplit(t1.examples + t2.examples, "mixture", "test")
    base = build_backbone(BackboneConfig(), Rng(18))
    from mosld.backbone import attach_adapters
    model = attach_adapters(base, None, None, None, kind="fp")
    acc = accuracy(model, split)
    np.testing.assert_allclose(acc["macro"],
                               (acc["copy"] + acc["sort"]) / 2.0,
                               atol=1e-12)


def test_accuracy_untrained_model_is_chance_level():
    specs = default_specs(n_train=20, n_test=50)
    _, test = gen_task(specs["copy"], Rng(19))
    base = build_backbone(BackboneConfig(), Rng(20))
    from mosld.backbone import attach_adapters
    model = attach_adapters(base, None, None, None, kind="fp")
    acc = accuracy(model, test)
    assert acc["copy"] <= 0.02  # 6-token exact match of 16-way choices


# ----------------------------------------------------------------- export

def test_line_export_round_trip():
    spec = default_specs(n_train=25, n_test=5)["sort"]
    train, _ = gen_task(spec, Rng(21))
    text = split_to_lines(train)
    back = split_from_lines(text)
    assert back.examples == train.examples
    assert back.setting == train.setting
    assert back.role == train.role
