"""Stream generators, the binary file format, and CIL evaluation/metrics."""

from __future__ import annotations

import logging
import struct

import numpy as np
import pytest

from batchcl.engine import SGD, loss_and_grads
from batchcl.losses import task_loss
from batchcl.model import ModelConfig, build_model
from batchcl.streams import (
    StreamFormatError,
    Task,
    TaskStream,
    backward_transfer,
    evaluate_cil,
    first_task_curve,
    generate_stream,
    load_feature_stream,
    mean_accuracy,
    save_stream,
)


def small_stream(kind="split_synthetic", n_tasks=3, seed=0, **kw):
    args = dict(
        n_tasks=n_tasks, classes_per_task=2, dim=5,
        train_per_task=20, val_per_task=10, seed=seed, separation=3.0,
    )
    args.update(kw)
    return generate_stream(kind, **args)


class TestGeneration:
    def test_permuted_task0_is_base_dataset(self):
        # the base dataset is exactly what a 1-task stream yields; a longer
        # stream must present the identical data as its task 0 (identity perm)
        one = small_stream("permuted", n_tasks=1, seed=4)
        many = small_stream("permuted", n_tasks=5, seed=4)
        np.testing.assert_array_equal(many.tasks[0].train_x, one.tasks[0].train_x)
        np.testing.assert_array_equal(many.tasks[0].train_y, one.tasks[0].train_y)

    def test_permuted_tasks_are_exact_permutations(self):
        s = small_stream("permuted", n_tasks=4, seed=1)
        base = s.tasks[0]
        for t in s.tasks[1:]:
            np.testing.assert_array_equal(
                np.sort(t.train_x, axis=1), np.sort(base.train_x, axis=1)
            )
            # labels shifted into the task's own block
            np.testing.assert_array_equal(
                t.train_y - t.class_lo, base.train_y - base.class_lo
            )

    def test_class_count_scales_with_tasks(self):
        s = generate_stream(
            "permuted", n_tasks=128, classes_per_task=10, dim=6,
            train_per_task=10, val_per_task=10, seed=0,
        )
        assert s.total_classes == 1280
        assert len(s) == 128

    def test_split_synthetic_disjoint_classes(self):
        s = small_stream("split_synthetic", n_tasks=4, seed=2)
        for i, t in enumerate(s.tasks):
            assert (t.class_lo, t.class_hi) == (2 * i, 2 * i + 2)
            assert t.train_y.min() >= t.class_lo and t.train_y.max() < t.class_hi

    def test_reproducible_bitwise(self):
        a = small_stream(seed=7)
        b = small_stream(seed=7)
        for ta, tb in zip(a.tasks, b.tasks):
            np.testing.assert_array_equal(ta.train_x, tb.train_x)
            np.testing.assert_array_equal(ta.val_y, tb.val_y)

    def test_zero_separation_collapses_clusters(self):
        s = small_stream("split_synthetic", separation=0.0, n_tasks=2, seed=3)
        # every class is the same standard normal: class-conditional means
        # are statistically indistinguishable from zero
        t = s.tasks[0]
        for c in range(t.class_lo, t.class_hi):
            m = t.train_x[t.train_y == c].mean(axis=0)
            assert np.abs(m).max() < 1.5

    @pytest.mark.parametrize(
        "bad",
        [
            dict(kind="rotated"),
            dict(n_tasks=0),
            dict(dim=0),
            dict(train_per_task=0),
            dict(val_per_task=1),  # fewer rows than classes
            dict(separation=-1.0),
        ],
    )
    def test_invalid_params_rejected(self, bad):
        args = dict(
            kind="permuted", n_tasks=2, classes_per_task=2, dim=4,
            train_per_task=10, val_per_task=10, seed=0,
        )
        args.update(bad)
        with pytest.raises(ValueError):
            generate_stream(**args)

    def test_overlapping_ranges_rejected(self):
        t0 = small_stream(n_tasks=1, seed=0).tasks[0]
        with pytest.raises(ValueError, match="overlap"):
            TaskStream(tasks=(t0, t0))


class TestStreamFile:
    def test_round_trip_bitwise(self, tmp_path):
        s = small_stream(n_tasks=3, seed=5)
        path = str(tmp_path / "stream.clfs")
        save_stream(s, path)
        back = load_feature_stream(path)
        assert len(back) == 3
        for a, b in zip(s.tasks, back.tasks):
            np.testing.assert_array_equal(a.train_x, b.train_x)
            np.testing.assert_array_equal(a.train_y, b.train_y)
            np.testing.assert_array_equal(a.val_x, b.val_x)
            np.testing.assert_array_equal(a.val_y, b.val_y)
            assert (a.class_lo, a.class_hi) == (b.class_lo, b.class_hi)

    def test_header_layout(self, tmp_path):
        s = small_stream(n_tasks=2, seed=5)
        path = str(tmp_path / "stream.clfs")
        save_stream(s, path)
        blob = open(path, "rb").read()
        assert blob[:4] == b"CLFS"
        version, count = struct.unpack_from("<HI", blob, 4)
        assert (version, count) == (1, 2)
        task_id, n_classes, dim, n_train, n_val = struct.unpack_from("<IIIQQ", blob, 10)
        assert (task_id, n_classes, dim, n_train, n_val) == (0, 2, 5, 20, 10)

    def test_truncated_file_names_byte_offset(self, tmp_path):
        s = small_stream(n_tasks=2, seed=5)
        path = str(tmp_path / "stream.clfs")
        save_stream(s, path)
        blob = open(path, "rb").read()
        with open(path, "wb") as f:
            f.write(blob[: len(blob) - 40])
        with pytest.raises(StreamFormatError, match=r"byte \d+"):
            load_feature_stream(path)

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "bad.clfs")
        with open(path, "wb") as f:
            f.write(b"NOPE" + b"\x00" * 32)
        with pytest.raises(StreamFormatError, match="magic"):
            load_feature_stream(path)

    def test_bad_version(self, tmp_path):
        s = small_stream(n_tasks=1, seed=5)
        path = str(tmp_path / "stream.clfs")
        save_stream(s, path)
        blob = bytearray(open(path, "rb").read())
        blob[4:6] = struct.pack("<H", 9)
        open(path, "wb").write(bytes(blob))
        with pytest.raises(StreamFormatError, match="version"):
            load_feature_stream(path)

    def test_overlapping_ids_rebased_and_logged(self, tmp_path, caplog):
        # hand-write a 2-task file where both tasks use class ids {0, 1}
        path = str(tmp_path / "overlap.clfs")
        dim = 3
        rng = np.random.default_rng(0)
        with open(path, "wb") as f:
            f.write(b"CLFS" + struct.pack("<HI", 1, 2))
            for tid in (0, 1):
                f.write(struct.pack("<IIIQQ", tid, 2, dim, 4, 2))
                for count in (4, 2):
                    for i in range(count):
                        f.write(rng.standard_normal(dim).astype("<f4").tobytes())
                        f.write(struct.pack("<I", i % 2))
        with caplog.at_level(logging.INFO, logger="batchcl.streams"):
            s = load_feature_stream(path)
        assert (s.tasks[0].class_lo, s.tasks[0].class_hi) == (0, 2)
        assert (s.tasks[1].class_lo, s.tasks[1].class_hi) == (2, 4)
        assert s.tasks[1].train_y.min() >= 2
        assert any("re-based" in r.message for r in caplog.records)

    def test_dim_inconsistency_rejected(self, tmp_path):
        path = str(tmp_path / "dims.clfs")
        with open(path, "wb") as f:
            f.write(b"CLFS" + struct.pack("<HI", 1, 2))
            f.write(struct.pack("<IIIQQ", 0, 1, 3, 1, 1))
            f.write(np.zeros(3, dtype="<f4").tobytes() + struct.pack("<I", 0))
            f.write(np.zeros(3, dtype="<f4").tobytes() + struct.pack("<I", 0))
            f.write(struct.pack("<IIIQQ", 1, 1, 4, 1, 1))
            f.write(np.zeros(4, dtype="<f4").tobytes() + struct.pack("<I", 1))
            f.write(np.zeros(4, dtype="<f4").tobytes() + struct.pack("<I", 1))
        with pytest.raises(StreamFormatError, match="dim"):
            load_feature_stream(path)


class TestEvaluateCil:
    def test_constant_logit_model_predicts_class_zero(self):
        s = small_stream(n_tasks=2, seed=6)
        m = build_model(
            ModelConfig(input_dim=5, total_classes=4, res_blocks=1,
                        res_layers_per_block=1, res_dim=6, hidden_dim=4), seed=0
        )
        m.params["head.W"][:] = 0.0
        m.params["head.b"][:] = 0.0
        accs = evaluate_cil(m, list(s.tasks))
        t0 = s.tasks[0]
        assert accs[0] == pytest.approx(float((t0.val_y == 0).mean()))
        assert accs[1] == 0.0  # task 1 labels are 2/3, prediction is always 0

    def test_accuracy_matches_confusion_matrix_oracle(self):
        s = small_stream(n_tasks=2, seed=7)
        m = build_model(
            ModelConfig(input_dim=5, total_classes=4, res_blocks=1,
                        res_layers_per_block=1, res_dim=6, hidden_dim=4), seed=1
        )
        accs = evaluate_cil(m, list(s.tasks))
        for t in s.tasks:
            pred = m.predict(t.val_x)
            cm = np.zeros((4, 4), dtype=int)
            for want, got in zip(t.val_y, pred):
                cm[want, got] += 1
            assert accs[t.task_id] == pytest.approx(np.trace(cm) / cm.sum())

    def test_head_smaller_than_universe_rejected(self):
        s = small_stream(n_tasks=3, seed=8)  # 6 classes
        m = build_model(
            ModelConfig(input_dim=5, total_classes=4, res_blocks=1,
                        res_layers_per_block=1, res_dim=6, hidden_dim=4), seed=0
        )
        with pytest.raises(ValueError, match="head"):
            evaluate_cil(m, list(s.tasks))

    def test_separable_task_trains_to_high_accuracy(self):
        s = generate_stream(
            "split_synthetic", n_tasks=1, classes_per_task=2, dim=8,
            train_per_task=120, val_per_task=60, seed=9, separation=5.0,
        )
        t = s.tasks[0]
        m = build_model(
            ModelConfig(input_dim=8, total_classes=2, res_blocks=1,
                        res_layers_per_block=1, res_dim=16, hidden_dim=8,
                        dropout_p=0.0), seed=0
        )
        opt = SGD(lr=0.1)
        rng = np.random.default_rng(0)
        for _ in range(30):
            order = rng.permutation(len(t.train_y))
            for i in range(0, len(order), 32):
                idx = order[i : i + 32]
                if len(idx) < 2:
                    continue
                ts, leaves = m.forward_with_taps(t.train_x[idx], train=True, rng=rng)
                _, grads = loss_and_grads(task_loss(ts.logits, t.train_y[idx]), leaves)
                opt.step(m.params, grads)
        accs = evaluate_cil(m, [t])
        assert accs[0] > 0.95


class TestMetrics:
    def test_constant_history_zero_bwt(self):
        history = [{0: 0.8}, {0: 0.8, 1: 0.7}, {0: 0.8, 1: 0.7, 2: 0.6}]
        assert backward_transfer(history) == pytest.approx(0.0)

    def test_pinned_two_task_case(self):
        history = [{1: 0.9}, {1: 0.5, 2: 0.8}]
        assert backward_transfer(history) == pytest.approx(-0.4)

    def test_random_history_matches_spreadsheet_arithmetic(self):
        rng = np.random.default_rng(10)
        history = []
        accs = {}
        for s in range(5):
            accs = dict(accs)
            accs[s] = float(rng.random())
            for k in list(accs)[:-1]:
                accs[k] = float(rng.random())
            history.append(dict(accs))
        got = backward_transfer(history)
        # cell-by-cell recomputation
        expected = np.mean(
            [history[-1][t] - history[t][t] for t in range(4)]
        )
        assert got == pytest.approx(float(expected))

    def test_single_step_rejected(self):
        with pytest.raises(ValueError, match="two steps"):
            backward_transfer([{0: 0.5}])

    def test_first_task_curve(self):
        history = [{3: 0.9}, {3: 0.7, 4: 0.8}, {3: 0.6, 4: 0.7, 5: 0.9}]
        assert first_task_curve(history) == [0.9, 0.7, 0.6]

    def test_mean_accuracy(self):
        assert mean_accuracy({0: 0.5, 1: 0.7}) == pytest.approx(0.6)
