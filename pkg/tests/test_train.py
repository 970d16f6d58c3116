"""Loss, optimizer, LSTM, metric, and training-loop tests with hand oracles."""

import math

import numpy as np
import pytest

from conftest import assert_close, random_array
from stag.data import WorldSpec, generate_segment
from stag.errors import MetricUndefinedError, NumericalAbortError, ValidationError
from stag.lstm import LstmParams, lstm_sequence
from stag.metrics import accuracy, average_precision, mean_average_precision
from stag.model import StagParams, VariantConfig
from stag.optim import OptimState, bce_with_logits, clip_gradients, lr_decay, sgd_step
from stag.rng import make_rng
from stag.tensor import DiffNode, Tensor, grad_check, mean_over_axis, mul_const, reshape
from stag.train import METRICS_HEADER, evaluate, train, write_metrics_csv


# ---------------------------------------------------------------- loss


class TestBceWithLogits:
    def test_even_logit_gives_log_two(self):
        loss = bce_with_logits(DiffNode(Tensor([0.0])), np.array([1.0]))
        assert_close(loss.value.data, [math.log(2.0)], 1e-15, "log 2")

    def test_confident_correct_is_tiny(self):
        loss = bce_with_logits(DiffNode(Tensor([20.0])), np.array([1.0]))
        assert_close(loss.value.data, [math.log1p(math.exp(-20.0))], 1e-18, "tail")

    def test_confident_wrong_is_linear(self):
        loss = bce_with_logits(DiffNode(Tensor([-20.0])), np.array([1.0]))
        assert_close(loss.value.data, [20.0 + math.log1p(math.exp(-20.0))], 1e-12, "wrong tail")

    def test_extreme_logits_stay_finite(self):
        loss = bce_with_logits(DiffNode(Tensor([1e4, -1e4])), np.array([0.0, 1.0]))
        assert_close(loss.value.data, [1e4], 1e-6, "huge logit")

    def test_mean_over_classes(self):
        loss = bce_with_logits(DiffNode(Tensor([0.0, 0.0])), np.array([1.0, 0.0]))
        assert_close(loss.value.data, [math.log(2.0)], 1e-15, "mean")

    def test_gradient_hand_value(self):
        logits = DiffNode(Tensor([0.0]))
        bce_with_logits(logits, np.array([1.0])).backward()
        assert_close(logits.grad.data, [-0.5], 1e-15, "grad at zero")

    def test_gradient_matches_numeric(self, rng):
        for trial in range(20):
            z = random_array(rng, (4,), -3.0, 3.0)
            labels = (rng.random(4) < 0.5).astype(np.float64)
            worst = grad_check(lambda node: bce_with_logits(node, labels), Tensor(z))
            assert worst < 1e-7, f"trial {trial}: {worst}"

    def test_soft_labels_rejected(self):
        with pytest.raises(ValidationError):
            bce_with_logits(DiffNode(Tensor([0.0])), np.array([0.5]))


# ---------------------------------------------------------------- optimizer


def one_param(value):
    return [("w", DiffNode(Tensor(value)))]


class TestSgd:
    def test_two_step_momentum_recurrence(self):
        # constant gradient 1: v1 = -0.01, v2 = 0.9*(-0.01) - 0.01 = -0.019
        params = one_param([0.0])
        state = OptimState(lr=0.01, momentum=0.9, clip_norm=math.inf)
        params[0][1].grad.data[...] = 1.0
        sgd_step(params, state)
        assert_close(params[0][1].value.data, [-0.01], 1e-15, "step 1")
        params[0][1].grad.data[...] = 1.0
        sgd_step(params, state)
        assert_close(params[0][1].value.data, [-0.029], 1e-15, "step 2")

    def test_zero_momentum_matches_vanilla(self, rng):
        value = random_array(rng, (3,))
        grad = random_array(rng, (3,))
        want = value - 0.1 * grad
        params = one_param(value.copy())
        params[0][1].grad.data[...] = grad
        sgd_step(params, OptimState(lr=0.1, momentum=0.0, clip_norm=math.inf))
        assert_close(params[0][1].value.data, want, 1e-15, "vanilla")

    def test_clipping_rescales_to_limit(self):
        params = one_param([0.0, 0.0])
        params[0][1].grad.data[...] = [30.0, 40.0]  # norm 50
        norm = clip_gradients(params, 5.0)
        assert_close(norm, 50.0, 1e-12, "pre-clip norm")
        assert_close(params[0][1].grad.data, [3.0, 4.0], 1e-12, "rescaled")

    def test_small_gradients_untouched(self):
        params = one_param([0.0])
        params[0][1].grad.data[...] = 2.0
        clip_gradients(params, 5.0)
        assert params[0][1].grad.data[0] == 2.0

    def test_nan_gradient_aborts_with_name(self):
        params = one_param([0.0])
        params[0][1].grad.data[...] = np.nan
        with pytest.raises(NumericalAbortError, match="w"):
            clip_gradients(params, 5.0)

    def test_lr_halves_per_epoch(self):
        state = OptimState(lr=0.01)
        lr_decay(state)
        assert state.lr == 0.005 and state.epoch == 1
        lr_decay(state, 0.5)
        assert state.lr == 0.0025 and state.epoch == 2


# ---------------------------------------------------------------- lstm


def lstm_oracle(x, w_x, w_h, b):
    """Step-by-step restatement with numpy scalars; gate layout [i, f, o, g]."""
    hidden = w_h.shape[0]
    h = np.zeros(hidden)
    c = np.zeros(hidden)
    sig = lambda a: 1.0 / (1.0 + np.exp(-a))
    for x_t in x:
        pre = x_t @ w_x + h @ w_h + b
        i = sig(pre[:hidden])
        f = sig(pre[hidden : 2 * hidden])
        o = sig(pre[2 * hidden : 3 * hidden])
        g = np.tanh(pre[3 * hidden :])
        c = f * c + i * g
        h = o * np.tanh(c)
    return h


class TestLstm:
    def test_matches_unrolled_oracle(self):
        for trial in range(20):
            rng = make_rng(55, "lstm", trial)
            steps = int(rng.integers(1, 7))
            d_in = int(rng.integers(1, 5))
            hidden = int(rng.integers(1, 5))
            params = LstmParams.init(int(rng.integers(0, 10_000)), d_in, hidden)
            x = rng.normal(0.0, 1.5, size=(steps, d_in))
            got = lstm_sequence(DiffNode(Tensor(x)), params).value.data
            want = lstm_oracle(
                x, params.w_x.value.data, params.w_h.value.data, params.b.value.data
            )
            assert_close(got, want, 1e-10, f"lstm trial {trial}")

    def test_gradient_through_time(self, rng):
        params = LstmParams.init(9, 3, 2)
        x = random_array(rng, (4, 3))

        def run(node):
            out = lstm_sequence(node, params)
            weighted = mul_const(out, np.array([0.7, -1.3]))
            return mean_over_axis(reshape(weighted, (1, 2)), 1)

        worst = grad_check(run, Tensor(x))
        assert worst < 1e-6, worst

    def test_order_sensitivity(self, rng):
        params = LstmParams.init(10, 3, 3)
        x = random_array(rng, (5, 3))
        fwd = lstm_sequence(DiffNode(Tensor(x)), params).value.data
        rev = lstm_sequence(DiffNode(Tensor(x[::-1].copy())), params).value.data
        assert np.max(np.abs(fwd - rev)) > 1e-9


# ---------------------------------------------------------------- metrics


class TestMetrics:
    def test_accuracy_threshold(self):
        scores = np.array([[0.9, 0.2], [0.5, 0.4]])
        labels = np.array([[1.0, 0.0], [0.0, 1.0]])
        # 0.9 hit, 0.2 hit, 0.5 counts as positive so miss, 0.4 miss
        assert accuracy(scores, labels) == 0.5

    def test_average_precision_hand_case(self):
        # ranks 1 and 3 are positive: (1/1 + 2/3) / 2
        ap = average_precision([0.9, 0.8, 0.7], [1.0, 0.0, 1.0])
        assert_close(ap, 5.0 / 6.0, 1e-12, "ap")

    def test_average_precision_perfect_and_inverted(self):
        assert average_precision([0.9, 0.1], [1.0, 0.0]) == 1.0
        assert_close(average_precision([0.1, 0.9], [1.0, 0.0]), 0.5, 1e-12, "inverted")

    def test_tie_breaks_by_lower_index(self):
        # equal scores: index 0 ranked first, so the positive at index 1 sits at rank 2
        assert_close(average_precision([0.5, 0.5], [0.0, 1.0]), 0.5, 1e-12, "tie")

    def test_no_positives_undefined(self):
        with pytest.raises(MetricUndefinedError):
            average_precision([0.5], [0.0])

    def test_map_skips_empty_classes(self):
        scores = np.array([[0.9, 0.1], [0.2, 0.8]])
        labels = np.array([[1.0, 0.0], [0.0, 0.0]])
        assert mean_average_precision(scores, labels) == 1.0

    def test_map_all_empty_undefined(self):
        with pytest.raises(MetricUndefinedError):
            mean_average_precision(np.array([[0.9]]), np.array([[0.0]]))


# ---------------------------------------------------------------- training loop


TINY_SPEC = WorldSpec(t_frames=3, max_boxes=3, arena=24, channels=3,
                      n_objects_min=2, n_objects_max=3)


def tiny_dataset(n_pos, n_neg, seed):
    segments = [generate_segment(TINY_SPEC, True, seed * 100 + k) for k in range(n_pos)]
    segments += [generate_segment(TINY_SPEC, False, seed * 100 + 50 + k) for k in range(n_neg)]
    return segments


def tiny_params(seed=1):
    return StagParams.init(seed, d_in=3 * 49, d=8, d_k=4, num_classes=1)


class TestTrainingLoop:
    def test_rows_shape_and_determinism(self):
        segments = tiny_dataset(2, 2, 3)
        runs = []
        for _ in range(2):
            params = tiny_params()
            state = OptimState(lr=0.005)
            rows = train(params, segments, state, 2, seed=17, eval_segments=segments[:2])
            runs.append((rows, params.cls_w.value.data.copy()))
        rows, weights = runs[0]
        assert [r["split"] for r in rows] == ["train", "eval", "train", "eval"]
        assert rows[0]["lr"] == 0.005 and rows[2]["lr"] == 0.0025
        assert runs[0][0] == runs[1][0]
        assert np.array_equal(weights, runs[1][1])

    def test_loss_decreases_on_fixed_batch(self):
        segments = tiny_dataset(3, 3, 5)
        params = tiny_params(2)
        state = OptimState(lr=0.01)
        rows = train(params, segments, state, 4, seed=11, eval_segments=segments)
        eval_losses = [r["loss"] for r in rows if r["split"] == "eval"]
        assert eval_losses[-1] < eval_losses[0]

    def test_accumulation_window_changes_updates(self):
        segments = tiny_dataset(2, 2, 9)
        outs = []
        for accumulate in (1, 4):
            params = tiny_params(3)
            train(params, segments, OptimState(lr=0.01), 1, seed=5, accumulate=accumulate)
            outs.append(params.cls_w.value.data.copy())
        assert not np.array_equal(outs[0], outs[1])

    def test_node_only_path_runs(self):
        segments = tiny_dataset(1, 1, 13)
        params = tiny_params(4)
        rows = train(
            params, segments, OptimState(lr=0.005), 1,
            seed=2, node_only=True, variant=VariantConfig(temporal_aggregator="lstm"),
        )
        assert len(rows) == 1 and np.isfinite(rows[0]["loss"])

    def test_evaluate_with_zeroed_params(self):
        segments = tiny_dataset(1, 1, 21)
        params = tiny_params(5)
        for _, node in params.named_params():
            node.value.data[...] = 0.0
        stats = evaluate(params, segments)
        assert_close(stats["loss"], math.log(2.0), 1e-12, "chance loss")
        assert stats["accuracy"] == 0.5  # 0.5 scores threshold to positive

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_abort_names_segment_on_blowup(self):
        segments = tiny_dataset(1, 1, 33)
        params = tiny_params(6)
        params.cls_w.value.data[...] = 1e308
        with pytest.raises(NumericalAbortError):
            train(params, segments, OptimState(lr=0.01), 1, seed=1)


class TestMetricsCsv:
    def test_exact_bytes(self, tmp_path):
        rows = [
            {"epoch": 0, "split": "train", "loss": 0.6931471805599453,
             "accuracy": 0.5, "map": 1.0, "lr": 0.01},
        ]
        path = tmp_path / "metrics.csv"
        write_metrics_csv(path, rows)
        want = b"epoch,split,loss,accuracy,map,lr\r\n0,train,0.69314718056,0.5,1,0.01\r\n"
        assert path.read_bytes() == want
        assert tuple(METRICS_HEADER) == ("epoch", "split", "loss", "accuracy", "map", "lr")
