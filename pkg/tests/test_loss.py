"""Margin-softmax loss values and gradients."""

import numpy as np
import pytest

from graphpool import diffcore as dc
from graphpool.diffcore import Tape, constant, grad_check, parameter
from graphpool.errors import NumericError, ShapeError, UsageError
from graphpool.loss import AamHead, aam_loss, init_aam_head

rng = np.random.default_rng(42)


def reference_loss(e, rows, label, margin, scale):
    """Straight numpy restatement of the loss for cross-checking."""
    e = e / np.linalg.norm(e)
    units = rows / np.maximum(np.linalg.norm(rows, axis=1, keepdims=True), 1e-12)
    c = units @ e
    theta = np.arccos(np.clip(c[label], -1 + 1e-7, 1 - 1e-7))
    logits = scale * c
    logits[label] = scale * np.cos(theta + margin)
    m = logits.max()
    return float(m + np.log(np.exp(logits - m).sum()) - logits[label])


def head_from(rows, margin=0.2, scale=30.0):
    return AamHead(class_rows=parameter(np.asarray(rows, dtype=np.float64)),
                   margin=margin, scale=scale)


class TestLossValues:
    def test_matches_reference_on_random_inputs(self):
        for seed in range(10):
            r = np.random.default_rng(seed)
            e = r.normal(size=5)
            rows = r.normal(size=(4, 5))
            label = int(r.integers(0, 4))
            got = aam_loss(constant(e[None, :]), label, head_from(rows)).item()
            want = reference_loss(e, rows, label, 0.2, 30.0)
            np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_zero_margin_unit_scale_is_plain_softmax_ce(self):
        """With m=0, s=1 the loss is ordinary cross entropy over cosines."""
        e = rng.normal(size=6)
        rows = rng.normal(size=(5, 6))
        label = 2
        got = aam_loss(constant(e[None, :]), label,
                       head_from(rows, margin=0.0, scale=1.0)).item()
        eu = e / np.linalg.norm(e)
        c = (rows / np.linalg.norm(rows, axis=1, keepdims=True)) @ eu
        want = float(np.log(np.exp(c).sum()) - c[label])
        np.testing.assert_allclose(got, want, rtol=1e-10)

    def test_aligned_embedding_closed_form(self):
        """Embedding equal to its class row with orthogonal other rows:
        loss = log1p((C-1) exp(-s cos(m + arccos(1 - 1e-7))))."""
        rows = np.eye(3, 4)
        e = rows[0]
        got = aam_loss(constant(e[None, :]), 0, head_from(rows)).item()
        theta = np.arccos(1.0 - 1e-7)
        want = np.log1p(2 * np.exp(-30.0 * np.cos(theta + 0.2)))
        np.testing.assert_allclose(got, want, rtol=1e-9)
        assert got < 1e-11  # near-perfect alignment costs almost nothing

    def test_margin_increases_loss(self):
        """A larger margin makes the same prediction strictly costlier."""
        e = rng.normal(size=5)
        rows = rng.normal(size=(4, 5))
        losses = [aam_loss(constant(e[None, :]), 1,
                           head_from(rows, margin=m)).item()
                  for m in (0.0, 0.1, 0.2, 0.4)]
        assert losses == sorted(losses)
        assert losses[0] < losses[-1]

    def test_embedding_scale_invariance(self):
        """Positive rescaling of the embedding changes nothing."""
        e = rng.normal(size=5)
        rows = rng.normal(size=(3, 5))
        a = aam_loss(constant(e[None, :]), 0, head_from(rows)).item()
        b = aam_loss(constant(17.0 * e[None, :]), 0, head_from(rows)).item()
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_row_scale_invariance(self):
        e = rng.normal(size=5)
        rows = rng.normal(size=(3, 5))
        scaled = rows * np.array([[2.0], [0.5], [9.0]])
        a = aam_loss(constant(e[None, :]), 1, head_from(rows)).item()
        b = aam_loss(constant(e[None, :]), 1, head_from(scaled)).item()
        np.testing.assert_allclose(a, b, rtol=1e-12)


class TestLossErrors:
    def test_label_out_of_range(self):
        e = constant(rng.normal(size=(1, 4)))
        with pytest.raises(UsageError):
            aam_loss(e, 3, head_from(rng.normal(size=(3, 4))))
        with pytest.raises(UsageError):
            aam_loss(e, -1, head_from(rng.normal(size=(3, 4))))

    def test_zero_embedding_rejected(self):
        with pytest.raises(NumericError):
            aam_loss(constant(np.zeros((1, 4))), 0,
                     head_from(rng.normal(size=(3, 4))))

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            aam_loss(constant(rng.normal(size=(1, 5))), 0,
                     head_from(rng.normal(size=(3, 4))))

    def test_multi_row_embedding_rejected(self):
        with pytest.raises(ShapeError):
            aam_loss(constant(rng.normal(size=(2, 4))), 0,
                     head_from(rng.normal(size=(3, 4))))

    def test_head_validation(self):
        with pytest.raises(UsageError):
            init_aam_head(1, 8)
        with pytest.raises(UsageError):
            head_from(rng.normal(size=(3, 4)), margin=-0.1)
        with pytest.raises(UsageError):
            head_from(rng.normal(size=(3, 4)), scale=0.0)


class TestLossGradients:
    def test_finite_differences_generic_point(self):
        e = parameter(rng.normal(size=(1, 5)))
        head = head_from(rng.normal(size=(4, 5)))
        report = grad_check(lambda: aam_loss(e, 2, head), [e, head.class_rows])
        assert report.passed, report.worst

    def test_finite_differences_small_margin_scale(self):
        e = parameter(rng.normal(size=(1, 4)))
        head = head_from(rng.normal(size=(3, 4)), margin=0.05, scale=4.0)
        report = grad_check(lambda: aam_loss(e, 0, head), [e, head.class_rows])
        assert report.passed, report.worst

    def test_gradient_finite_at_clamp_boundary(self):
        """A fully aligned embedding saturates the clamp; the margin path
        contributes zero there and the gradient stays finite."""
        rows = np.eye(3, 4)
        e = parameter(rows[:1].copy())
        head = head_from(rows)
        with Tape() as tape:
            out = aam_loss(e, 0, head)
            tape.backward(out)
        assert np.isfinite(e.grad).all()
        assert np.isfinite(head.class_rows.grad).all()

    def test_gradient_drives_loss_down(self):
        """One small step against the gradient reduces the loss."""
        e = parameter(rng.normal(size=(1, 6)))
        head = head_from(rng.normal(size=(5, 6)))
        with Tape() as tape:
            before = aam_loss(e, 3, head)
            tape.backward(before)
        e.data -= 0.01 * e.grad
        head.class_rows.data -= 0.01 * head.class_rows.grad
        after = aam_loss(e, 3, head)
        assert after.item() < before.item()
