# input:  [unittest, torch, numerics resize plans, patch helpers, Fourier distance, grad wrapper, finite-difference checker]
# output: [unit tests covering bilinear resize matrices, PI-resize token preservation, transposed decoder resizing, patchify layouts, DFT L1 distance with non-finite rejection, and gradient checks]
# pos:    [flexgeo regression tests for the numerical kernel layer]
#
# ⚠️ When this file is updated:
#    1. Update these header comments
#    2. Update the INDEX.md of the folder this file belongs to

import math
import unittest
from pathlib import Path
import sys

import torch

FLEXGEO_DIR = Path(__file__).resolve().parent
if str(FLEXGEO_DIR) not in sys.path:
    sys.path.insert(0, str(FLEXGEO_DIR))

from numerics import (
    DTYPE,
    NumericsError,
    ResizePlan,
    build_resize_matrix,
    dft2_l1,
    finite_difference_check,
    grad,
    patchify,
    pi_resize_embed_weights,
    resize_decoder_weights,
    unpatchify,
)

UPSAMPLING_PAIRS = ((4, 6), (4, 8), (8, 16), (16, 32))


def bilinear_resize(x: torch.Tensor, plan: ResizePlan) -> torch.Tensor:
    return x @ plan.B.T


def reference_bilinear(patch: torch.Tensor, p_dst: int) -> torch.Tensor:
    p_src = patch.shape[0]
    scale = p_src / p_dst

    def coordinate(index: int) -> tuple[int, int, float]:
        coord = min(max((index + 0.5) * scale - 0.5, 0.0), p_src - 1.0)
        lower = int(math.floor(coord))
        return lower, min(lower + 1, p_src - 1), coord - lower

    out = torch.zeros((p_dst, p_dst), dtype=DTYPE)
    for row in range(p_dst):
        r0, r1, fr = coordinate(row)
        for col in range(p_dst):
            c0, c1, fc = coordinate(col)
            out[row, col] = (
                (1 - fr) * (1 - fc) * patch[r0, c0]
                + (1 - fr) * fc * patch[r0, c1]
                + fr * (1 - fc) * patch[r1, c0]
                + fr * fc * patch[r1, c1]
            )
    return out


class ResizeMatrixTests(unittest.TestCase):
    def setUp(self) -> None:
        self.generator = torch.Generator().manual_seed(7)

    def randn(self, *shape: int) -> torch.Tensor:
        return torch.randn(*shape, generator=self.generator, dtype=DTYPE)

    def test_same_size_plan_is_identity(self) -> None:
        plan = build_resize_matrix(3, 3)

        self.assertTrue(plan.is_identity)
        self.assertTrue(torch.equal(plan.B, torch.eye(9, dtype=DTYPE)))

    def test_single_pixel_upsampling_replicates_value(self) -> None:
        plan = build_resize_matrix(1, 2)

        self.assertTrue(torch.equal(plan.B, torch.ones((4, 1), dtype=DTYPE)))

    def test_matrix_matches_scalar_bilinear_resize(self) -> None:
        for p_src, p_dst in ((2, 4), (4, 6), (6, 4), (5, 3)):
            patch = self.randn(p_src, p_src)
            expected = reference_bilinear(patch, p_dst).reshape(-1)

            resized = build_resize_matrix(p_src, p_dst).B @ patch.reshape(-1)

            self.assertTrue(torch.allclose(resized, expected, atol=1e-12), msg=f"{p_src}->{p_dst}")

    def test_rows_sum_to_one_so_constants_survive(self) -> None:
        pairs = [(src, dst) for src in range(1, 9) for dst in range(1, 9)] + [(16, 32), (32, 16)]
        for p_src, p_dst in pairs:
            plan = build_resize_matrix(p_src, p_dst)
            sums = plan.B.sum(dim=1)
            self.assertTrue(torch.allclose(sums, torch.ones_like(sums), atol=1e-12), msg=f"{p_src}->{p_dst}")

    def test_pseudo_inverse_recovers_source_when_upsampling(self) -> None:
        for p_src, p_dst in UPSAMPLING_PAIRS:
            plan = build_resize_matrix(p_src, p_dst)
            recovered = plan.B_pinv @ plan.B
            self.assertTrue(
                torch.allclose(recovered, torch.eye(p_src * p_src, dtype=DTYPE), atol=1e-10),
                msg=f"{p_src}->{p_dst}",
            )

    def test_downsampling_plan_has_expected_shape(self) -> None:
        plan = build_resize_matrix(4, 2)

        self.assertEqual(tuple(plan.B.shape), (4, 16))
        self.assertEqual(tuple(plan.B_pinv.shape), (16, 4))
        self.assertFalse(plan.is_upsampling)

    def test_non_positive_sizes_are_rejected(self) -> None:
        with self.assertRaises(NumericsError) as raised:
            build_resize_matrix(0, 4)

        self.assertEqual(raised.exception.code, "RESIZE_SIZE_INVALID")


class WeightResizeTests(unittest.TestCase):
    def setUp(self) -> None:
        self.generator = torch.Generator().manual_seed(11)

    def randn(self, *shape: int) -> torch.Tensor:
        return torch.randn(*shape, generator=self.generator, dtype=DTYPE)

    def test_pi_resize_preserves_tokens_for_100_random_pairs(self) -> None:
        for p_src, p_dst in ((2, 4),) + UPSAMPLING_PAIRS:
            plan = build_resize_matrix(p_src, p_dst)
            for _ in range(100):
                w = self.randn(p_src * p_src)
                x = self.randn(p_src * p_src)
                token = torch.dot(x, w)
                resized = torch.dot(bilinear_resize(x, plan), pi_resize_embed_weights(w, plan))
                self.assertLessEqual(abs(float(resized - token)), 1e-9, msg=f"{p_src}->{p_dst}")

    def test_identity_plans_return_weights_unchanged(self) -> None:
        plan = build_resize_matrix(4, 4)
        w = self.randn(3, 5, 16)

        self.assertTrue(torch.equal(pi_resize_embed_weights(w, plan), w))
        self.assertTrue(torch.equal(resize_decoder_weights(w, plan), w))

    def test_decoder_resize_replicates_single_pixel_weights(self) -> None:
        plan = build_resize_matrix(1, 2)
        v = self.randn(3, 1)

        resized = resize_decoder_weights(v, plan)

        self.assertTrue(torch.equal(resized, v.expand(3, 4)))

    def test_decoder_resize_equals_resizing_the_prediction(self) -> None:
        plan = build_resize_matrix(4, 6)
        v = self.randn(2, 5, 16)
        z = self.randn(5)

        direct = torch.einsum("d,cdp->cp", z, resize_decoder_weights(v, plan))
        resized = bilinear_resize(torch.einsum("d,cdp->cp", z, v), plan)

        self.assertTrue(torch.allclose(direct, resized, atol=1e-12))

    def test_wrong_trailing_width_is_rejected(self) -> None:
        plan = build_resize_matrix(4, 8)

        with self.assertRaises(NumericsError) as raised:
            pi_resize_embed_weights(self.randn(3, 15), plan)

        self.assertEqual(raised.exception.code, "RESIZE_SHAPE_MISMATCH")


class PatchLayoutTests(unittest.TestCase):
    def test_patchify_then_unpatchify_restores_divisible_images(self) -> None:
        image = torch.arange(2 * 3 * 8 * 12, dtype=DTYPE).reshape(2, 3, 8, 12)

        patches = patchify(image, 4)

        self.assertEqual(tuple(patches.shape), (2, 6, 3, 16))
        self.assertTrue(torch.equal(unpatchify(patches, 2, 3, 4), image))

    def test_patchify_orders_patches_row_major(self) -> None:
        image = torch.arange(16, dtype=DTYPE).reshape(1, 4, 4)

        patches = patchify(image, 2)

        self.assertEqual(patches[1, 0].tolist(), [2.0, 3.0, 6.0, 7.0])
        self.assertEqual(patches[2, 0].tolist(), [8.0, 9.0, 12.0, 13.0])

    def test_patchify_zero_pads_partial_patches(self) -> None:
        image = torch.ones((1, 5, 5), dtype=DTYPE)

        patches = patchify(image, 4)

        self.assertEqual(tuple(patches.shape), (4, 1, 16))
        self.assertEqual(float(patches[3, 0].sum()), 1.0)

    def test_unpatchify_rejects_wrong_patch_count(self) -> None:
        with self.assertRaises(NumericsError):
            unpatchify(torch.zeros((5, 1, 4), dtype=DTYPE), 2, 2, 2)


class FourierDistanceTests(unittest.TestCase):
    def setUp(self) -> None:
        self.generator = torch.Generator().manual_seed(3)

    def test_identical_fields_have_zero_distance(self) -> None:
        field = torch.randn(4, 4, 2, generator=self.generator, dtype=DTYPE)

        self.assertEqual(float(dft2_l1(field, field.clone())), 0.0)

    def test_constant_fields_differ_by_their_value_gap(self) -> None:
        pred = torch.full((2, 2, 1), 3.0, dtype=DTYPE)
        target = torch.full((2, 2, 1), 1.25, dtype=DTYPE)

        self.assertAlmostEqual(float(dft2_l1(pred, target)), 1.75, places=12)

    def test_distance_is_symmetric(self) -> None:
        pred = torch.randn(4, 4, 3, generator=self.generator, dtype=DTYPE)
        target = torch.randn(4, 4, 3, generator=self.generator, dtype=DTYPE)

        self.assertAlmostEqual(float(dft2_l1(pred, target)), float(dft2_l1(target, pred)), places=12)

    def test_matches_a_naive_transform(self) -> None:
        pred = torch.randn(4, 4, 2, generator=self.generator, dtype=DTYPE)
        target = torch.randn(4, 4, 2, generator=self.generator, dtype=DTYPE)

        def spectrum(field: torch.Tensor) -> list[float]:
            values = []
            for u in range(4):
                for v in range(4):
                    for channel in range(2):
                        total = complex(0.0, 0.0)
                        for x in range(4):
                            for y in range(4):
                                angle = -2.0 * math.pi * (u * x + v * y) / 4
                                total += float(field[x, y, channel]) * complex(math.cos(angle), math.sin(angle))
                        values.append(abs(total))
            return values

        naive = sum(abs(a - b) for a, b in zip(spectrum(pred), spectrum(target))) / 32

        self.assertAlmostEqual(float(dft2_l1(pred, target)), naive, delta=1e-9)

    def test_shape_mismatch_is_rejected(self) -> None:
        with self.assertRaises(NumericsError) as raised:
            dft2_l1(torch.zeros((2, 2, 1), dtype=DTYPE), torch.zeros((2, 3, 1), dtype=DTYPE))

        self.assertEqual(raised.exception.code, "DFT_SHAPE_MISMATCH")

    def test_non_finite_fields_are_rejected(self) -> None:
        pred = torch.zeros((2, 2, 1), dtype=DTYPE)
        pred[0, 0, 0] = float("inf")

        with self.assertRaises(NumericsError) as raised:
            dft2_l1(pred, torch.zeros((2, 2, 1), dtype=DTYPE))

        self.assertEqual(raised.exception.code, "NON_FINITE_VALUES")


class GradientTests(unittest.TestCase):
    def test_grad_of_sum_of_squares(self) -> None:
        (partial,) = grad(lambda x: (x * x).sum(), torch.tensor([1.0, 2.0], dtype=DTYPE))

        self.assertEqual(partial.tolist(), [2.0, 4.0])

    def test_grad_of_softmax_entry(self) -> None:
        (partial,) = grad(lambda x: torch.softmax(x, dim=0)[0], torch.zeros(2, dtype=DTYPE))

        self.assertTrue(torch.allclose(partial, torch.tensor([0.25, -0.25], dtype=DTYPE), atol=1e-15))

    def test_grad_rejects_non_scalar_outputs(self) -> None:
        with self.assertRaises(NumericsError) as raised:
            grad(lambda x: x * 2.0, torch.ones(3, dtype=DTYPE))

        self.assertEqual(raised.exception.code, "GRAD_NON_SCALAR_OUTPUT")

    def test_grad_returns_zeros_for_unused_inputs(self) -> None:
        partials = grad(lambda x, y: x.sum(), torch.ones(2, dtype=DTYPE), torch.ones(3, dtype=DTYPE))

        self.assertEqual(partials[1].tolist(), [0.0, 0.0, 0.0])

    def test_finite_difference_check_passes_smooth_functions(self) -> None:
        point = torch.tensor([0.3, -1.2, 0.7], dtype=DTYPE)

        result = finite_difference_check("smooth", lambda x: torch.sin(x).sum() + (x**3).sum(), point)

        self.assertTrue(result.passed)
        self.assertEqual(result.checked, 3)

    def test_finite_difference_check_flags_wrong_gradients(self) -> None:
        class Doubled(torch.autograd.Function):
            @staticmethod
            def forward(ctx, value: torch.Tensor) -> torch.Tensor:
                return value.clone()

            @staticmethod
            def backward(ctx, grad_output: torch.Tensor) -> torch.Tensor:
                return grad_output * 2.0

        point = torch.tensor([0.5, 1.5], dtype=DTYPE)

        result = finite_difference_check("doubled", lambda x: (Doubled.apply(x) ** 2).sum(), point)

        self.assertFalse(result.passed)
        self.assertGreater(result.max_error_ratio, 1.0)

    def test_finite_difference_check_requires_float64(self) -> None:
        with self.assertRaises(NumericsError) as raised:
            finite_difference_check("float32", lambda x: x.sum(), torch.ones(2))

        self.assertEqual(raised.exception.code, "GRADCHECK_DTYPE")


if __name__ == "__main__":
    unittest.main()
