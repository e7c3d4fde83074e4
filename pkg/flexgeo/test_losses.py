# input:  [unittest, math, numpy, torch, losses objective functions, numerics resize plans, geometry TokenGrid, schemas LossWeights, gradcheck_suite micro setup]
# output: [unit tests covering the flexible MAE equivalence, soft labels, soft-label contrastive loss with group averaging and incompatible-task skips, map compatibility and map losses, image-level losses, weighted totals with non-finite rejection, and the assembled objective]
# pos:    [flexgeo regression tests for the objective layer]
#
# ⚠️ When this file is updated:
#    1. Update these header comments
#    2. Update the INDEX.md of the folder this file belongs to

import math
import unittest
from pathlib import Path
import sys

import numpy as np
import torch

FLEXGEO_DIR = Path(__file__).resolve().parent
if str(FLEXGEO_DIR) not in sys.path:
    sys.path.insert(0, str(FLEXGEO_DIR))

from geometry import TokenGrid
from gradcheck_suite import build_micro_setup
from losses import (
    LOSS_TERMS,
    LossError,
    LossReport,
    fft_loss,
    flex_mae_loss,
    image_level_losses,
    implied_target_side,
    is_map_compatible,
    map_target_patches,
    map_task_loss,
    patch_contrastive_loss,
    select_dem_gsd,
    soft_contrastive,
    soft_labels,
    total_loss,
)
from numerics import DTYPE, NumericsError, build_resize_matrix, patchify
from posenc import cyclic_encoding
from sampler import make_rng
from schemas import LossWeights


def brute_force_contrastive(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    devices: list[int],
    temperature: float,
) -> float:
    count = embeddings.shape[0]
    unit = [embeddings[i] / embeddings[i].norm() for i in range(count)]
    total = 0.0
    for i in range(count):
        numerator = 0.0
        denominator = 0.0
        for k in range(count):
            if k == i:
                continue
            similarity = float(torch.dot(unit[i], unit[k]))
            denominator += math.exp(-similarity / temperature)
            if devices[k] == devices[i]:
                numerator += math.exp(-float(labels[i, k]) * similarity / temperature)
        total += -math.log(numerator / denominator)
    return total / count


class FlexibleMaeTests(unittest.TestCase):
    def setUp(self) -> None:
        self.generator = torch.Generator().manual_seed(21)

    def randn(self, *shape: int) -> torch.Tensor:
        return torch.randn(*shape, generator=self.generator, dtype=DTYPE)

    def test_resized_loss_matches_canonical_loss_for_100_triples(self) -> None:
        for p_src, p_dst in ((4, 6), (4, 8), (8, 16), (16, 32)):
            plan = build_resize_matrix(p_src, p_dst)
            for _ in range(100):
                x = self.randn(p_src * p_src)
                z = self.randn(1, 1, 6)
                v = self.randn(1, 6, p_src * p_src)
                canonical = (x - torch.einsum("bnd,cdp->bncp", z, v).reshape(-1)).pow(2).mean()
                target = (plan.B @ x).reshape(1, 1, 1, -1)

                resized, warnings = flex_mae_loss(z, v, plan, target, torch.tensor([True]))

                self.assertEqual(warnings, [])
                relative = abs(float(resized) - float(canonical)) / float(canonical)
                self.assertLessEqual(relative, 1e-6, msg=f"{p_src}->{p_dst}")

    def test_identity_plan_is_plain_masked_mse(self) -> None:
        plan = build_resize_matrix(4, 4)
        z, v = self.randn(2, 3, 5), self.randn(2, 5, 16)
        target = self.randn(2, 3, 2, 16)
        masked = torch.tensor([True, False, True])

        loss, _ = flex_mae_loss(z, v, plan, target, masked)
        expected = (target - torch.einsum("bnd,cdp->bncp", z, v))[:, masked].pow(2).mean()

        self.assertAlmostEqual(float(loss), float(expected), places=12)

    def test_perfect_prediction_has_zero_loss(self) -> None:
        plan = build_resize_matrix(4, 8)
        z, v = self.randn(1, 2, 5), self.randn(3, 5, 16)
        target = torch.einsum("bnd,cdp->bncp", z, v) @ plan.B.T

        loss, _ = flex_mae_loss(z, v, plan, target, torch.tensor([True, True]))

        self.assertLess(float(loss), 1e-20)

    def test_no_masked_patches_gives_zero_with_warning(self) -> None:
        plan = build_resize_matrix(4, 4)

        loss, warnings = flex_mae_loss(self.randn(1, 2, 5), self.randn(1, 5, 16), plan, self.randn(1, 2, 1, 16), torch.tensor([False, False]))

        self.assertEqual(float(loss), 0.0)
        self.assertEqual(warnings, ["MAE_NO_MASKED_PATCHES"])

    def test_shape_mismatch_is_rejected(self) -> None:
        plan = build_resize_matrix(4, 8)

        with self.assertRaises(LossError) as raised:
            flex_mae_loss(self.randn(1, 1, 5), self.randn(1, 5, 16), plan, self.randn(1, 1, 1, 16), torch.tensor([True]))

        self.assertEqual(raised.exception.code, "MAE_SHAPE_MISMATCH")


class SoftLabelTests(unittest.TestCase):
    def test_labels_are_symmetric_unit_interval_with_unit_diagonal(self) -> None:
        histograms = torch.rand(6, 5, generator=torch.Generator().manual_seed(2), dtype=DTYPE) + 0.01

        labels = soft_labels(histograms, group_id=1, task="wc")

        self.assertEqual(labels.size, 6)
        self.assertTrue(torch.allclose(labels.values, labels.values.T, atol=1e-15))
        self.assertTrue(bool(((labels.values >= 0) & (labels.values <= 1)).all()))
        self.assertTrue(torch.allclose(torch.diagonal(labels.values), torch.ones(6, dtype=DTYPE), atol=1e-12))

    def test_disjoint_histograms_have_zero_label(self) -> None:
        labels = soft_labels(torch.tensor([[1.0, 0.0], [0.0, 3.0]], dtype=DTYPE))

        self.assertEqual(float(labels.values[0, 1]), 0.0)

    def test_negative_histograms_are_rejected(self) -> None:
        with self.assertRaises(LossError) as raised:
            soft_labels(torch.tensor([[1.0, -0.5]]))

        self.assertEqual(raised.exception.code, "HISTOGRAM_NEGATIVE")


class SoftContrastiveTests(unittest.TestCase):
    def setUp(self) -> None:
        self.generator = torch.Generator().manual_seed(5)
        self.devices = [0, 0, 1, 1]

    def test_matches_brute_force_sum(self) -> None:
        embeddings = torch.randn(4, 3, generator=self.generator, dtype=DTYPE)
        labels = soft_labels(torch.rand(4, 3, generator=self.generator, dtype=DTYPE)).values

        for temperature in (1.0, 0.1):
            loss = soft_contrastive(embeddings, labels, torch.tensor(self.devices), temperature)
            expected = brute_force_contrastive(embeddings, labels, self.devices, temperature)
            self.assertAlmostEqual(float(loss), expected, delta=1e-9)

    def test_matching_pairs_against_orthogonal_negatives(self) -> None:
        embeddings = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]], dtype=DTYPE)
        labels = soft_labels(embeddings.clone()).values

        loss = soft_contrastive(embeddings, labels, torch.tensor(self.devices), 1.0)
        expected = -math.log(math.exp(-1.0) / (math.exp(-1.0) + 2.0))

        self.assertAlmostEqual(float(loss), expected, places=12)

    def test_identical_items_give_log_of_candidates_over_positives(self) -> None:
        embeddings = torch.ones(4, 3, dtype=DTYPE)
        labels = torch.ones(4, 4, dtype=DTYPE)

        for temperature in (1.0, 0.25):
            loss = soft_contrastive(embeddings, labels, torch.tensor(self.devices), temperature)
            self.assertAlmostEqual(float(loss), math.log(3.0), places=12)

    def test_loss_ignores_embedding_scale(self) -> None:
        embeddings = torch.randn(4, 3, generator=self.generator, dtype=DTYPE)
        labels = torch.rand(4, 4, generator=self.generator, dtype=DTYPE)
        labels = (labels + labels.T) / 2

        base = soft_contrastive(embeddings, labels, torch.tensor(self.devices), 0.5)
        scaled = soft_contrastive(2.5 * embeddings, labels, torch.tensor(self.devices), 0.5)

        self.assertAlmostEqual(float(base), float(scaled), places=12)

    def test_anchor_without_positive_is_rejected(self) -> None:
        with self.assertRaises(LossError) as raised:
            soft_contrastive(torch.ones(3, 2, dtype=DTYPE), torch.ones(3, 3, dtype=DTYPE), torch.tensor([0, 0, 1]), 1.0)

        self.assertEqual(raised.exception.code, "CONTRASTIVE_NO_POSITIVES")

    def test_patch_loss_needs_two_partitions_and_two_devices(self) -> None:
        grid = TokenGrid(group_id=1, patch_px=4, rows=2, cols=2, gsd_m=10.0)
        tokens = {1: (torch.randn(2, 4, 6, generator=self.generator, dtype=DTYPE), torch.arange(4))}
        maps = {"map/wc@10": torch.zeros(2, 8, 8, dtype=torch.long)}

        with self.assertRaises(LossError) as partitions:
            patch_contrastive_loss(tokens, [grid], maps, 1, 0.1, torch.tensor([0, 1]), make_rng(0))
        with self.assertRaises(LossError) as devices:
            patch_contrastive_loss(tokens, [grid], maps, 2, 0.1, torch.tensor([0, 0]), make_rng(0))

        self.assertEqual(partitions.exception.code, "CONTRASTIVE_PARTITIONS_INVALID")
        self.assertEqual(devices.exception.code, "CONTRASTIVE_SINGLE_DEVICE")

    def test_patch_loss_warns_when_no_land_cover_map_applies(self) -> None:
        grid = TokenGrid(group_id=1, patch_px=4, rows=2, cols=2, gsd_m=10.0)
        tokens = {1: (torch.randn(2, 4, 6, generator=self.generator, dtype=DTYPE), torch.arange(4))}

        loss, warnings = patch_contrastive_loss(tokens, [grid], {}, 2, 0.1, torch.tensor([0, 1]), make_rng(0))

        self.assertEqual(float(loss), 0.0)
        self.assertIn("CONTRASTIVE_NO_VIABLE_TASKS", warnings)

    def random_tokens(self, count: int) -> tuple[torch.Tensor, torch.Tensor]:
        return torch.randn(2, count, 6, generator=self.generator, dtype=DTYPE), torch.arange(count)

    def test_patch_loss_is_finite_with_real_maps(self) -> None:
        grid = TokenGrid(group_id=1, patch_px=8, rows=2, cols=2, gsd_m=10.0)
        tokens = {1: self.random_tokens(4)}
        maps = {
            "map/wc@10": torch.randint(0, 11, (2, 16, 16), generator=self.generator),
            "map/scl@20": torch.randint(0, 12, (2, 8, 8), generator=self.generator),
        }

        loss, warnings = patch_contrastive_loss(tokens, [grid], maps, 2, 0.1, torch.tensor([0, 1]), make_rng(0))

        self.assertTrue(math.isfinite(float(loss)))
        self.assertEqual(warnings, [])

    def test_tasks_average_within_a_group_before_groups_average(self) -> None:
        s2 = TokenGrid(group_id=1, patch_px=8, rows=2, cols=2, gsd_m=10.0)
        olci = TokenGrid(group_id=6, patch_px=8, rows=2, cols=2, gsd_m=240.0)
        tokens = {1: self.random_tokens(4), 6: self.random_tokens(4)}
        wc = {"map/wc@10": torch.randint(0, 11, (2, 16, 16), generator=self.generator)}
        scl = {"map/scl@20": torch.randint(0, 12, (2, 8, 8), generator=self.generator)}
        gc = {"map/gc@300": torch.randint(0, 22, (2, 13, 13), generator=self.generator)}
        devices = torch.tensor([0, 1])

        def alone(grid: TokenGrid, maps: dict[str, torch.Tensor], rng: np.random.Generator) -> float:
            loss, warnings = patch_contrastive_loss({grid.group_id: tokens[grid.group_id]}, [grid], maps, 2, 0.1, devices, rng)
            self.assertEqual(warnings, [])
            return float(loss)

        wc_only = alone(s2, wc, make_rng(0))
        scl_only = alone(s2, scl, make_rng(0))
        s2_both = alone(s2, {**wc, **scl}, make_rng(0))
        # The OLCI group draws its partition after the Sentinel-2 group.
        olci_rng = make_rng(0)
        olci_rng.permutation(4)
        olci_only = alone(olci, gc, olci_rng)

        combined, warnings = patch_contrastive_loss(tokens, [s2, olci], {**wc, **scl, **gc}, 2, 0.1, devices, make_rng(0))

        self.assertEqual(warnings, [])
        self.assertAlmostEqual(s2_both, (wc_only + scl_only) / 2, places=12)
        self.assertAlmostEqual(float(combined), (s2_both + olci_only) / 2, places=12)

    def test_incompatible_target_sides_are_skipped(self) -> None:
        olci = TokenGrid(group_id=6, patch_px=4, rows=2, cols=2, gsd_m=240.0)
        coarse_s2 = TokenGrid(group_id=3, patch_px=16, rows=1, cols=1, gsd_m=60.0)
        tokens = {6: self.random_tokens(4), 3: self.random_tokens(2)}
        maps = {
            "map/gc@300": torch.randint(0, 22, (2, 7, 7), generator=self.generator),
            "map/wc@10": torch.randint(0, 11, (2, 96, 96), generator=self.generator),
            "map/scl@20": torch.randint(0, 12, (2, 48, 48), generator=self.generator),
        }

        loss, warnings = patch_contrastive_loss(tokens, [olci, coarse_s2], maps, 2, 0.1, torch.tensor([0, 1]), make_rng(0))

        self.assertEqual(float(loss), 0.0)
        self.assertIn("MAP_TASK_INCOMPATIBLE:gc@group6:side3", warnings)
        self.assertIn("MAP_TASK_INCOMPATIBLE:wc@group3:side96", warnings)
        self.assertIn("MAP_TASK_INCOMPATIBLE:scl@group3:side48", warnings)
        self.assertIn("CONTRASTIVE_NO_VIABLE_TASKS", warnings)

    def test_unknown_land_cover_class_is_rejected(self) -> None:
        grid = TokenGrid(group_id=1, patch_px=8, rows=2, cols=2, gsd_m=10.0)
        classes = torch.zeros(2, 16, 16, dtype=torch.long)
        classes[1, 3, 5] = 11

        with self.assertRaises(LossError) as raised:
            patch_contrastive_loss(
                {1: self.random_tokens(4)}, [grid], {"map/wc@10": classes}, 2, 0.1, torch.tensor([0, 1]), make_rng(0)
            )

        self.assertEqual(raised.exception.code, "MAP_CLASS_UNKNOWN")


class MapLossTests(unittest.TestCase):
    def test_target_side_compatibility_rule(self) -> None:
        coarse = TokenGrid(group_id=3, patch_px=16, rows=1, cols=1, gsd_m=60.0)
        fine = TokenGrid(group_id=1, patch_px=16, rows=1, cols=1, gsd_m=10.0)

        self.assertEqual(implied_target_side(coarse, 10.0), 96)
        self.assertFalse(is_map_compatible(coarse, 10.0))
        self.assertEqual(implied_target_side(fine, 10.0), 16)
        self.assertTrue(is_map_compatible(fine, 10.0))

    def test_dem_prefers_ten_meters_then_sixty(self) -> None:
        self.assertEqual(select_dem_gsd(TokenGrid(group_id=1, patch_px=16, rows=1, cols=1, gsd_m=10.0)), 10.0)
        self.assertEqual(select_dem_gsd(TokenGrid(group_id=1, patch_px=4, rows=1, cols=1, gsd_m=240.0)), 60.0)
        self.assertIsNone(select_dem_gsd(TokenGrid(group_id=1, patch_px=32, rows=1, cols=1, gsd_m=480.0)))

    def test_target_patches_match_the_map_on_an_aligned_grid(self) -> None:
        grid = TokenGrid(group_id=1, patch_px=4, rows=2, cols=2, gsd_m=10.0)
        target_map = torch.arange(64, dtype=DTYPE).reshape(1, 8, 8)

        values, valid = map_target_patches(target_map, 10.0, grid, 4)

        self.assertTrue(torch.equal(values, patchify(target_map.unsqueeze(1), 4)[:, :, 0]))
        self.assertTrue(bool(valid.all()))

    def test_target_patches_past_the_map_edge_are_invalid(self) -> None:
        grid = TokenGrid(group_id=1, patch_px=4, rows=3, cols=3, gsd_m=10.0)

        values, valid = map_target_patches(torch.ones(1, 2, 8, 8, dtype=DTYPE), 10.0, grid, 4)

        self.assertEqual(tuple(values.shape), (1, 9, 2, 16))
        self.assertEqual(int(valid.sum()), 64)
        self.assertFalse(bool(valid[8].any()))

    def test_smoothed_cross_entropy_closed_form(self) -> None:
        logits = torch.randn(1, 1, 11, 1, generator=torch.Generator().manual_seed(4), dtype=DTYPE)
        target = torch.tensor([[[3]]])

        loss = map_task_loss("wc", logits, target, torch.ones(1, 1, dtype=torch.bool))

        log_p = torch.log_softmax(logits[0, 0, :, 0], dim=0)
        weights = torch.full((11,), 0.1 / 11, dtype=DTYPE)
        weights[3] += 0.9
        self.assertAlmostEqual(float(loss), float(-(weights * log_p).sum()), places=12)

    def test_unknown_class_is_rejected(self) -> None:
        with self.assertRaises(LossError) as raised:
            map_task_loss("wc", torch.zeros(1, 1, 11, 1, dtype=DTYPE), torch.tensor([[[11]]]), torch.ones(1, 1, dtype=torch.bool))

        self.assertEqual(raised.exception.code, "MAP_CLASS_UNKNOWN")

    def test_dem_loss_averages_valid_pixels_and_channels(self) -> None:
        valid = torch.tensor([[True, True, False, False]])

        loss = map_task_loss("dem", torch.zeros(1, 1, 2, 4, dtype=DTYPE), torch.ones(1, 1, 2, 4, dtype=DTYPE), valid)

        self.assertEqual(float(loss), 1.0)

    def test_no_valid_pixels_gives_none(self) -> None:
        self.assertIsNone(
            map_task_loss("dem", torch.zeros(1, 1, 2, 4, dtype=DTYPE), torch.ones(1, 1, 2, 4, dtype=DTYPE), torch.zeros(1, 4, dtype=torch.bool))
        )


class ImageLevelLossTests(unittest.TestCase):
    def test_opposite_months_give_two(self) -> None:
        losses = image_level_losses(
            {"month": cyclic_encoding(torch.tensor([[0.0]], dtype=DTYPE), 12.0)},
            {"month": torch.tensor([6.0], dtype=DTYPE)},
        )

        self.assertAlmostEqual(float(losses["month"]), 2.0, places=12)

    def test_uniform_orbit_logits_give_log_two(self) -> None:
        losses = image_level_losses(
            {"orbit": torch.zeros(3, 2, dtype=DTYPE)},
            {"orbit": torch.tensor([0, 1, 1])},
        )

        self.assertAlmostEqual(float(losses["orbit"]), math.log(2.0), places=12)

    def test_exact_predictions_give_zero(self) -> None:
        lat = torch.tensor([45.0, -10.0], dtype=DTYPE)
        lon = torch.tensor([170.0, -60.0], dtype=DTYPE)
        coords = torch.cat((lat[:, None] / 90.0, cyclic_encoding(lon[:, None], 360.0)), dim=-1)
        era5 = torch.randn(2, 17, generator=torch.Generator().manual_seed(1), dtype=DTYPE)

        losses = image_level_losses(
            {"coords": coords, "era5": era5.clone(), "incidence": torch.tensor([[0.5], [0.25]], dtype=DTYPE)},
            {"lat": lat, "lon": lon, "era5": era5, "incidence": torch.tensor([45.0, 22.5], dtype=DTYPE)},
        )

        self.assertEqual(sorted(losses), ["coords", "era5", "incidence"])
        for value in losses.values():
            self.assertAlmostEqual(float(value), 0.0, places=15)

    def test_missing_targets_are_skipped(self) -> None:
        self.assertEqual(image_level_losses({"month": torch.zeros(1, 2, dtype=DTYPE)}, {}), {})

    def test_fft_loss_of_identical_mosaics_is_zero(self) -> None:
        mosaic = torch.randn(2, 3, 8, 8, generator=torch.Generator().manual_seed(6), dtype=DTYPE)

        self.assertEqual(float(fft_loss([mosaic], [mosaic.clone()])), 0.0)


class TotalLossTests(unittest.TestCase):
    def test_all_unit_terms_sum_to_the_weight_total(self) -> None:
        report = total_loss({term: 1.0 for term in LOSS_TERMS}, LossWeights())

        self.assertAlmostEqual(report.total_value, 2.56, places=12)
        self.assertEqual(report.absent, ())

    def test_zero_weights_give_zero(self) -> None:
        report = total_loss({term: 3.0 for term in LOSS_TERMS}, LossWeights().scaled(0.0))

        self.assertEqual(report.total_value, 0.0)

    def test_total_is_linear_in_the_weights(self) -> None:
        terms = {term: float(index + 1) for index, term in enumerate(LOSS_TERMS)}
        base = total_loss(terms, LossWeights()).total_value

        self.assertAlmostEqual(total_loss(terms, LossWeights().scaled(2.0)).total_value, 2.0 * base, places=12)

        doubled = LossWeights().model_copy(update={"reconstruction": 3.0})
        self.assertAlmostEqual(total_loss(terms, doubled).total_value - base, 1.5 * terms["reconstruction"], places=12)

    def test_missing_terms_are_reported_absent(self) -> None:
        report = total_loss({"reconstruction": torch.tensor(2.0, dtype=DTYPE)}, LossWeights(), step=4)

        self.assertAlmostEqual(report.total_value, 3.0, places=12)
        self.assertEqual(len(report.absent), len(LOSS_TERMS) - 1)
        row = report.csv_row()
        self.assertEqual(len(row), len(LossReport.csv_header()))
        self.assertEqual(row[0], "4")
        self.assertEqual(row[1], "2.0")
        self.assertEqual(row[2], "")

    def test_unknown_term_is_rejected(self) -> None:
        with self.assertRaises(LossError) as raised:
            total_loss({"style": 1.0}, LossWeights())

        self.assertEqual(raised.exception.code, "LOSS_TERM_UNKNOWN")

    def test_non_finite_total_is_rejected(self) -> None:
        terms = {"reconstruction": torch.tensor(float("nan"), dtype=DTYPE)}

        with self.assertRaises(NumericsError) as raised:
            total_loss(terms, LossWeights())

        self.assertEqual(raised.exception.code, "NON_FINITE_VALUES")


class PretextObjectiveTests(unittest.TestCase):
    def test_micro_batch_produces_a_finite_differentiable_total(self) -> None:
        setup = build_micro_setup(0)

        report = setup.objective(setup.sample, setup.plan, setup.mask, setup.device_labels, make_rng(0))
        report.total.backward()

        self.assertTrue(math.isfinite(report.total_value))
        for term in ("reconstruction", "fft", "contrastive", "map_wc", "map_dem", "era5", "month", "coords", "incidence", "orbit"):
            self.assertIn(term, report.terms)
        gradient = setup.objective.model.band_weights["1"].grad
        self.assertIsNotNone(gradient)
        self.assertTrue(bool(torch.isfinite(gradient).all()))

    def test_same_partition_seed_gives_same_total(self) -> None:
        setup = build_micro_setup(1)

        first = setup.objective(setup.sample, setup.plan, setup.mask, setup.device_labels, make_rng(3)).total_value
        second = setup.objective(setup.sample, setup.plan, setup.mask, setup.device_labels, make_rng(3)).total_value

        self.assertEqual(first, second)


if __name__ == "__main__":
    unittest.main()
