# input:  [unittest, unittest.mock, tempfile, config INI loader/out-dir resolution/resolved writer, schemas presets and learning-rate scaling]
# output: [unit tests covering INI parsing with preset merging, validation failures, output-directory precedence, and resolved-config round trips]
# pos:    [flexgeo regression tests for the configuration bootstrap]
#
# ⚠️ When this file is updated:
#    1. Update these header comments
#    2. Update the INDEX.md of the folder this file belongs to

import os
import tempfile
import unittest
from pathlib import Path
from unittest import mock
import sys

FLEXGEO_DIR = Path(__file__).resolve().parent
if str(FLEXGEO_DIR) not in sys.path:
    sys.path.insert(0, str(FLEXGEO_DIR))

from config import OUT_DIR_VAR, ConfigError, load_run_config, resolve_out_dir, write_resolved_config
from schemas import MODEL_PRESETS, RunConfig, scaled_learning_rate


class ConfigLoadingTests(unittest.TestCase):
    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def write(self, text: str) -> Path:
        path = self.dir / "run.ini"
        path.write_text(text, encoding="utf-8")
        return path

    def test_defaults_without_a_file(self) -> None:
        cfg = load_run_config()

        self.assertEqual(cfg, RunConfig())
        self.assertEqual(cfg.budget.max_tokens, 1296)
        self.assertEqual(cfg.loss_weights.reconstruction, 1.5)

    def test_preset_is_merged_with_model_overrides(self) -> None:
        path = self.write(
            "[run]\nseed = 11\nmodel_preset = tiny\n\n"
            "[model]\nlayers = 2\n\n"
            "[train]\ngroup_ids = 1, 6\nsteps = 5\n"
        )

        cfg = load_run_config(path)

        self.assertEqual(cfg.seed, 11)
        self.assertEqual(cfg.model.layers, 2)
        self.assertEqual(cfg.model.embed_dim, MODEL_PRESETS["tiny"].model.embed_dim)
        self.assertEqual(cfg.train.group_ids, (1, 6))
        self.assertEqual(cfg.train.steps, 5)

    def test_single_group_id_parses_as_a_tuple(self) -> None:
        cfg = load_run_config(self.write("[train]\ngroup_ids = 4\n"))

        self.assertEqual(cfg.train.group_ids, (4,))

    def test_unknown_key_is_rejected(self) -> None:
        with self.assertRaises(ConfigError) as raised:
            load_run_config(self.write("[train]\nspeed = 3\n"))

        self.assertEqual(raised.exception.code, "CONFIG_INVALID")

    def test_invalid_value_is_rejected(self) -> None:
        with self.assertRaises(ConfigError) as raised:
            load_run_config(self.write("[budget]\nground_cover_min_m = 5000\nground_cover_max_m = 1000\n"))

        self.assertEqual(raised.exception.code, "CONFIG_INVALID")

    def test_unknown_section_is_rejected(self) -> None:
        with self.assertRaises(ConfigError) as raised:
            load_run_config(self.write("[database]\nurl = sqlite://\n"))

        self.assertEqual(raised.exception.code, "CONFIG_SECTION_UNKNOWN")

    def test_unknown_preset_is_rejected(self) -> None:
        with self.assertRaises(ConfigError) as raised:
            load_run_config(self.write("[run]\nmodel_preset = huge\n"))

        self.assertEqual(raised.exception.code, "CONFIG_PRESET_UNKNOWN")

    def test_missing_file_is_rejected(self) -> None:
        with self.assertRaises(ConfigError) as raised:
            load_run_config(self.dir / "absent.ini")

        self.assertEqual(raised.exception.code, "CONFIG_NOT_FOUND")

    def test_malformed_file_is_rejected(self) -> None:
        with self.assertRaises(ConfigError) as raised:
            load_run_config(self.write("seed = 1\n"))

        self.assertEqual(raised.exception.code, "CONFIG_SYNTAX_INVALID")

    def test_resolved_config_round_trips(self) -> None:
        cfg = load_run_config(self.write("[run]\nseed = 4\n\n[train]\nbase_lr = 0.0004\nbatch_size = 8\n"))

        written = write_resolved_config(cfg, self.dir / "out")

        self.assertEqual(written.name, "resolved_config.ini")
        self.assertEqual(load_run_config(written), cfg)


class OutDirTests(unittest.TestCase):
    def test_cli_flag_beats_environment_and_file(self) -> None:
        cfg = RunConfig(out_dir="from-file")
        with mock.patch.dict(os.environ, {OUT_DIR_VAR: "from-env"}):
            self.assertEqual(resolve_out_dir(cfg, "from-cli"), Path("from-cli"))
            self.assertEqual(resolve_out_dir(cfg), Path("from-env"))

    def test_file_value_is_the_fallback(self) -> None:
        cfg = RunConfig(out_dir="from-file")
        with mock.patch.dict(os.environ, {}, clear=False):
            os.environ.pop(OUT_DIR_VAR, None)
            self.assertEqual(resolve_out_dir(cfg), Path("from-file"))


class PresetTests(unittest.TestCase):
    def test_presets_cover_every_size(self) -> None:
        self.assertEqual(sorted(MODEL_PRESETS), ["base", "desk", "large", "small", "tiny"])
        self.assertEqual(MODEL_PRESETS["base"].model.embed_dim, 768)
        self.assertEqual(MODEL_PRESETS["large"].model.layers, 24)

    def test_learning_rate_scales_with_batch(self) -> None:
        self.assertAlmostEqual(scaled_learning_rate(4e-4, 512), 8e-4, places=15)
        self.assertAlmostEqual(scaled_learning_rate(3e-4, 64, num_devices=4), 3e-4, places=15)


if __name__ == "__main__":
    unittest.main()
