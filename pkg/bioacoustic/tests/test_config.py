import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from bioacoustic.config import (
    RunConfig,
    build_config,
    config_help,
    dump_config,
    env_overrides,
    flatten_config,
    iter_config_keys,
    load_run_config,
    parse_overrides,
    read_config_file,
    write_config,
)
from bioacoustic.exceptions import ConfigError


class DefaultsTests(SimpleTestCase):
    def test_defaults(self):
        config = RunConfig()
        self.assertEqual((config.features.window_frames, config.features.window_shift), (431, 86))
        self.assertEqual(config.postproc.merge_gap_frames, 87)
        self.assertEqual(config.postproc.nms_iou, 0.7)
        self.assertEqual(config.evaluate.min_iou, 0.3)
        self.assertEqual(config.model.dtype, 'float32')
        self.assertAlmostEqual(config.features.frame_rate, 22050 / 256)

    def test_every_key_is_listed_in_help(self):
        text = config_help()
        for key, _, _ in iter_config_keys():
            self.assertIn(f'  {key} = ', text)
        self.assertEqual(set(flatten_config(RunConfig())), {key for key, _, _ in iter_config_keys()})


class PrecedenceTests(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.path = Path(self._tmp.name) / 'run.cfg'
        self.path.write_text(
            '# thresholds\n'
            'postproc.nms_iou = 0.5\n'
            '\n'
            'train.n_episodes = 20   # short run\n'
            'postproc.mfl_frames = 9\n',
            encoding='utf-8',
        )

    def tearDown(self):
        self._tmp.cleanup()

    def test_file_over_defaults(self):
        config = load_run_config(self.path, environ={})
        self.assertEqual(config.postproc.nms_iou, 0.5)
        self.assertEqual(config.train.n_episodes, 20)
        self.assertEqual(config.postproc.merge_prob, 0.5)

    def test_env_over_file(self):
        config = load_run_config(self.path, environ={'FSBED_POSTPROC__NMS_IOU': '0.6'})
        self.assertEqual(config.postproc.nms_iou, 0.6)

    def test_overrides_over_env(self):
        config = load_run_config(self.path, {'postproc.nms_iou': '0.65', 'seed': 3},
                                 environ={'FSBED_POSTPROC__NMS_IOU': '0.6', 'FSBED_SEED': '1'})
        self.assertEqual(config.postproc.nms_iou, 0.65)
        self.assertEqual(config.seed, 3)

    def test_none_clears_an_optional_key(self):
        config = load_run_config(self.path, {'postproc.mfl_frames': 'none'}, environ={})
        self.assertIsNone(config.postproc.mfl_frames)

    def test_custom_prefix(self):
        config = load_run_config(environ={'BIO_TRAIN__LR': '0.01', 'FSBED_TRAIN__LR': '0.5'}, prefix='BIO_')
        self.assertEqual(config.train.lr, 0.01)

    def test_written_config_reloads(self):
        config = load_run_config(self.path, {'features.kind': 'pcen', 'evaluate.matching': 'optimal'}, environ={})
        out = Path(self._tmp.name) / 'saved.cfg'
        write_config(config, out)
        self.assertEqual(load_run_config(out, environ={}), config)
        self.assertIn('features.kind = pcen', dump_config(config))


class EnvTests(SimpleTestCase):
    def test_settings_variables_are_not_config_keys(self):
        environ = {
            'FSBED_CONFIG_FILE': '/tmp/x.cfg',
            'FSBED_DEBUG': '1',
            'FSBED_FEATURES__N_MELS': '64',
            'PATH': '/usr/bin',
        }
        self.assertEqual(env_overrides(environ), {'features.n_mels': '64'})


class ValidationTests(SimpleTestCase):
    def test_unknown_key(self):
        with self.assertRaisesMessage(ConfigError, 'postproc.nms_iuo'):
            build_config({'postproc.nms_iuo': '0.5'})

    def test_bad_value(self):
        with self.assertRaises(ConfigError):
            build_config({'features.n_mels': 'many'})
        with self.assertRaises(ConfigError):
            build_config({'features.kind': 'mfcc'})
        with self.assertRaises(ConfigError):
            build_config({'evaluate.min_iou': '0'})

    def test_even_median_kernel(self):
        with self.assertRaisesMessage(ConfigError, 'median_kernel'):
            build_config({'postproc.median_kernel': '4'})

    def test_section_used_as_scalar(self):
        with self.assertRaises(ConfigError):
            build_config({'postproc': '1'})

    def test_malformed_file_line(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'bad.cfg'
            path.write_text('seed = 1\npostproc.nms_iou 0.5\n', encoding='utf-8')
            with self.assertRaisesMessage(ConfigError, 'bad.cfg:2'):
                read_config_file(path)

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            read_config_file('/nonexistent/run.cfg')

    def test_set_needs_equals(self):
        self.assertEqual(parse_overrides(['seed=4', 'train.lr = 0.1']), {'seed': '4', 'train.lr': '0.1'})
        with self.assertRaises(ConfigError):
            parse_overrides(['seed'])
