import os

import pytest
from pydantic import ValidationError

from spseg.errors import ConfigError
from spseg.manifest import PipelineConfig, RunManifest, load_pipeline_config, parse_pipeline_config
from spseg.partition import PartitionParams
from spseg.trainkit import TrainConfig


class TestPipelineConfig:
    """Flat config files with defaults and overrides."""

    def test_missing_path_gives_defaults(self):
        config = load_pipeline_config()
        assert config == PipelineConfig()
        assert (config.tau, config.interval_m, config.lr) == (0.9, 40, 0.01)
        assert (config.lambda1, config.lambda2) == (1.0, 1.0)

    def test_file_values(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# short run\nEPOCHS=12\ntau=0.8\nuse_dropout=false\nmax_extent=0.5\n")
        config = load_pipeline_config(path)
        assert config.epochs == 12
        assert config.tau == 0.8
        assert config.use_dropout is False
        assert config.max_extent == 0.5

    def test_empty_value_keeps_default(self):
        config = parse_pipeline_config({'epochs': '', 'max_extent': 'none'})
        assert config.epochs == 400
        assert config.max_extent is None

    def test_overrides_win(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed=3\nrate=0.01\n")
        config = load_pipeline_config(path, {'seed': 9})
        assert (config.seed, config.rate) == (9, 0.01)

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochz=3\n")
        with pytest.raises(ConfigError, match="epochz"):
            load_pipeline_config(path)

    def test_bad_value_names_the_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("tau=1.5\n")
        with pytest.raises(ConfigError, match="run.cfg: tau"):
            load_pipeline_config(path)

    def test_bad_override(self):
        with pytest.raises(ConfigError):
            load_pipeline_config(None, {'seed': -1})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_pipeline_config(tmp_path / "absent.cfg")

    def test_train_config_carries_training_fields(self):
        config = PipelineConfig(epochs=7, lambda1=0.5, use_attention=False, seed=4)
        train = config.train_config(log_every=0)
        assert (train.epochs, train.lambda1, train.use_attention, train.seed, train.log_every) == (7, 0.5, False, 4, 0)

    def test_partition_params(self):
        params = PipelineConfig(voxel_size=0.2, min_sp_size=3).partition_params()
        assert (params.voxel_size, params.min_sp_size, params.max_extent) == (0.2, 3, None)

    def test_defaults_follow_training_and_partition_models(self):
        config = PipelineConfig()
        for name, value in TrainConfig().model_dump().items():
            assert getattr(config, name) == value, name
        for name, value in PartitionParams().model_dump().items():
            assert getattr(config, name) == value, name

    def test_bounds_follow_training_and_partition_models(self):
        with pytest.raises(ValidationError):
            PipelineConfig(drop_fraction=1.5)
        with pytest.raises(ValidationError):
            PipelineConfig(min_sp_size=0)

    def test_log_every_from_file_beats_fallback(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("log_every=7\n")
        assert load_pipeline_config(path, {'seed': 2}).train_config(log_every=20).log_every == 7
        assert load_pipeline_config(None).train_config(log_every=20).log_every == 20

    def test_normal_k_reaches_partition(self):
        assert PipelineConfig(normal_k=6).partition_params().normal_k == 6


class TestRunManifest:

    def test_prepare_output_creates_directory(self, tmp_path):
        manifest = RunManifest(output_dir=str(tmp_path / "a" / "b"))
        assert os.path.isdir(manifest.prepare_output())
        assert manifest.output_path('x.csv') == os.path.join(str(tmp_path / "a" / "b"), 'x.csv')

    def test_output_dir_blocked_by_file(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(ConfigError):
            RunManifest(output_dir=str(blocker / "sub")).prepare_output()
