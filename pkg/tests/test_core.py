import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifactqc.core import (
    Architecture,
    ArtifactKind,
    DatasetManifest,
    Loss,
    ManifestEntry,
    ManifestError,
    MaskSample,
    Optimizer,
    PlateauConfig,
    RunConfig,
    Severity,
    SeveritySample,
    TileSample,
    load_config,
    validate_config,
)


def reference_config():
    return RunConfig(
        seed=0,
        batch_size=8,
        epochs=200,
        learning_rate=1e-4,
        optimizer=Optimizer.RMSPROP,
        loss=Loss.DICE_COEF_LOSS,
        plateau=PlateauConfig(0.1, 4),
        early_stop_patience=10,
    )


class TestValidateConfig:
    def test_reference_config_is_valid(self):
        assert validate_config(reference_config()) == []

    def test_zero_learning_rate(self):
        problems = validate_config(reference_config().replace(learning_rate=0.0))
        assert len(problems) == 1 and problems[0].startswith("learning_rate")

    def test_plateau_factor_above_one(self):
        problems = validate_config(reference_config().replace(plateau=PlateauConfig(1.5, 4)))
        assert len(problems) == 1 and "plateau.factor" in problems[0]

    def test_several_violations_reported_separately(self):
        bad = reference_config().replace(width_scale=0.0, early_stop_patience=0, plateau=PlateauConfig(0.5, 0))
        fields = sorted(p.split(":")[0] for p in validate_config(bad))
        assert fields == ["early_stop_patience", "plateau.patience", "width_scale"]

    def test_bad_enum_value(self):
        problems = validate_config(reference_config().replace(optimizer="nadam"))
        assert len(problems) == 1 and problems[0].startswith("optimizer")

    @settings(max_examples=300, deadline=None)
    @given(
        lr=st.floats(-1e-3, 1e-2, allow_nan=False),
        factor=st.floats(-0.5, 1.5, allow_nan=False),
        patience=st.integers(-2, 12),
        stop=st.integers(-2, 12),
        width=st.floats(-0.5, 1.5, allow_nan=False),
        batch=st.integers(0, 16),
    )
    def test_empty_exactly_when_invariants_hold(self, lr, factor, patience, stop, width, batch):
        cfg = reference_config().replace(
            learning_rate=lr, plateau=PlateauConfig(factor, patience), early_stop_patience=stop, width_scale=width, batch_size=batch
        )
        holds = lr > 0 and 0 < factor < 1 and patience >= 1 and stop >= 1 and 0 < width <= 1 and batch >= 1
        assert (validate_config(cfg) == []) == holds


config_strategy = st.builds(
    RunConfig,
    seed=st.integers(0, 2**31),
    batch_size=st.integers(1, 64),
    epochs=st.integers(1, 500),
    learning_rate=st.floats(1e-9, 1.0),
    optimizer=st.sampled_from(Optimizer),
    loss=st.sampled_from(Loss),
    plateau=st.builds(PlateauConfig, st.floats(0.01, 0.99), st.integers(1, 20)),
    early_stop_patience=st.integers(1, 50),
    model=st.sampled_from(Architecture),
    width_scale=st.floats(0.01, 1.0),
)


@settings(max_examples=100, deadline=None)
@given(config_strategy)
def test_config_round_trip(cfg):
    assert RunConfig.from_text(cfg.to_text()) == cfg


def test_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# desk run\nlearning_rate=0.001\nplateau=0.5,10\nmodel=resunet_pp\n")
    cfg = load_config(path)
    assert cfg.learning_rate == 1e-3 and cfg.plateau == PlateauConfig(0.5, 10) and cfg.model is Architecture.RESUNET_PP
    assert cfg.batch_size == 8


def test_config_unknown_key():
    with pytest.raises(ManifestError, match="line 2"):
        RunConfig.from_text("seed=1\nlr=0.1\n")


entry_strategy = st.builds(
    ManifestEntry,
    tile_id=st.text("abcdefghij0123456789_", min_size=1, max_size=12),
    image_path=st.text("abcdef/._", min_size=1, max_size=16).filter(lambda s: s != "-"),
    mask_path=st.one_of(st.none(), st.text("abcdef/.", min_size=2, max_size=10)),
    severity=st.one_of(st.none(), st.sampled_from(Severity)),
    artifact_kind=st.one_of(st.none(), st.sampled_from(ArtifactKind)),
)


@settings(max_examples=100, deadline=None)
@given(st.lists(entry_strategy, max_size=8, unique_by=lambda e: e.tile_id))
def test_manifest_round_trip(entries):
    manifest = DatasetManifest(tuple(entries), "root")
    assert DatasetManifest.from_text(manifest.to_text(), "root") == manifest


class TestManifestText:
    def test_counts(self):
        text = "".join(f"t{i}\timages/t{i}.png\tmasks/t{i}.png\t-\ttissue_fold\n" for i in range(600))
        manifest = DatasetManifest.from_text(text)
        assert len(manifest) == 600
        assert manifest.kind_counts == {"tissue_fold": 600}

    def test_empty(self):
        assert len(DatasetManifest.from_text("")) == 0

    def test_short_line_cites_line_number(self):
        text = "a\tx.png\t-\t-\t-\nb\ty.png\t-\n"
        with pytest.raises(ManifestError) as err:
            DatasetManifest.from_text(text)
        assert err.value.line == 2

    def test_duplicate_id(self):
        with pytest.raises(ManifestError, match="duplicate"):
            DatasetManifest.from_text("a\tx.png\t-\t-\t-\na\ty.png\t-\t-\t-\n")

    def test_bad_severity(self):
        with pytest.raises(ManifestError, match="line 1"):
            DatasetManifest.from_text("a\tx.png\t-\tsevere\t-\n")


class TestSamples:
    def test_tile_range_checked(self):
        with pytest.raises(ValueError):
            TileSample("t", np.full((2, 2, 3), 1.5))

    def test_tile_is_immutable(self):
        tile = TileSample("t", np.zeros((2, 2, 3)))
        with pytest.raises(ValueError):
            tile.image[0, 0, 0] = 1.0

    def test_mask_binary(self):
        with pytest.raises(ValueError, match="binary"):
            MaskSample("t", np.array([[0, 2]]), ArtifactKind.AIR_BUBBLE)

    def test_mask_against_tile(self):
        tile = TileSample("t", np.zeros((2, 3, 3)))
        MaskSample("t", np.zeros((2, 3)), "tissue_fold").check_against(tile)
        with pytest.raises(ValueError):
            MaskSample("t", np.zeros((3, 3)), "tissue_fold").check_against(tile)

    def test_severity_label(self):
        assert SeveritySample("t", "mid").label is Severity.MID
        with pytest.raises(ValueError):
            SeveritySample("t", "extreme")
