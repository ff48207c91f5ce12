import json

import numpy as np
import pytest
import torch
from PIL import Image

from homosynth.dataset import DatasetError, SampleIOError, generate_dataset
from homosynth.evaluation import (
    GT_COLOR,
    PRED_COLOR,
    EvalReport,
    OraclePredictor,
    PairListDataset,
    ZeroPredictor,
    compare_reports,
    crop_offsets,
    evaluate,
    reports_from_comparison,
    visualize_batch,
    visualize_pair,
)
from homosynth.model import CCNet, ModelConfig
from homosynth.render import IdentityRenderer, ProceduralRenderer, ProceduralSource
from homosynth.synthesis import SynthConfig, TrainingSample, make_sample
from homosynth.training import TrainConfig, build_optimizer, training_state
from homosynth.checkpoint import save_checkpoint

SYNTH = SynthConfig(patch_size=32, margin=16, max_perturbation=8)


@pytest.fixture(scope="module")
def samples():
    contents = ProceduralSource("scene", 4, 64, seed=1)
    templates = ProceduralSource("template", 4, 32, seed=2)
    return [make_sample(i, SYNTH, contents, templates, ProceduralRenderer()) for i in range(12)]


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    torch.manual_seed(0)
    model = CCNet(ModelConfig(base_channels=8, inner_iterations=1, search_radius=1, estimator_channels=8,
                              color_hidden=16), image_size=32)
    for est in model.estimators:
        torch.nn.init.normal_(est.fc.weight, std=0.05)
    cfg = TrainConfig(total_iterations=10)
    opt, sched = build_optimizer(model, cfg)
    return save_checkpoint(tmp_path_factory.mktemp("ckpt") / "m.pt", training_state(model, opt, sched, 0, cfg))


def write_png(path, image):
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


# -- reports -------------------------------------------------------------------

def test_oracle_predictor_scores_zero(samples):
    report = evaluate(OraclePredictor(samples), samples, dataset_id="train", batch_size=5)
    assert report.count == 12 and report.mean_mace == 0.0 and report.per_sample == [0.0] * 12


def test_zero_predictor_matches_per_sample_recomputation(samples):
    report = evaluate(ZeroPredictor(), samples, batch_size=5)
    expected = [np.mean(np.hypot(*np.asarray(s.gt_offsets, dtype=np.float64).T)) for s in samples]
    assert np.array_equal(report.per_sample, expected)
    assert report.mean_mace == pytest.approx(np.mean(expected), abs=1e-12)


def test_report_invariants():
    r = EvalReport.from_errors([1.0, 2.0, 6.0], "d")
    assert (r.count, r.mean_mace, r.median_mace) == (3, 3.0, 2.0)
    with pytest.raises(ValueError):
        EvalReport("d", 2, 1.0, 1.0, [1.0])
    with pytest.raises(ValueError):
        EvalReport("d", 2, 1.5, 1.0, [1.0, 1.0])
    with pytest.raises(ValueError):
        EvalReport.from_errors([1.0], "d", protocol="sideways")


def test_report_file_round_trip(tmp_path):
    r = EvalReport.from_errors([0.5, 0.25], "set", checkpoint_id="ck", protocol="cross")
    assert EvalReport.load(r.save(tmp_path / "r.json")) == r


def test_evaluation_is_pure(checkpoint, samples):
    a = evaluate(checkpoint, samples)
    b = evaluate(checkpoint, samples)
    assert a == b and a.checkpoint_id == str(checkpoint)
    assert a.mean_mace > 0


def test_evaluates_dataset_directory(checkpoint, tmp_path):
    contents = ProceduralSource("scene", 3, 64, seed=4)
    templates = ProceduralSource("template", 3, 32, seed=5)
    generate_dataset(tmp_path / "d", 5, SYNTH, contents, templates, IdentityRenderer())
    report = evaluate(checkpoint, tmp_path / "d", protocol="zero-shot")
    assert report.count == 5 and report.protocol == "zero-shot" and report.dataset_id == str(tmp_path / "d")


# -- comparison ----------------------------------------------------------------

def test_single_report_table():
    text, machine = compare_reports([EvalReport.from_errors([1.5], "maps", "ck")])
    assert machine["rows"] == ["ck [within]"] and machine["columns"] == ["maps"]
    assert len(machine["cells"]) == 1 and machine["cells"][0]["best"]
    assert text.splitlines()[1].split() == ["ck", "[within]", "1.5000*"]


def test_best_is_marked():
    first = EvalReport.from_errors([1.0], "maps", "a")
    second = EvalReport.from_errors([2.0], "maps", "b")
    text, machine = compare_reports([first, second])
    assert [c["best"] for c in machine["cells"]] == [True, False]
    assert "1.0000*" in text and "2.0000*" not in text


def test_comparison_round_trips():
    reports = [EvalReport.from_errors([1.0, 3.0], "maps", "a"),
               EvalReport.from_errors([0.5], "nir", "a", protocol="cross"),
               EvalReport.from_errors([2.0], "maps", "b")]
    _, machine = compare_reports(reports)
    assert reports_from_comparison(json.loads(json.dumps(machine))) == reports
    with pytest.raises(ValueError):
        compare_reports([])


# -- pair lists ------------------------------------------------------------------

def test_crop_offsets_for_a_scaling():
    # Full 48x48 frame scaled by 1.5 about the origin; corners c map to 1.5 c.
    corners = np.array([[0, 0], [48, 0], [48, 48], [0, 48]], dtype=np.float64)
    got = crop_offsets(0.5 * corners, 48, 48, 8, 8, 32)
    crop = np.array([[0, 0], [32, 0], [32, 32], [0, 32]], dtype=np.float64)
    assert np.allclose(got, 0.5 * crop + 4, atol=1e-9)


def test_crop_offsets_translation_unchanged():
    got = crop_offsets(np.tile([5.0, -3.0], (4, 1)), 64, 40, 10, 4, 32)
    assert np.allclose(got, np.tile([5.0, -3.0], (4, 1)), atol=1e-9)


def make_pair_list(tmp_path, rng, size, offsets, count=2, header=True):
    lines = ["src_path,tar_path,gt_json_path,tag"] if header else []
    for i in range(count):
        write_png(tmp_path / f"s{i}.png", rng.random((3, size, size)))
        write_png(tmp_path / f"t{i}.png", rng.random((3, size, size)))
        (tmp_path / f"g{i}.json").write_text(json.dumps({"offsets": offsets}))
        lines.append(f"s{i}.png,t{i}.png,g{i}.json,optical")
    (tmp_path / "pairs.csv").write_text("\n".join(lines) + "\n")
    return tmp_path / "pairs.csv"


def test_pair_list_center_crop(tmp_path, rng):
    path = make_pair_list(tmp_path, rng, 40, [[2, 1]] * 4)
    ds = PairListDataset(path, 32)
    assert len(ds) == 2 and ds.records[0].tags == ["optical"]
    s = ds[1]
    full = np.asarray(Image.open(tmp_path / "s1.png"), dtype=np.float64).transpose(2, 0, 1) / 255
    assert np.allclose(s.src_image, full[:, 4:36, 4:36], atol=1e-6)
    assert np.allclose(s.gt_offsets, [[2, 1]] * 4)


def test_pair_list_resize_scales_offsets(tmp_path, rng):
    path = make_pair_list(tmp_path, rng, 64, [[4, -2], [0, 6], [8, 8], [-2, 0]], header=False)
    s = PairListDataset(path, 32, resize=True)[0]
    assert s.src_image.shape == (3, 32, 32)
    assert np.allclose(s.gt_offsets, [[2, -1], [0, 3], [4, 4], [-1, 0]])


def test_pair_list_missing_file(tmp_path, rng):
    path = make_pair_list(tmp_path, rng, 32, [[0, 0]] * 4)
    (tmp_path / "t1.png").unlink()
    with pytest.raises(SampleIOError, match="row 1"):
        PairListDataset(path, 32)


def test_pair_list_too_small_without_resize(tmp_path, rng):
    path = make_pair_list(tmp_path, rng, 24, [[0, 0]] * 4)
    with pytest.raises(DatasetError):
        PairListDataset(path, 32)[0]


def test_bad_pair_reported_with_index(tmp_path, rng, checkpoint):
    path = make_pair_list(tmp_path, rng, 32, [[0, 0]] * 4, count=3)
    (tmp_path / "t2.png").write_bytes(b"not an image")
    with pytest.raises(DatasetError, match="pair 2"):
        evaluate(checkpoint, path)


# -- visualization ---------------------------------------------------------------

def colors(path):
    arr = np.asarray(Image.open(path).convert("RGB"))
    return (arr == GT_COLOR).all(-1), (arr == PRED_COLOR).all(-1), arr


def test_coinciding_quads(tmp_path):
    gt = np.array([[3, -2], [-4, 1], [2, 5], [0, -3]])
    img = np.zeros((3, 64, 64))
    _, red, _ = colors(visualize_pair(img, img, gt, gt, tmp_path / "same.png", margin=8))
    green_only, _, _ = colors(visualize_pair(img, img, gt, np.full((4, 2), 500), tmp_path / "gt.png", margin=8))
    green, _, _ = colors(tmp_path / "same.png")
    assert not green.any()
    assert np.array_equal(red, green_only) and red.sum() > 100


def test_translated_ground_truth(tmp_path):
    img = np.zeros((3, 64, 64))
    gt = np.tile([10, 0], (4, 1))
    green, red, arr = colors(visualize_pair(img, img, gt, np.zeros((4, 2)), tmp_path / "t.png", margin=16))
    assert arr.shape == (96, 96, 3)
    # Prediction: axis-aligned square with corners at 16 and 80 on the canvas.
    assert red[40, 16] and red[40, 80] and red[16, 20] and red[80, 20]
    # Ground truth: the same square moved 10 px to the right.
    assert green[40, 26] and green[40, 90] and green[16, 86] and green[80, 86]
    assert not green[40, 16] and not red[40, 90]
    cols = np.nonzero(red.any(0))[0]
    assert cols.min() >= 14 and cols.max() <= 82


def test_batch_visualization_names(checkpoint, samples, tmp_path):
    paths = visualize_batch(checkpoint, samples[:4], tmp_path / "viz", margin=4)
    assert [p.name for p in paths] == [f"pair_{i:06d}.png" for i in range(4)]
    assert sorted(p.name for p in (tmp_path / "viz").iterdir()) == [p.name for p in paths]
    assert len(visualize_batch(checkpoint, samples, tmp_path / "v2", limit=2)) == 2


def test_visualization_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(SampleIOError):
        visualize_pair(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)), np.zeros((4, 2)), np.zeros((4, 2)),
                       blocker / "out.png")


def test_in_memory_samples_are_accepted():
    s = TrainingSample(np.zeros((3, 32, 32), np.float32), np.zeros((3, 32, 32), np.float32),
                       np.array([[3, 4]] * 4), {})
    assert evaluate(ZeroPredictor(), [s]).mean_mace == 5.0
