import csv
import json

import numpy as np
import pytest

from flow4d import io as bundle_io
from flow4d import synth
from flow4d.cli import main


@pytest.fixture(scope="module")
def small_sweep_config(tmp_path_factory):
    """Tiny corpus configuration: two SNR and two venc cases."""
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    config = {
        "sweep": {
            "geometry": {
                "kind": "poiseuille", "dims": [16, 16, 20],
                "spacing": [1.0, 1.0, 1.0], "n_frames": 3,
                "frame_interval_ms": 40.0, "radius_mm": 5.0,
                "v_peak": 70.0, "axis": 2,
            },
            "snr_list": [10.0, 5.0],
            "venc_fractions": [1.0, 0.5],
            "base_seed": 4242,
        },
    }
    path.write_text(json.dumps(config))
    return path


@pytest.fixture(scope="module")
def corpus(small_sweep_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--config", str(small_sweep_config),
                 "--out", str(out)]) == 0
    return out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestSynth:
    def test_case_count_and_manifest(self, corpus):
        rows = read_csv(corpus / "manifest.csv")
        assert len(rows) == 4
        for row in rows:
            assert (corpus / row["name"] / "bundle" / "header.txt").is_file()

    def test_default_config_writes_ten_cases(self, tmp_path):
        # no --config: built-in default sweep (5 SNR + 5 venc cases)
        out = tmp_path / "default"
        assert main(["synth", "--out", str(out), "--seed", "1"]) == 0
        rows = read_csv(out / "manifest.csv")
        assert len(rows) == 10

    def test_repeat_run_identical_hashes(self, small_sweep_config, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert main(["synth", "--config", str(small_sweep_config), "--out", str(a)]) == 0
        assert main(["synth", "--config", str(small_sweep_config), "--out", str(b)]) == 0
        hashes_a = [r["sha256"] for r in read_csv(a / "manifest.csv")]
        hashes_b = [r["sha256"] for r in read_csv(b / "manifest.csv")]
        assert hashes_a == hashes_b

    def test_invalid_snr_rejected(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({
            "sweep": {
                "geometry": {"kind": "poiseuille", "dims": [8, 8, 8],
                             "spacing": [1, 1, 1], "n_frames": 2},
                "snr_list": [-3.0],
            }}))
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1

    def test_config_snapshot_written(self, corpus):
        snapshot = json.loads((corpus / "resolved_config.json").read_text())
        assert snapshot["segmentation"]["k"] == 0.2
        assert snapshot["segmentation"]["r"] == 0.5
        assert snapshot["segmentation"]["window"] == 11
        assert snapshot["reconstruction"]["alpha"] == 0.01
        assert snapshot["reconstruction"]["tau"] == 2.0
        assert snapshot["reconstruction"]["eps"] == 1e-3


class TestSegmentCommand:
    def test_writes_masks_and_log(self, corpus, tmp_path):
        out = tmp_path / "seg"
        code = main(["segment", "--bundle", str(corpus / "snr10" / "bundle"),
                     "--out", str(out)])
        assert code == 0
        assert (out / "static_mask" / "labels.raw").is_file()
        assert (out / "phase_masks" / "labels.raw").is_file()
        log = read_csv(out / "segmentation_log.csv")
        assert len(log) >= 1
        assert "threshold_stat" in log[0]

    def test_missing_bundle_fails(self, tmp_path):
        assert main(["segment", "--bundle", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "o")]) == 1

    def test_parameter_override_rejected_when_invalid(self, corpus, tmp_path):
        assert main(["segment", "--bundle", str(corpus / "snr10" / "bundle"),
                     "--out", str(tmp_path / "o"), "--sauvola-k", "7.0"]) == 1

    def test_non_convergence_exits_zero_with_flag(self, corpus, tmp_path):
        out = tmp_path / "seg_nc"
        code = main(["segment", "--bundle", str(corpus / "snr5" / "bundle"),
                     "--out", str(out), "--max-iterations", "1"])
        assert code == 0
        log = read_csv(out / "segmentation_log.csv")
        assert all(row["converged"] == "0" for row in log)


class TestReconstructCommand:
    def test_writes_velocity_and_log(self, corpus, tmp_path):
        seg_out = tmp_path / "seg"
        assert main(["segment", "--bundle", str(corpus / "venc050" / "bundle"),
                     "--out", str(seg_out)]) == 0
        rec_out = tmp_path / "rec"
        code = main(["reconstruct", "--bundle", str(corpus / "venc050" / "bundle"),
                     "--mask", str(seg_out / "static_mask"),
                     "--out", str(rec_out)])
        assert code == 0
        assert (rec_out / "velocity" / "u.raw").is_file()
        log = read_csv(rec_out / "recon_log.csv")
        assert {"energy", "stop_ratio", "uod_flags", "n_modes"} <= set(log[0])

    def test_empty_mask_fails(self, corpus, tmp_path):
        bundle = bundle_io.load_bundle(corpus / "snr10" / "bundle")
        from flow4d.volume import MaskVolume

        empty = MaskVolume(labels=np.zeros(bundle.meta.spatial_dims, bool),
                           meta=bundle.meta)
        mask_dir = tmp_path / "empty_mask"
        bundle_io.save_mask(empty, mask_dir)
        assert main(["reconstruct", "--bundle", str(corpus / "snr10" / "bundle"),
                     "--mask", str(mask_dir), "--out", str(tmp_path / "o")]) == 1

    def test_corrupt_header_fails(self, corpus, tmp_path):
        import shutil

        broken = tmp_path / "broken_bundle"
        shutil.copytree(corpus / "snr10" / "bundle", broken)
        header = (broken / "header.txt").read_text()
        (broken / "header.txt").write_text(
            "\n".join(l for l in header.splitlines() if "venc" not in l))
        assert main(["reconstruct", "--bundle", str(broken),
                     "--mask", str(corpus / "snr10" / "truth_mask"),
                     "--out", str(tmp_path / "o")]) == 1


class TestEvaluateCommand:
    def test_identical_masks_all_ones(self, corpus, tmp_path):
        out = tmp_path / "eval"
        truth = corpus / "snr10" / "truth_mask"
        assert main(["evaluate", "--out", str(out), "--pred-mask", str(truth),
                     "--true-mask", str(truth)]) == 0
        row = read_csv(out / "overlap.csv")[0]
        for key in ("accuracy", "precision", "recall", "f1", "dice", "jaccard"):
            assert float(row[key]) == 1.0
        assert float(row["mean_surface_distance"]) == 0.0

    def test_velocity_metrics(self, corpus, tmp_path):
        out = tmp_path / "eval_vel"
        case = corpus / "snr10"
        assert main(["evaluate", "--out", str(out),
                     "--pred-velocity", str(case / "truth_velocity"),
                     "--true-velocity", str(case / "truth_velocity"),
                     "--eval-mask", str(case / "truth_mask")]) == 0
        row = read_csv(out / "velocity_metrics.csv")[0]
        assert float(row["rmse_cm_s"]) == 0.0

    def test_shape_mismatch_fails(self, corpus, tmp_path):
        other = synth.analytic_poiseuille((12, 12, 12), (1, 1, 1), radius=4,
                                          axis=2, v_peak=50.0, n_frames=2)
        mask_dir = tmp_path / "othermask"
        bundle_io.save_mask(other.lumen_mask, mask_dir)
        assert main(["evaluate", "--out", str(tmp_path / "o"),
                     "--pred-mask", str(mask_dir),
                     "--true-mask", str(corpus / "snr10" / "truth_mask")]) == 1

    def test_nothing_to_evaluate_fails(self, tmp_path):
        assert main(["evaluate", "--out", str(tmp_path / "o")]) == 1


@pytest.fixture(scope="module")
def pipeline_out(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe")
    code = main(["pipeline", "--corpus", str(corpus), "--out", str(out),
                 "--threads", "1"])
    assert code == 0
    return out


class TestPipelineCommand:
    def test_report_files(self, pipeline_out):
        report = pipeline_out / "report"
        seg_rows = read_csv(report / "segmentation_metrics.csv")
        vel_rows = read_csv(report / "velocity_metrics.csv")
        div_rows = read_csv(report / "divergence_metrics.csv")
        timing_rows = read_csv(report / "timings.csv")
        assert len(seg_rows) == 4
        assert len(vel_rows) == 8  # raw + reconstructed per case
        assert len(div_rows) == 4
        assert {r["stage"] for r in timing_rows} == {"segmentation", "reconstruction"}
        assert all(float(r["seconds"]) > 0 for r in timing_rows)

    def test_rows_keyed_by_case(self, pipeline_out):
        rows = read_csv(pipeline_out / "report" / "velocity_metrics.csv")
        names = {r["case"] for r in rows}
        assert names == {"snr10", "snr5", "venc100", "venc050"}
        for row in rows:
            assert row["snr"] != ""
            assert row["venc_fraction"] != ""

    def test_vtk_export_per_case(self, pipeline_out):
        assert (pipeline_out / "cases" / "snr10" / "velocity.vtk").is_file()

    def test_reconstruction_improves_velocity(self, pipeline_out):
        rows = read_csv(pipeline_out / "report" / "velocity_metrics.csv")
        by_case = {}
        for row in rows:
            by_case.setdefault(row["case"], {})[row["field"]] = float(row["rmse_cm_s"])
        for case, fields in by_case.items():
            assert fields["reconstructed"] < fields["raw"]

    def test_requires_corpus_or_sweep(self, tmp_path):
        assert main(["pipeline", "--out", str(tmp_path / "o")]) == 1
