import csv
import json

import pytest
import torch

from neuflow.data import generate_synthetic
from neuflow.evalbench import benchmark, downsample_gt, epe, evaluate, write_jsonl, write_scatter_csv
from neuflow.model import FlowPrediction


class TestEpe:
    def test_three_four_five(self):
        pred = torch.zeros(2, 1, 1)
        gt = torch.tensor([3.0, 4.0]).view(2, 1, 1)
        assert epe(pred, gt) == pytest.approx(5.0)

    def test_mask(self):
        pred = torch.zeros(2, 1, 2)
        gt = torch.tensor([[[3.0, 100.0]], [[4.0, 0.0]]])
        assert epe(pred, gt, torch.tensor([[True, False]])) == pytest.approx(5.0)

    def test_nothing_valid(self):
        assert epe(torch.zeros(2, 3, 3), torch.ones(2, 3, 3), torch.zeros(3, 3, dtype=torch.bool)) is None

    def test_symmetric(self):
        a, b = torch.randn(2, 5, 6), torch.randn(2, 5, 6)
        assert epe(a, b) == pytest.approx(epe(b, a))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            epe(torch.zeros(2, 3, 3), torch.zeros(2, 3, 4))


class TestDownsampleGt:
    def test_constant_field_scaled(self):
        flow = torch.tensor([8.0, -16.0]).view(2, 1, 1).expand(2, 32, 40)
        coarse, valid = downsample_gt(flow, torch.ones(32, 40, dtype=torch.bool))
        assert coarse.shape == (2, 4, 5) and valid.all()
        assert torch.allclose(coarse, torch.tensor([1.0, -2.0]).view(2, 1, 1).expand(2, 4, 5))

    def test_any_invalid_fine_pixel_invalidates_block(self):
        valid = torch.ones(16, 16, dtype=torch.bool)
        valid[9, 3] = False
        _, cvalid = downsample_gt(torch.zeros(2, 16, 16), valid)
        assert cvalid.tolist() == [[True, True], [False, True]]

    def test_non_divisible_uses_ceil_grid(self):
        coarse, cvalid = downsample_gt(torch.zeros(2, 20, 30), torch.ones(20, 30, dtype=torch.bool))
        assert coarse.shape == (2, 3, 4)
        assert not cvalid[-1].any() and not cvalid[:, -1].any()


class Oracle:
    """Stand-in predictor returning ground truth plus a fixed offset."""

    def __init__(self, samples, offset=(0.0, 0.0)):
        self.by_key = {s.img1.sum().item(): s for s in samples}
        self.offset = torch.tensor(offset).view(1, 2, 1, 1)

    def __call__(self, img1, img2, full):
        s = self.by_key[img1.sum().item()]
        flow = s.flow[None] + self.offset
        coarse, _ = downsample_gt(s.flow, s.valid, 8)
        return FlowPrediction(coarse[None, :, ::2, ::2] / 2, coarse[None] + self.offset / 8,
                              flow if full else None)


@pytest.fixture(scope="module")
def samples():
    return generate_synthetic(0, 3, 64, "translation")


class TestEvaluate:
    def test_perfect_predictor_full(self, samples):
        report = evaluate(Oracle(samples), samples, "full")
        assert report.mean_epe == pytest.approx(0.0, abs=1e-9)
        assert report.ids == [s.id for s in samples]

    def test_perfect_predictor_eighth(self, samples):
        assert evaluate(Oracle(samples), samples, "eighth").mean_epe == pytest.approx(0.0, abs=1e-6)

    def test_constant_offset(self, samples):
        assert evaluate(Oracle(samples, (0.6, 0.8)), samples, "full").mean_epe == pytest.approx(1.0, abs=1e-6)

    def test_eighth_error_in_coarse_pixels(self, samples):
        report = evaluate(Oracle(samples, (6.4, 4.8)), samples, "eighth")
        assert report.mean_epe == pytest.approx(1.0, abs=1e-5)

    def test_real_model_is_deterministic(self, tiny_model, samples):
        a = evaluate(tiny_model, samples, "full")
        b = evaluate(tiny_model, samples, "full")
        assert a.per_sample == b.per_sample and a.mean_epe is not None

    def test_bad_resolution(self, samples):
        with pytest.raises(ValueError):
            evaluate(Oracle(samples), samples, "half")

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(Oracle([]), [], "full")

    def test_report_json(self, samples, tmp_path):
        report = evaluate(Oracle(samples), samples, "full")
        write_jsonl([report, report], tmp_path / "r.jsonl")
        rows = [json.loads(x) for x in (tmp_path / "r.jsonl").read_text().splitlines()]
        assert len(rows) == 2 and rows[0]["resolution"] == "full"


class TestBenchmark:
    def test_report_fields(self, tiny_model):
        r = benchmark(tiny_model, (64, 48), output_full=False, runs=10, warmup=3)
        assert r.runs == len(r.samples) == 10
        assert r.size == (64, 48) and r.resolution == "eighth"
        assert 0 < r.median <= r.p95 <= max(r.samples)
        assert r.params == sum(p.numel() for p in tiny_model.parameters())
        assert "64x48" in r.summary()
        assert json.loads(r.to_json())["runs"] == 10

    @pytest.mark.parametrize("runs,warmup", [(9, 3), (10, 2)])
    def test_minimum_repetitions(self, tiny_model, runs, warmup):
        with pytest.raises(ValueError):
            benchmark(tiny_model, (32, 32), runs=runs, warmup=warmup)


def test_scatter_csv(tmp_path):
    write_scatter_csv([{"name": "a", "resolution": "full", "epe": 1.5, "latency_s": 0.25, "params": 10}],
                      tmp_path / "s.csv")
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert rows[0]["fps"] == "4.0" and rows[0]["epe"] == "1.5"
