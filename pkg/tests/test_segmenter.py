import json
import math
import sys
import textwrap

import numpy as np
import pytest

from pc2dseg import segmenter, tensorio
from pc2dseg.render import RenderedView
from pc2dseg.segmenter import (
    AdapterError,
    LogitTensor,
    OracleConfig,
    OracleSegmenter,
    oracle_infer,
    run_external,
)


def rendered_with_labels(labels, view_id=0):
    labels = np.asarray(labels, dtype=np.uint8)
    h, w = labels.shape
    return RenderedView(
        view_id=view_id,
        channels=np.zeros((1, h, w), dtype=np.float32),
        channel_names=("point_intensity",),
        point_depth=np.full((h, w), np.inf),
        mesh_depth=np.full((h, w), np.inf),
        label_image=labels,
    )


class TestOracle:
    def test_identity_oracle_argmax_matches_labels(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 5, (32, 64)).astype(np.uint8)
        labels[0, :10] = 255
        rv = rendered_with_labels(labels)
        out = oracle_infer(rv, 5, OracleConfig(flip_prob=0.0, noise_sigma=0.0))
        pred = out.grid.argmax(axis=0)
        known = labels != 255
        assert np.array_equal(pred[known], labels[known])

    def test_ignore_pixels_zero_logits(self):
        labels = np.full((8, 8), 255, dtype=np.uint8)
        labels[4, 4] = 2
        out = oracle_infer(rendered_with_labels(labels), 4, OracleConfig())
        assert np.all(out.grid[:, labels == 255] == 0.0)
        assert out.grid[2, 4, 4] == 1.0

    def test_flip_prob_1_matches_uniform_rate(self):
        # with every pixel flipped to a uniform class, argmax hits the truth
        # 1/C of the time; Monte Carlo over >= 1e5 pixels, +-0.01
        c = 5
        labels = np.random.default_rng(1).integers(0, c, (320, 320)).astype(np.uint8)
        out = oracle_infer(
            rendered_with_labels(labels), c, OracleConfig(flip_prob=1.0, seed=9)
        )
        acc = (out.grid.argmax(axis=0) == labels).mean()
        assert math.isclose(acc, 1.0 / c, abs_tol=0.01)

    def test_deterministic_per_seed_and_view(self):
        labels = np.random.default_rng(2).integers(0, 3, (16, 16)).astype(np.uint8)
        cfg = OracleConfig(flip_prob=0.3, noise_sigma=0.5, seed=4)
        a = oracle_infer(rendered_with_labels(labels, view_id=7), 3, cfg)
        b = oracle_infer(rendered_with_labels(labels, view_id=7), 3, cfg)
        c = oracle_infer(rendered_with_labels(labels, view_id=8), 3, cfg)
        assert np.array_equal(a.grid, b.grid)
        assert not np.array_equal(a.grid, c.grid)

    def test_noise_sigma_perturbs_but_keeps_ignores_zero(self):
        labels = np.full((8, 8), 255, dtype=np.uint8)
        labels[0, 0] = 1
        out = oracle_infer(rendered_with_labels(labels), 3, OracleConfig(noise_sigma=0.5, seed=0))
        assert np.all(out.grid[:, 1:, :] == 0.0)
        assert np.any(out.grid[:, 0, 0] != 0.0)

    def test_label_exceeding_class_count_rejected(self):
        labels = np.full((4, 4), 7, dtype=np.uint8)
        with pytest.raises(ValueError, match="class count"):
            oracle_infer(rendered_with_labels(labels), 4, OracleConfig())

    def test_missing_label_image_rejected(self):
        rv = rendered_with_labels(np.zeros((4, 4)))
        rv.label_image = None
        with pytest.raises(ValueError):
            oracle_infer(rv, 2, OracleConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            OracleConfig(flip_prob=1.5)
        with pytest.raises(ValueError):
            OracleConfig(logit_scale=0.0)
        with pytest.raises(ValueError):
            OracleConfig(noise_sigma=-1.0)


ECHO_ADAPTER = textwrap.dedent(
    """
    import json, struct, sys
    from pathlib import Path
    import numpy as np

    def read_tensor(path):
        data = Path(path).read_bytes()
        assert data[:8] == b"PC2DTNSR"
        ndim = int(np.frombuffer(data[8:12], "<u4")[0])
        dims = np.frombuffer(data[12:12 + 4 * ndim], "<u4")
        return np.frombuffer(data[12 + 4 * ndim:], "<f4").reshape(dims)

    def write_tensor(path, arr):
        arr = np.ascontiguousarray(arr, dtype="<f4")
        with open(path, "wb") as f:
            f.write(b"PC2DTNSR")
            f.write(np.array([arr.ndim], "<u4").tobytes())
            f.write(np.array(arr.shape, "<u4").tobytes())
            f.write(arr.tobytes())

    manifest = Path(sys.argv[sys.argv.index("--manifest") + 1])
    req = json.loads(manifest.read_text())
    work = manifest.parent
    mode = %(mode)r
    for entry in req["views"]:
        x = read_tensor(work / entry["tensor"])
        c = req["class_count"]
        if mode == "echo":
            out = np.tile(x[:1], (c, 1, 1)) * 0.0
            out[: min(c, x.shape[0])] = x[: min(c, x.shape[0])]
        elif mode == "wrong_shape":
            out = x[0]
        elif mode == "threshold":
            out = np.zeros((c,) + x.shape[1:], dtype="<f4")
            hot = x[0] > 0.5
            out[1][hot] = 1.0
            out[0][~hot] = 1.0
        write_tensor(work / (str(entry["view_id"]) + ".logits"), out)
    (work / "done.json").write_text(json.dumps({"views": [e["view_id"] for e in req["views"]]}))
    """
)


def make_adapter(tmp_path, mode="echo"):
    script = tmp_path / f"adapter_{mode}.py"
    script.write_text(ECHO_ADAPTER % {"mode": mode})
    return f"{sys.executable} {script}"


def rendered_with_channels(channels, view_id):
    channels = np.asarray(channels, dtype=np.float32)
    _, h, w = channels.shape
    return RenderedView(
        view_id=view_id,
        channels=channels,
        channel_names=tuple(f"c{i}" for i in range(channels.shape[0])),
        point_depth=np.full((h, w), np.inf),
        mesh_depth=np.full((h, w), np.inf),
        label_image=None,
    )


class TestRunExternal:
    def test_echo_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(5)
        views = [rendered_with_channels(rng.normal(size=(2, 6, 9)), vid) for vid in (3, 1, 4)]
        out = run_external(views, make_adapter(tmp_path), tmp_path / "work", class_count=2)
        assert [t.view_id for t in out] == [3, 1, 4]  # input order preserved
        for rv, t in zip(views, out):
            assert np.array_equal(
                t.grid.view(np.uint32), rv.channels.astype("<f4").view(np.uint32)
            )

    def test_batching_invocation_count(self, tmp_path):
        assert math.ceil(800 / 32) == 25  # default chunking at paper scale
        counter = tmp_path / "count"
        script = tmp_path / "counting.py"
        inner = make_adapter(tmp_path).split(" ", 1)[1]
        script.write_text(
            "import sys, subprocess, pathlib\n"
            f"p = pathlib.Path({str(counter)!r})\n"
            "p.write_text(str(int(p.read_text()) + 1 if p.exists() else 1))\n"
            f"subprocess.run([sys.executable, {inner!r}] + sys.argv[1:], check=True)\n"
        )
        counter.write_text("0")
        rng = np.random.default_rng(0)
        views = [rendered_with_channels(rng.normal(size=(1, 4, 4)), vid) for vid in range(10)]
        run_external(views, f"{sys.executable} {script}", tmp_path / "w", 1, batch_size=4)
        assert counter.read_text() == "3"  # ceil(10 / 4)

    def test_wrong_shape_names_view(self, tmp_path):
        views = [rendered_with_channels(np.zeros((1, 4, 4)), 42)]
        with pytest.raises(AdapterError, match="42"):
            run_external(views, make_adapter(tmp_path, "wrong_shape"), tmp_path / "w", 3)

    def test_nonzero_exit_reports_diagnostics(self, tmp_path):
        script = tmp_path / "boom.py"
        script.write_text("import sys; print('kaput', file=sys.stderr); sys.exit(3)\n")
        views = [rendered_with_channels(np.zeros((1, 4, 4)), 0)]
        with pytest.raises(AdapterError, match="kaput"):
            run_external(views, f"{sys.executable} {script}", tmp_path / "w", 2)

    def test_timeout(self, tmp_path):
        script = tmp_path / "sleep.py"
        script.write_text("import time; time.sleep(60)\n")
        views = [rendered_with_channels(np.zeros((1, 4, 4)), 0)]
        with pytest.raises(AdapterError, match="timed out"):
            run_external(views, f"{sys.executable} {script}", tmp_path / "w", 2, timeout=0.5)

    def test_threshold_model(self, tmp_path):
        img = np.zeros((1, 4, 4), dtype=np.float32)
        img[0, :, 2:] = 1.0  # right half bright
        out = run_external(
            [rendered_with_channels(img, 0)], make_adapter(tmp_path, "threshold"),
            tmp_path / "w", class_count=2,
        )[0]
        assert np.array_equal(out.grid.argmax(axis=0), (img[0] > 0.5).astype(int))

    def test_request_manifest_contents(self, tmp_path):
        views = [rendered_with_channels(np.zeros((2, 4, 6)), 5)]
        run_external(views, make_adapter(tmp_path), tmp_path / "w", 3, channel_config="trimerge")
        req = json.loads((tmp_path / "w" / "request.json").read_text())
        assert req["class_count"] == 3
        assert req["channel_config"] == "trimerge"
        assert req["views"][0] == {"view_id": 5, "tensor": "5.tensor", "width": 6, "height": 4}


def test_oracle_through_file_protocol_bitwise(tmp_path):
    # logits written by the in-process oracle and read back are bit-identical
    labels = np.random.default_rng(3).integers(0, 4, (16, 24)).astype(np.uint8)
    rv = rendered_with_labels(labels, view_id=11)
    logits = OracleSegmenter(4, OracleConfig(flip_prob=0.2, noise_sigma=0.7, seed=1))(rv)
    path = tmp_path / "11.logits"
    tensorio.write_tensor(path, logits.grid)
    back = segmenter.load_logits(path, 11, labels.shape, 4)
    assert np.array_equal(back.grid.view(np.uint32), logits.grid.view(np.uint32))


def test_logit_tensor_validation():
    with pytest.raises(ValueError):
        LogitTensor(0, np.zeros((4, 4)))  # not 3-dim
    with pytest.raises(ValueError):
        LogitTensor(0, np.full((1, 2, 2), np.nan))
