"""Pluggable per-view 2D segmenters.

Two implementations: a seeded oracle that derives logits from the rendered
label image (for closed-loop testing), and a driver that batches views
through an external adapter subprocess via a file-exchange protocol.

Protocol per invocation, inside one work dir:
  driver writes  <view_id>.tensor   raw C'xHxW float32 tensors (PC2DTNSR)
  driver writes  request.json       {"views": [{"view_id", "tensor",
                                     "width", "height"}...],
                                     "class_count": C, "channel_config": name}
  driver runs    <adapter> --manifest <work_dir>/request.json
  adapter writes <view_id>.logits   raw CxHxW float32 tensors (PC2DTNSR)
  adapter writes done.json          {"views": [ids]}
Nonzero adapter exit, a missing or mis-shaped logits file, or a timeout is
an error. Logits, not probabilities, cross the boundary.
"""

import json
import shlex
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .ingest import IGNORE_LABEL

REQUEST_NAME = "request.json"
DONE_NAME = "done.json"
DEFAULT_BATCH_SIZE = 32


class AdapterError(RuntimeError):
    """External segmenter adapter failed."""


@dataclass
class LogitTensor:
    """Per-pixel class logits for one view."""

    view_id: int
    grid: np.ndarray  # (C, H, W) float32

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 3:
            raise ValueError(f"logits must be (C, H, W), got shape {self.grid.shape}")
        if not np.all(np.isfinite(self.grid)):
            raise ValueError("logits contain non-finite values")

    @property
    def class_count(self):
        return self.grid.shape[0]


@dataclass
class OracleConfig:
    """Noise model for the built-in oracle segmenter.

    Each pixel keeps its true class or, with probability flip_prob, swaps it
    for a uniformly random one (the true class included). Logits are
    one-hot * logit_scale plus Gaussian noise_sigma. Ignore pixels get
    all-zero logits.
    """

    flip_prob: float = 0.0
    logit_scale: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must be in [0, 1]")
        if self.logit_scale <= 0:
            raise ValueError("logit_scale must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def oracle_infer(view, classes, cfg):
    """Oracle logits for a rendered view; deterministic per (seed, view_id)."""
    if view.label_image is None:
        raise ValueError("oracle segmenter needs a rendered label image")
    label = view.label_image
    known = label != IGNORE_LABEL
    cls = label.astype(np.int64)
    if known.any() and cls[known].max() >= classes:
        raise ValueError(
            f"label {cls[known].max()} exceeds class count {classes}"
        )

    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(view.view_id)]))
    if cfg.flip_prob > 0:
        flip = rng.random(label.shape) < cfg.flip_prob
        random_cls = rng.integers(0, classes, size=label.shape)
        cls = np.where(flip, random_cls, cls)

    h, w = label.shape
    logits = np.zeros((classes, h, w), dtype=np.float32)
    flat_cls = cls.ravel()
    flat_known = np.flatnonzero(known.ravel())
    logits.reshape(classes, -1)[flat_cls[flat_known], flat_known] = cfg.logit_scale
    if cfg.noise_sigma > 0:
        logits += rng.normal(0.0, cfg.noise_sigma, size=logits.shape).astype(np.float32)
        logits[:, ~known] = 0.0
    return LogitTensor(view.view_id, logits)


class OracleSegmenter:
    """Callable segmenter wrapping oracle_infer with a fixed class count."""

    def __init__(self, class_count, config=None):
        self.class_count = int(class_count)
        self.config = config or OracleConfig()

    def __call__(self, rendered):
        return oracle_infer(rendered, self.class_count, self.config)


class DiskLogitSegmenter:
    """Reads precomputed <view_id>.logits tensors from a directory."""

    def __init__(self, logits_dir, class_count):
        self.logits_dir = Path(logits_dir)
        self.class_count = int(class_count)

    def __call__(self, rendered):
        path = self.logits_dir / f"{rendered.view_id}.logits"
        if not path.exists():
            raise FileNotFoundError(f"missing logits for view {rendered.view_id}: {path}")
        return load_logits(path, rendered.view_id, (rendered.height, rendered.width), self.class_count)


def load_logits(path, view_id, hw, class_count):
    """Read and shape-check one logits tensor."""
    try:
        grid = tensorio.read_tensor(path)
    except tensorio.TensorFormatError as exc:
        raise AdapterError(f"view {view_id}: bad logits file: {exc}") from exc
    expected = (class_count, hw[0], hw[1])
    if grid.ndim != 3 or tuple(grid.shape) != expected:
        raise AdapterError(
            f"view {view_id}: logits shape {tuple(grid.shape)}, expected {expected}"
        )
    return LogitTensor(view_id, grid)


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def run_external(
    views,
    adapter_cmd,
    work_dir,
    class_count,
    channel_config="",
    batch_size=DEFAULT_BATCH_SIZE,
    timeout=None,
):
    """Drive an adapter subprocess over rendered views, in batches.

    `adapter_cmd` is a command line (string or argv list); the driver appends
    ``--manifest <work_dir>/request.json``. Output order always matches the
    input view order. Raises AdapterError on nonzero exit, bad output shapes
    or timeout.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    argv = shlex.split(adapter_cmd) if isinstance(adapter_cmd, str) else list(adapter_cmd)
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)

    out = {}
    for chunk in _chunks(list(views), batch_size):
        entries = []
        for rv in chunk:
            tensor_name = f"{rv.view_id}.tensor"
            tensorio.write_tensor(work_dir / tensor_name, rv.channels)
            entries.append(
                {
                    "view_id": rv.view_id,
                    "tensor": tensor_name,
                    "width": rv.width,
                    "height": rv.height,
                }
            )
        request = {
            "views": entries,
            "class_count": int(class_count),
            "channel_config": channel_config,
        }
        req_path = work_dir / REQUEST_NAME
        with open(req_path, "w") as f:
            json.dump(request, f, indent=2, sort_keys=True)
        done_path = work_dir / DONE_NAME
        done_path.unlink(missing_ok=True)

        cmd = argv + ["--manifest", str(req_path)]
        try:
            proc = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout)
        except subprocess.TimeoutExpired as exc:
            raise AdapterError(f"adapter timed out after {timeout}s: {' '.join(cmd)}") from exc
        except OSError as exc:
            raise AdapterError(f"cannot run adapter {' '.join(cmd)}: {exc}") from exc
        if proc.returncode != 0:
            raise AdapterError(
                f"adapter exited with {proc.returncode}\n"
                f"stdout:\n{proc.stdout}\nstderr:\n{proc.stderr}"
            )
        if not done_path.exists():
            raise AdapterError("adapter exited 0 but wrote no done.json")

        for rv in chunk:
            lf = work_dir / f"{rv.view_id}.logits"
            if not lf.exists():
                raise AdapterError(f"view {rv.view_id}: adapter wrote no logits file")
            out[rv.view_id] = load_logits(lf, rv.view_id, (rv.height, rv.width), class_count)

    return [out[rv.view_id] for rv in views]
