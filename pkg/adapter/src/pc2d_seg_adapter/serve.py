"""Serve one request manifest: tensors in, logits out, done marker last.

On any failure the adapter writes ``error.json`` naming the failing view
and exits nonzero. Reruns after a partial failure skip views whose logits
already exist and parse with the right shape, so a crashed batch can be
resumed in place.
"""

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

from .models import MODELS
from .tensorfile import TensorFileError, read_tensor, write_tensor

DONE_NAME = "done.json"
ERROR_NAME = "error.json"


class AdapterFailure(RuntimeError):
    def __init__(self, message, view_id=None):
        super().__init__(message)
        self.view_id = view_id


@dataclass
class AdapterRequest:
    manifest_path: Path
    views: list  # dicts: view_id, tensor (path relative to work dir)
    class_count: int
    channel_config: str

    @property
    def work_dir(self):
        return self.manifest_path.parent

    @classmethod
    def parse(cls, manifest_path):
        manifest_path = Path(manifest_path)
        if not manifest_path.exists():
            raise AdapterFailure(f"manifest not found: {manifest_path}")
        try:
            doc = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise AdapterFailure(f"manifest is not valid JSON: {exc}") from exc
        try:
            views = list(doc["views"])
            class_count = int(doc["class_count"])
        except (KeyError, TypeError, ValueError) as exc:
            raise AdapterFailure(f"manifest missing required fields: {exc}") from exc
        req = cls(
            manifest_path=manifest_path,
            views=views,
            class_count=class_count,
            channel_config=str(doc.get("channel_config", "")),
        )
        for entry in views:
            if "view_id" not in entry or "tensor" not in entry:
                raise AdapterFailure(f"malformed view entry: {entry}")
            tensor = req.work_dir / entry["tensor"]
            if not tensor.exists():
                raise AdapterFailure(
                    f"input tensor missing: {tensor}", view_id=entry["view_id"]
                )
        return req


def _existing_output_ok(path, class_count):
    if not path.exists():
        return False
    try:
        grid = read_tensor(path)
    except TensorFileError:
        return False
    return grid.ndim == 3 and grid.shape[0] == class_count


def serve(manifest_path, model):
    """Run `model` over every view in the manifest; returns completed ids."""
    req = AdapterRequest.parse(manifest_path)
    completed = []
    for entry in req.views:
        view_id = entry["view_id"]
        out_path = req.work_dir / f"{view_id}.logits"
        if _existing_output_ok(out_path, req.class_count):
            completed.append(view_id)  # resume: keep prior result
            continue
        try:
            channels = read_tensor(req.work_dir / entry["tensor"])
        except TensorFileError as exc:
            raise AdapterFailure(f"view {view_id}: {exc}", view_id=view_id) from exc
        if channels.ndim != 3:
            raise AdapterFailure(
                f"view {view_id}: input tensor must be (C, H, W), got {channels.shape}",
                view_id=view_id,
            )
        try:
            logits = model(channels, req.class_count)
        except Exception as exc:
            raise AdapterFailure(f"view {view_id}: model failed: {exc}", view_id=view_id) from exc
        expected = (req.class_count,) + channels.shape[1:]
        if tuple(logits.shape) != expected:
            raise AdapterFailure(
                f"view {view_id}: model produced {tuple(logits.shape)}, expected {expected}",
                view_id=view_id,
            )
        write_tensor(out_path, logits)
        completed.append(view_id)
    with open(req.work_dir / DONE_NAME, "w") as f:
        json.dump({"views": completed}, f, indent=2)
        f.write("\n")
    return completed


def _write_error(manifest_path, failure):
    work = Path(manifest_path).parent
    if not work.exists():
        return
    with open(work / ERROR_NAME, "w") as f:
        json.dump({"view_id": failure.view_id, "error": str(failure)}, f, indent=2)
        f.write("\n")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="pc2d-seg-adapter", description="Reference pc2dseg segmenter adapter"
    )
    parser.add_argument("--manifest", required=True, help="request.json written by the driver")
    parser.add_argument("--model", default="threshold", choices=sorted(MODELS))
    args = parser.parse_args(argv)
    try:
        completed = serve(args.manifest, MODELS[args.model])
    except AdapterFailure as failure:
        _write_error(args.manifest, failure)
        print(f"error: {failure}", file=sys.stderr)
        return 1
    print(f"served {len(completed)} views")
    return 0


if __name__ == "__main__":
    sys.exit(main())
