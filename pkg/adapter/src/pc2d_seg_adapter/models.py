"""Built-in toy models.

A model is a single callable: (channels C'xHxW float32, class_count) ->
logits CxHxW float32. Wrap any real framework behind the same callable and
register it; the serving loop does not care what happens inside.
"""

import numpy as np


def intensity_threshold_model(channels, class_count):
    """Class 1 where channel 0 is brighter than 0.5, class 0 elsewhere."""
    if class_count < 2:
        raise ValueError("threshold model needs at least 2 classes")
    h, w = channels.shape[1:]
    logits = np.zeros((class_count, h, w), dtype=np.float32)
    hot = channels[0] > 0.5
    logits[1][hot] = 1.0
    logits[0][~hot] = 1.0
    return logits


def echo_model(channels, class_count):
    """Copy the input planes into the logit planes (pad or drop to C).

    With inputs that already are logits, this makes the adapter a bitwise
    pass-through; it exists for protocol conformance testing.
    """
    h, w = channels.shape[1:]
    logits = np.zeros((class_count, h, w), dtype=np.float32)
    n = min(class_count, channels.shape[0])
    logits[:n] = channels[:n]
    return logits


MODELS = {
    "threshold": intensity_threshold_model,
    "echo": echo_model,
}
