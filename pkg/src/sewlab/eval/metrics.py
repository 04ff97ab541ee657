"""Clean accuracy and watermark accuracy, both as percentages."""

import numpy as np


def cda(net, test):
    """Percentage of clean samples classified correctly."""
    if len(test) == 0:
        raise ValueError("CDA of an empty test set")
    return float((net.predict(test.images) == test.labels).mean() * 100.0)


def wacc(net, keyset):
    """Percentage of key samples predicted as the key's target label."""
    if len(keyset) == 0:
        raise ValueError("WACC of an empty key set")
    pred = net.predict(keyset.images)
    return float((pred == np.asarray(keyset.target_labels)).mean() * 100.0)
