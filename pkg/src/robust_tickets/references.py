"""Published full-scale CIFAR-10 numbers (percent), kept as annotations only.

They come from ResNet18/34 and WideResNet32/38 tickets trained on the full
dataset and are not expected to be reproduced by desk-scale runs.
"""

# structure: (clean range, clean mean, robust range, robust mean); PGD-20, eps 8/255
LIBRARY_REFERENCE = {
    "ResNet18": ((76.8, 79.8), 77.9, (45.1, 47.3), 46.3),
    "ResNet34": ((77.6, 80.1), 79.1, (46.1, 48.6), 47.6),
    "WideResNet32": ((79.2, 82.4), 81.1, (48.5, 49.6), 49.1),
    "WideResNet38": ((79.9, 83.1), 81.9, (49.2, 50.3), 49.7),
}

# method: {network: (clean, robust)}; EOT attacks
ENSEMBLE_REFERENCE = {
    "dense": {"ResNet18": (81.73, 51.2), "WideResNet32": (85.93, 52.3)},
    "r2s": {"ResNet18": (78.06, 57.6), "WideResNet32": (82.34, 64.7)},
    "ours": {"four structures": (87.01, 67.72)},
}

# ResNet18 defenders, off-diagonal: same-structure sources vs ResNet34 / WideResNet38 sources
TRANSFER_REFERENCE = {
    "same_structure": (65.5, 69.9),
    "from_ResNet34": (66.5, 73.6),
    "from_WideResNet38": (66.9, 70.9),
}


def library_reference_lines() -> list[str]:
    lines = ["published full-scale reference (CIFAR-10; not reproducible at desk scale):"]
    for s, (cr, cm, rr, rm) in LIBRARY_REFERENCE.items():
        lines.append(f"  {s}: clean {cr[0]}-{cr[1]} (avg {cm}), robust {rr[0]}-{rr[1]} (avg {rm})")
    return lines


def ensemble_reference_lines() -> list[str]:
    lines = ["published full-scale reference (CIFAR-10, EOT; not reproducible at desk scale):"]
    for method, rows in ENSEMBLE_REFERENCE.items():
        for net, (clean, robust) in rows.items():
            lines.append(f"  {method} [{net}]: clean {clean}, robust {robust}")
    return lines


def transfer_reference_lines() -> list[str]:
    lo, hi = TRANSFER_REFERENCE["same_structure"]
    return [
        "published full-scale reference (ResNet18 defenders, off-diagonal accuracy %):",
        f"  same-structure sources {lo}-{hi}",
        "  ResNet34 sources {}-{}".format(*TRANSFER_REFERENCE["from_ResNet34"]),
        "  WideResNet38 sources {}-{}".format(*TRANSFER_REFERENCE["from_WideResNet38"]),
    ]
