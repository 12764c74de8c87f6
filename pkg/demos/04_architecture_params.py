"""
Where the parameters live
=========================

The four layers have very different budgets.  The spatial filters and both
capsule convolutions are shared (across channels, positions, or windows), so
almost all parameters sit in the final routed layer, whose transformation
matrices are per child and per class.
"""

from hsicaps import Architecture, param_count

SCENES = [
    ("220 channels, 16 classes", 220, 16),
    ("103 channels,  9 classes", 103, 9),
    ("224 channels, 16 classes", 224, 16),
]

for label, channels, classes in SCENES:
    arch = Architecture(channels=channels, num_classes=classes)
    counts = arch.layer_param_counts()
    print(label)
    print(f"  spectral positions {channels} -> {arch.primary_positions} "
          f"-> {arch.window_positions}")
    for layer, count in counts.items():
        share = 100.0 * count / param_count(arch)
        print(f"  {layer:<8} {count:>9,}  ({share:4.1f}%)")
    print(f"  {'total':<8} {param_count(arch):>9,}\n")

# the shared layers are constant across scenes; only the routed layer grows
# with spectral length and class count
base = Architecture(channels=220, num_classes=16).layer_param_counts()
print("shared-layer budget, any scene: "
      f"{base['spatial'] + base['primary'] + base['window']:,} parameters")

# growing the spectrum by 4 channels adds 2 window positions worth of
# class matrices
a220 = param_count(Architecture(channels=220, num_classes=16))
a224 = param_count(Architecture(channels=224, num_classes=16))
print(f"220 -> 224 channels: +{a224 - a220:,} parameters "
      "(one extra constraint-window position)")
