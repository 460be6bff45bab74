"""
Building the three dataset configurations
=========================================

A count-matching placeholder manifest stands in for the real corpus. We
validate it against the v1 layout and derive v2 and v3 by moving training
images into the test split.
"""

from accovidnet.data import Manifest, ManifestEntry, SplitConfig, derive_split
from accovidnet.data.manifest import CLASS_NAMES, LABEL_STRINGS, validate_counts

entries = []
for k, (n_train, n_test) in SplitConfig.covidx("v1").expected_counts.items():
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        entries.append(ManifestEntry(f"{LABEL_STRINGS[k]}/{i:05d}.png", k, split))
v1 = Manifest(entries)
validate_counts(v1, SplitConfig.covidx("v1"))
print("v1:", v1.summary())

v2 = derive_split(v1, "v1", "v2")
v3 = derive_split(v2, "v2", "v3")
for name, m in (("v2", v2), ("v3", v3)):
    print(f"{name}:", m.summary())

# test sets only grow, and nothing is in both splits
tests = [{e.image_path for e in m.select("test")} for m in (v1, v2, v3)]
print("nested test sets:", tests[0] < tests[1] < tests[2])
for k, name in enumerate(CLASS_NAMES):
    moved = sorted(p for p in tests[2] - tests[0] if p.startswith(LABEL_STRINGS[k]))
    print(f"{name}: moved {len(moved)}, first {moved[0]}, last {moved[-1]}")
