"""Structural similarity and a 2D map of the shipped fixture corpus.

Computes SOAP descriptors for a handful of fixture materials, compares
them with the entropic best-match kernel, and projects the full
descriptor set to two dimensions so near-duplicate structures land
next to each other.  No trained model is involved; this is the purely
geometric half of the package.

Run from the repository root:

    python3 demos/similarity_map.py
"""

import numpy as np

from matterbridge.evaluate import project_2d_pca
from matterbridge.fixtures import load_fixture_records
from matterbridge.rematch import RematchConfig, similarity_matrix
from matterbridge.soap import SoapConfig, soap_descriptor


def main():
    records = load_fixture_records()[:8]
    ids = [r.material_id for r in records]
    structures = [r.structure for r in records]

    soap_cfg = SoapConfig(r_cut=6.0, n_max=4, l_max=3)
    sim = similarity_matrix(structures, soap_cfg=soap_cfg,
                            rematch_cfg=RematchConfig(alpha=0.1))

    width = max(len(i) for i in ids)
    print("pairwise REMatch similarity (alpha=0.1):")
    print(" " * (width + 2) + "  ".join(f"{i:>8}" for i in ids))
    for i, row in zip(ids, sim):
        cells = "  ".join(f"{x:8.4f}" for x in row)
        print(f"  {i:<{width}}{cells}")

    closest = None
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            if closest is None or sim[a, b] > sim[closest[0], closest[1]]:
                closest = (a, b)
    print(f"\nmost alike: {ids[closest[0]]} and {ids[closest[1]]} "
          f"(similarity {sim[closest[0], closest[1]]:.4f})")

    # mean-pooled descriptors give one vector per structure; two PCA axes
    # are enough to eyeball the neighborhoods
    pooled = np.stack([soap_descriptor(s, soap_cfg).mean(axis=0)
                       for s in structures])
    coords, explained = project_2d_pca(pooled)
    print(f"\n2D map (axes explain {explained[0]:.0%} and "
          f"{explained[1]:.0%} of variance):")
    for mid, (x, y) in zip(ids, coords):
        print(f"  {mid:<{width}}  x={x:+.4f}  y={y:+.4f}")


if __name__ == "__main__":
    main()
