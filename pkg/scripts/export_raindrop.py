"""Convert dense arrays exported from the Raindrop preprocessing into the triplet format.

This does not parse Raindrop's own files. Export them yourself to an ``.npz``
with these arrays, then run this script:

    values  float [n, L, N_s]   readings; NaN (or mask 0) where unobserved
    mask    {0,1} [n, L, N_s]   optional; defaults to ~isnan(values)
    labels  int   [n]           class index per sample
    ids     str   [n]           optional sample identifiers

For P12, the Raindrop repository ships ``PTdict_list.npy`` (one dict per
patient with an ``arr`` of shape [215, 36]) and ``arr_outcomes.npy`` (label
in the last column). Something like::

    pt = np.load("PTdict_list.npy", allow_pickle=True)
    out = np.load("arr_outcomes.npy")
    values = np.stack([p["arr"] for p in pt]).astype(float)
    mask = values != 0
    np.savez("p12.npz", values=values, mask=mask, labels=out[:, -1].astype(int))

then ``python3 scripts/export_raindrop.py p12.npz p12.irts``.
"""

import argparse

import numpy as np

from mvirts.data import Dataset, IrtsSample, save_triplets


def convert(npz_path, out_path, num_classes=None):
    arrays = np.load(npz_path, allow_pickle=False)
    values = np.asarray(arrays["values"], dtype=np.float64)
    mask = np.asarray(arrays["mask"], dtype=bool) if "mask" in arrays else ~np.isnan(values)
    labels = np.asarray(arrays["labels"], dtype=np.int64).reshape(-1)
    if values.ndim != 3 or mask.shape != values.shape or len(labels) != len(values):
        raise SystemExit(f"expected values/mask [n, L, N_s] and labels [n], got {values.shape}, {mask.shape}, {labels.shape}")
    samples = [IrtsSample(np.where(m, v, np.nan), m, int(y)) for v, m, y in zip(values, mask, labels)]
    ids = [str(i) for i in arrays["ids"]] if "ids" in arrays else None
    ds = Dataset(samples, num_classes or int(labels.max()) + 1, meta={"sample_ids": ids} if ids else {})
    save_triplets(ds, out_path)
    return ds


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("npz")
    ap.add_argument("out")
    ap.add_argument("--classes", type=int, default=None)
    args = ap.parse_args()
    ds = convert(args.npz, args.out, args.classes)
    print(f"wrote {len(ds)} samples, {ds.n_sensors} sensors, length {ds.length}, missing ratio {ds.missing_ratio:.4f}")


if __name__ == "__main__":
    main()
