#!/usr/bin/env python3
"""Logistic probe on single snippets of a dataset directory.

Reads manifest.json, annotations.json and features/<id>.bin directly and
labels a snippet foreground when its frame span lies inside a ground truth.
Each subject is scored by a probe trained on the other subjects.

    python3 scripts/snippet_probe.py DATA_DIR [--min-accuracy 0.95]

Exits 1 when accuracy or balanced accuracy falls below the threshold.
"""

import argparse
import json
import struct
import sys
from pathlib import Path

import numpy as np
from sklearn.linear_model import LogisticRegression


def read_features(path):
    raw = path.read_bytes()
    if raw[:8] != b"SNIPFEAT":
        raise ValueError(f"{path}: not a feature file")
    t, w = struct.unpack_from("<II", raw, 16)
    values = np.frombuffer(raw, dtype="<f4", offset=24).astype(np.float64)
    image = values[: t * w].reshape(t, w)
    flow = values[t * w :].reshape(t, w)
    return np.concatenate([image, flow], axis=1)


def snippet_labels(count, snippet_len, stride, gts):
    labels = np.zeros(count, dtype=int)
    kinds = np.array([""] * count, dtype=object)
    for t in range(count):
        a, b = t * stride, t * stride + snippet_len - 1
        for g in gts:
            if g["onset"] <= a and b <= g["offset"]:
                labels[t] = 1
                kinds[t] = g["class"]
    return labels, kinds


def load(root):
    manifest = json.loads((root / "manifest.json").read_text())
    annotations = {a["video_id"]: a for a in json.loads((root / "annotations.json").read_text())}
    s = manifest["snippet_len"]
    stride = s - manifest["overlap"]
    xs, ys, kinds, subjects = [], [], [], []
    for v in manifest["videos"]:
        x = read_features(root / v["features"])
        y, k = snippet_labels(len(x), s, stride, annotations[v["video_id"]]["ground_truths"])
        xs.append(x)
        ys.append(y)
        kinds.append(k)
        subjects += [v["subject_id"]] * len(x)
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(kinds), np.array(subjects)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("data_dir", type=Path)
    ap.add_argument("--min-accuracy", type=float, default=0.95)
    args = ap.parse_args()

    x, y, kinds, subjects = load(args.data_dir)
    pred = np.zeros_like(y)
    for subj in np.unique(subjects):
        test = subjects == subj
        clf = LogisticRegression(max_iter=2000, class_weight="balanced")
        clf.fit(x[~test], y[~test])
        pred[test] = clf.predict(x[test])

    acc = float(np.mean(pred == y))
    tpr = float(np.mean(pred[y == 1] == 1))
    tnr = float(np.mean(pred[y == 0] == 0))
    balanced = (tpr + tnr) / 2
    print(f"snippets={len(y)} foreground={int(y.sum())}")
    print(f"accuracy={acc:.4f} balanced_accuracy={balanced:.4f} background_recall={tnr:.4f}")
    for cls in ("ME", "MaE"):
        sel = kinds == cls
        if sel.any():
            print(f"{cls}_snippets={int(sel.sum())} {cls}_recall={float(np.mean(pred[sel] == 1)):.4f}")
    ok = acc > args.min_accuracy and balanced > args.min_accuracy
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
