"""Write the desk-scale fixtures used by the CLI examples.

    python3 scripts/make_fixtures.py fixtures/

Creates an 8-bag captioning corpus (PNG images plus manifest.jsonl), a small
class-folder probe dataset with splits.json, and an ARCH-shaped manifest of
11,816 placeholder bags for ``micap stats``.
"""
import argparse
import json
from pathlib import Path

import numpy as np

from micap.corpus import save_image, write_manifest
from micap.rng import make_generator
from micap.synthetic import arch_shaped_bags, pattern_images, write_synthetic_corpus


def class_folder_dataset(root: Path, n: int = 96, n_classes: int = 3, size: int = 64, seed: int = 0):
    images, labels = pattern_images(n, n_classes, size, make_generator(seed, "probe-dataset"))
    names = []
    for i, (img, y) in enumerate(zip(images, labels)):
        (root / f"class{y}").mkdir(parents=True, exist_ok=True)
        save_image(root / f"class{y}" / f"img{i:03d}.png", img)
        names.append(f"class{y}/img{i:03d}.png")
    cut1, cut2 = int(0.6 * n), int(0.8 * n)
    splits = {"train": names[:cut1], "val": names[cut1:cut2], "test": names[cut2:]}
    (root / "splits.json").write_text(json.dumps(splits, indent=1))


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("out", type=Path)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()
    corpus = args.out / "corpus"
    bags = write_synthetic_corpus(corpus, 8, args.size, args.seed)
    write_manifest(corpus / "manifest.jsonl", bags)
    class_folder_dataset(args.out / "probe_dataset", size=args.size, seed=args.seed)
    arch = args.out / "arch_shaped"
    arch.mkdir(parents=True, exist_ok=True)
    write_manifest(arch / "manifest.jsonl", arch_shaped_bags())
    print(f"fixtures written under {args.out}")


if __name__ == "__main__":
    np.seterr(all="ignore")
    main()
