"""Regenerates the bundled synthetic CSV files. Output is deterministic."""
import csv
import math
import os

import numpy as np

HERE = os.path.dirname(os.path.abspath(__file__))


def write(name, header, rows):
    with open(os.path.join(HERE, name), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def fmt(v):
    if isinstance(v, float):
        return "%.12g" % v
    return str(v)


def linear2d(rng, n=400):
    rows = []
    for _ in range(n):
        x1 = rng.uniform(1.5, 3.0) * rng.choice([-1.0, 1.0])
        eps = rng.uniform(0.05, 1.0) * rng.choice([-1.0, 1.0])
        x2 = -x1 + eps
        rows.append((x1, x2, "above" if x1 + x2 > 0 else "below"))
    write("linear2d.csv", ["x1", "x2", "side"], rows)


def shop(rng, n=400):
    colors = ["red", "green", "blue"]
    sizes = ["s", "m", "l"]
    shapes = ["circle", "square", "triangle"]
    materials = ["wood", "metal", "plastic"]
    rows = []
    for _ in range(n):
        c = colors[rng.integers(3)]
        s = sizes[rng.integers(3)]
        sh = shapes[rng.integers(3)]
        m = materials[rng.integers(3)]
        outdoor = "yes" if rng.random() < 0.5 else "no"
        score = (c == "red") + (s == "l") + (sh != "circle") + (m == "wood") + (outdoor == "yes")
        rows.append((c, s, sh, m, outdoor, "buy" if score >= 3 else "skip"))
    write("shop.csv", ["color", "size", "shape", "material", "outdoor", "decision"], rows)


def circles(rng, n=300):
    rows = []
    for _ in range(n):
        r = rng.uniform(5.0, 25.0)
        area = math.pi * r * r
        texture = rng.uniform(10.0, 30.0)
        label = "malignant" if area / 100.0 + texture > 22.0 else "benign"
        rows.append((r, area, texture, label))
    write("circles.csv", ["radius", "area", "texture", "diagnosis"], rows)


def banners(rng, n=300):
    sites = ["news", "shop", "forum"]
    rows = []
    for _ in range(n):
        h = float(rng.integers(20, 200))
        w = float(rng.integers(40, 600))
        site = sites[rng.integers(3)]
        local = "yes" if rng.random() < 0.3 else "no"
        ad = (w / h > 3.0) or (site == "shop" and h < 80)
        rows.append((h, w, w / h, site, local, "ad" if ad else "nonad"))
    write("banners.csv", ["height", "width", "ratio", "site", "local", "class"], rows)


def blocks(rng, n=300):
    rows = []
    for _ in range(n):
        height = int(rng.integers(2, 60))
        length = int(rng.integers(2, 300))
        area = height * length
        blackpix = int(rng.integers(1, area + 1))
        blackand = int(rng.integers(blackpix, area + 1))
        wb_trans = int(rng.integers(1, blackpix + 1))
        eccen = length / height
        p_black = blackpix / area
        p_and = blackand / area
        mean_tr = blackpix / wb_trans
        label = "text" if (eccen > 2.0 and p_black < 0.6) else "graphic"
        rows.append((height, length, area, eccen, p_black, p_and, mean_tr,
                     blackpix, blackand, wb_trans, label))
    write("blocks.csv", ["height", "length", "area", "eccen", "p_black", "p_and",
                         "mean_tr", "blackpix", "blackand", "wb_trans", "block"], rows)


def tilted(rng, n=300):
    tiers = ["bronze", "silver", "gold"]
    rows = []
    for _ in range(n):
        x1 = rng.uniform(1.5, 3.0) * rng.choice([-1.0, 1.0])
        eps = rng.uniform(0.05, 1.0) * rng.choice([-1.0, 1.0])
        x2 = -x1 + eps
        tier = tiers[rng.integers(3)]
        rows.append((x1, x2, tier, "above" if x1 + x2 > 0 else "below"))
    write("tilted.csv", ["x1", "x2", "tier", "side"], rows)


def iris():
    from sklearn.datasets import load_iris
    d = load_iris()
    names = ["setosa", "versicolor", "virginica"]
    rows = [tuple(float(v) for v in x) + (names[t],) for x, t in zip(d.data, d.target)]
    write("iris.csv", ["sepal_length", "sepal_width", "petal_length", "petal_width", "species"], rows)


if __name__ == "__main__":
    rng = np.random.default_rng(20220101)
    linear2d(rng)
    shop(rng)
    circles(rng)
    banners(rng)
    blocks(rng)
    iris()
    tilted(rng)
