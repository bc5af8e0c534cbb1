"""Exercise the Python bindings end to end without any trained artifacts.

Build first:  cd crates/python && maturin develop --release
"""
import math
import sys

import avatarfit_py as af


def check(name, cond):
    print(("ok   " if cond else "FAIL ") + name)
    return cond


def main():
    results = []

    p = af.sample_params(42)
    results.append(check("sample_params length", len(p) == af.PARAM_DIM))
    results.append(check("sample_params in range", all(abs(v) <= af.PARAM_LIMIT for v in p)))
    results.append(check("sample_params deterministic", p == af.sample_params(42)))

    img = af.render_engine(p, 64)
    data = img.data()
    results.append(check("render shape", (img.height, img.width, len(data)) == (64, 64, 3 * 64 * 64)))
    results.append(check("render range", all(0.0 <= v <= 1.0 for v in data)))
    results.append(check("ppm round trip", af.Image.from_ppm(img.to_ppm()).mse(img) < 1e-4))

    masked = af.mask_region(img, "middle")
    results.append(check("mask none is identity", af.mask_region(img, "none").data() == data))
    results.append(check("mask changes image", masked.data() != data))
    results.append(check("mask idempotent", af.mask_region(masked, "middle").data() == masked.data()))

    x = [[0.0, 0.0], [1.0, 0.0]]
    y = [[0.0, 1.0], [1.0, 1.0]]
    results.append(check("mmd self is zero", af.mmd_sq(x, x, [1.0]) < 1e-7))
    expected = 1.0 - math.exp(-1.0)
    results.append(check("mmd closed form", abs(af.mmd_sq(x, y, [1.0]) - expected) < 1e-5))
    results.append(check("mmd symmetric", af.mmd_sq(x, y) == af.mmd_sq(y, x)))

    rows = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]
    results.append(check("contrastive equal sims gives log 2", abs(af.contrastive_loss([[0.0, 0.0]] * 4, tau=0.1) - math.log(2)) < 1e-9))
    results.append(check("contrastive separated is small", af.contrastive_loss(rows, tau=0.1) < 1e-3))

    fit_rows = [[math.cos(t), math.sin(t), 0.1 * t] for t in range(20)]
    pairs = [(r, [v + 1e-3 for v in r], True) for r in fit_rows[:10]]
    pairs += [(fit_rows[i], [-v for v in fit_rows[i]], False) for i in range(10, 20)]
    acc, thr = af.verification_accuracy(fit_rows, pairs, pairs)
    results.append(check("verification separable", acc == 1.0))

    try:
        af.render_engine([0.0] * 3)
        results.append(check("wrong length rejected", False))
    except ValueError:
        results.append(check("wrong length rejected", True))

    print(f"{sum(results)}/{len(results)} checks passed")
    return 0 if all(results) else 1


if __name__ == "__main__":
    sys.exit(main())
