"""Smoke test for the lada_py extension.

Build first with `cargo build -p lada-py` (or `--release`). The script imports
an installed `lada_py` when there is one, otherwise the freshly built library
under target/.
"""

import importlib.util
import json
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load():
    try:
        import lada_py

        return lada_py
    except ImportError:
        pass
    names = {"linux": "liblada_py.so", "darwin": "liblada_py.dylib", "win32": "lada_py.dll"}
    lib = names.get(sys.platform, "liblada_py.so")
    built = [ROOT / "target" / p / lib for p in ("release", "debug")]
    built = [p for p in built if p.exists()]
    if not built:
        sys.exit("lada_py not built; run `cargo build -p lada-py`")
    src = max(built, key=lambda p: p.stat().st_mtime)
    tmp = Path(tempfile.mkdtemp())
    dst = tmp / ("lada_py.pyd" if sys.platform == "win32" else "lada_py.so")
    shutil.copy(src, dst)
    spec = importlib.util.spec_from_file_location("lada_py", dst)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    lp = load()
    n = lp.CANVAS
    assert n == 64

    mask = lp.generate_pattern(3)
    assert len(mask) == n * n and set(mask) <= {0, 1}
    assert mask == lp.generate_pattern(3)

    resist = lp.simulate(mask, n, n)
    assert len(resist) == n * n
    assert lp.fiou(resist, resist, n, n) == 1.0
    empty = bytes(n * n)
    assert lp.simulate(empty, n, n) == empty

    f = lp.Surrogate.init(1)
    g = lp.Generator.init(2)
    pred = f.predict(mask)
    print(f"untrained surrogate fIoU {lp.fiou(pred, resist, n, n):.4f}")
    print(f"predicted loss {f.predicted_loss(mask):.4f}")

    with tempfile.TemporaryDirectory() as d:
        p = str(Path(d) / "f.ckpt")
        f.save(p)
        assert lp.Surrogate.load(p).predict(mask) == pred
        try:
            lp.Generator.load(p)
        except (ValueError, RuntimeError):
            pass
        else:
            raise AssertionError("generator loaded a surrogate checkpoint")

    sample = g.sample(5)
    assert len(sample) == n * n

    cfg = json.dumps({"sampler": {"steps": 3}})
    batch = lp.propose("style_pred", f, g, 2, 9, cfg)
    assert len(batch) == 2
    for m, prov in batch:
        assert len(m) == n * n
        assert json.loads(prov)["strategy"] == "style_pred"

    try:
        lp.propose("pool", f, g, 2, 9)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown strategy accepted")

    checks = lp.gradcheck(0, 4)
    failed = [c for c in checks if not c[2]]
    assert not failed, failed
    print(f"{len(checks)} gradient checks passed")
    print("ok")


if __name__ == "__main__":
    main()
