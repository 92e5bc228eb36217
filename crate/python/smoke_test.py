"""Smoke test for the mvocab extension module.

Build and install first:  maturin develop -m crates/python/Cargo.toml
"""

import math
import random
import tempfile
from pathlib import Path

import mvocab


def main():
    rng = random.Random(0)

    assert mvocab.quantization_complexity([4096, 2048, 1024, 512, 256, 128]) == 8064
    assert mvocab.unique_assignments([[0, 0, 1], [1, 1, 1]]) == 2
    assert abs(mvocab.average_precision(["a", "x", "b"], ["a", "b"]) - 5 / 6) < 1e-12
    v = mvocab.ssr([9.0, -16.0], 0.5)
    assert abs(v[0] - 0.6) < 1e-6 and abs(v[1] + 0.8) < 1e-6

    rows = [[0.0], [1.0], [10.0]]
    vocab = mvocab.Vocabulary.train(rows, 2, seed=1)
    assert abs(vocab.objective(rows) - 0.5) < 1e-9
    assert vocab.quantize([[0.2], [9.0]]) == [vocab.quantize([[0.0]])[0], vocab.quantize([[10.0]])[0]]

    train = [[rng.gauss(0.0, 1.0 / (1 + j)) for j in range(30)] for _ in range(80)]
    model = mvocab.ReductionModel.train(train, 8)
    assert all(abs(x - 1.0) < 1e-6 for x in model.whitening_check(train))
    short, zero = model.reduce(train[0])
    assert not zero and abs(math.sqrt(sum(x * x for x in short)) - 1.0) < 1e-6

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.mvrd"
        model.save(str(path))
        again = mvocab.ReductionModel.load(str(path))
        assert again.d_out == 8 and again.eigenvalues == model.eigenvalues

    shorts = [model.reduce(x)[0] for x in train[:10]]
    index = mvocab.Index([f"img{i}" for i in range(10)], shorts)
    top = index.query(shorts[3], 2)
    assert top[0][0] == "img3" and abs(top[0][1] - 1.0) < 1e-5

    code, out = mvocab.run_cli(["stats", "--ks", "512,256,128"])
    assert code == 0 and out == "complexity\t896\n"

    print("smoke test passed")


if __name__ == "__main__":
    main()
