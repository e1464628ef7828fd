"""Smoke test for the kamoe_rs extension module.

Build and install first:
    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/kamoe_rs-*.whl
"""

import os
import random
import tempfile

import kamoe_rs


def main():
    rng = random.Random(0)
    x = [[rng.uniform(-1, 1) for _ in range(8)] for _ in range(5)]

    std = kamoe_rs.Model("mlp", "standard", input_dim=8, hidden=100, seed=1)
    assert std.parameter_count == 1001, std.parameter_count
    assert len(std.predict(x)) == 5

    kamoe = kamoe_rs.Model("mlp", "kamoe", input_dim=8, hidden=16, experts=3, seed=1)
    moe = kamoe_rs.Model("mlp", "moe", input_dim=8, hidden=16, experts=3, seed=1)
    gates = kamoe.gate_weights(x)
    assert len(gates) == 5 and all(len(g) == 3 and all(0 < a < 1 for a in g) for g in gates)
    diff = kamoe.structural_diff(moe)
    assert diff and all(p.endswith("gating/0:grkan") for p in diff), diff

    lstm = kamoe_rs.Model("lstm", "kamoe", input_dim=3, hidden=8, output_dim=3, seq_len=12, seed=2)
    windows = [[[rng.random() for _ in range(3)] for _ in range(12)] for _ in range(4)]
    out = lstm.predict_sequences(windows)
    assert len(out) == 4 and len(out[0]) == 3

    for b in kamoe_rs.bspline_basis([rng.uniform(-1, 1) for _ in range(100)]):
        assert abs(sum(b) - 1.0) < 1e-10

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.json")
        kamoe.save(path)
        again = kamoe_rs.Model.load(path)
        assert again.predict(x) == kamoe.predict(x)

    metrics = kamoe_rs.train(
        '{"task": "housing", "variant": "standard", "kind": "mlp", "hidden": 8, "train": {"epochs": 20}}'
    )
    assert metrics["final_train_loss"] < metrics["initial_train_loss"] and metrics["r2"] > 0.5, metrics

    try:
        kamoe_rs.Model("mlp", "mystery", input_dim=8, hidden=4)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown variant accepted")

    print("kamoe_rs smoke test passed:", std, kamoe)


if __name__ == "__main__":
    main()
