"""Quick end-to-end check of the Python bindings.

Build first:  pip install --no-build-isolation -e crates/py
"""

import math

import zakai


def main():
    cfg = zakai.RunConfig(["simulate.steps=3000", "window.m=100", "window.n=40"])
    cfg.validate()
    assert zakai.RunConfig.from_toml(cfg.to_toml()) == cfg
    assert cfg.to_dict()["window"]["m"] == 100

    path = zakai.simulate(cfg)
    x = path["x"]
    assert len(x) == 3001 and len(path["theta"]) == 3001

    f = zakai.Filter(cfg)
    trace = f.run(x[:500])
    assert len(trace["post_mean"]) == 500
    dtheta = f.nodes()[1] - f.nodes()[0]
    assert abs(sum(trace["density"]) * dtheta - 1.0) < 1e-9

    contexts, targets = zakai.sliding_windows(x, 100, 40, 100)
    train, val, test = zakai.chrono_split(len(contexts), 0.6, 0.2)
    ens = f.forecast([contexts[i] for i in test], 40, samples=50, seed=7)
    again = f.forecast([contexts[i] for i in test], 40, samples=50, seed=7)
    assert ens == again
    report = zakai.evaluate(ens, [targets[i] for i in test])
    assert 0.0 <= report["Cov90"] <= 1.0 and report["CRPS"] > 0.0

    assert zakai.crps_ensemble([1.0], 3.0) == 2.0
    r = zakai.preprocess_log_relative([100.0, 110.0])
    assert abs(r[1] - math.log(1.1)) < 1e-15
    ts, vals, filled = zakai.resample_last([60.0 * i for i in range(10)], list(range(1, 11)), 600.0)
    assert vals == [10.0] and filled == 0

    fitted = zakai.fit(cfg.with_overrides(["train.epochs=1", 'train.grad_mode="analytic"']),
                       [contexts[i] + targets[i][:] for i in train[:3]])
    assert fitted["decoder"]["family"] == "linear"
    zakai.Filter(cfg, fitted["decoder_json"])

    norm = zakai.check_norm_stability(100, 1)
    assert norm["pass"]

    try:
        zakai.preprocess_log_relative([1.0, -1.0])
    except ValueError as e:
        assert "non-positive" in str(e)
    else:
        raise AssertionError("expected ValueError")

    print("python smoke test ok:", zakai.__version__, report)


if __name__ == "__main__":
    main()
