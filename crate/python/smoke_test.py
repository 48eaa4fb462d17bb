"""Quick end-to-end check of the drdtr extension module."""

import json
import os
import tempfile

import drdtr


def main():
    sim = drdtr.simulate("dgp1", 400, 7)
    panel = sim.panel
    assert len(panel) == 400 and panel.num_stages == 2
    assert len(panel.history(2)[0]) == 22

    regime = drdtr.learn(panel, "dr", [1, 2], seed=1, trees=20)
    again = drdtr.learn(panel, "dr", [1, 2], seed=1, trees=20)
    assert regime.to_json() == again.to_json()
    assert drdtr.Regime.from_json(regime.to_json()).to_json() == regime.to_json()

    value, se = drdtr.aipw_welfare(panel, regime, seed=2, trees=20)
    print(f"aipw welfare {value:.3f} ({se:.3f}), true welfare {sim.true_welfare(regime):.3f}")

    tree, objective = drdtr.tree_search([[0, 1], [1, 0], [0, 1]], [[0.0], [1.0], [2.0]], 1)
    assert objective == 2.0, objective
    print("tree", json.loads(tree))

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "panel.csv")
        panel.write_csv(path)
        back = drdtr.Panel.load_csv(path, [2, 2], [20, 1], [False, True])
        assert back.actions(1) == panel.actions(1)

    lines = drdtr.benchmark("appendix_d", ["dr", "ipw"], 300, 2, seed=3, n_test=2000).splitlines()
    assert len(lines) == 2 * 2 + 2
    try:
        drdtr.simulate("nope", 10, 1)
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("unknown design accepted")
    print("ok")


if __name__ == "__main__":
    main()
