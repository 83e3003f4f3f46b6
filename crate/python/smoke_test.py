"""Smoke test for the kgqa extension module.

Build it first:
    cargo build -p kgqa-py --release --features extension-module
    cp target/release/libkgqa.so python/kgqa.so
"""
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import kgqa

GRAPH = """\
<http://www.wikidata.org/entity/Q1> <http://www.wikidata.org/prop/direct/P57> <http://www.wikidata.org/entity/Q2> .
<http://www.wikidata.org/entity/Q2> <http://www.w3.org/2000/01/rdf-schema#label> "Nolan"@en .
"""


def main():
    store = kgqa.TripleStore.from_ntriples(GRAPH)
    assert len(store) == 2
    res = store.query("SELECT ?d WHERE { wd:Q1 wdt:P57 ?d }")
    assert res["rows"][0][0]["value"] == "http://www.wikidata.org/entity/Q2", res

    try:
        store.query("SELECT ?d WHERE { wd:Q1 wdt:P57 ?d ")
        raise AssertionError("syntax error not raised")
    except ValueError:
        pass

    turn = kgqa.parse_agent_output("<think>t</think><answer>wd:Q2</answer>")
    assert turn["think"] == "t", turn

    env = kgqa.Environment(store, t_max=5)
    ep = env.episode("Who directed Q1?")
    assert not ep.step("<think>look</think><query>SELECT ?d WHERE { wd:Q1 wdt:P57 ?d }</query>")
    assert "<query_result>" in ep.state_text()
    assert ep.step("<think>done</think><answer>wd:Q2</answer>")
    assert ep.done and ep.final_answer == "wd:Q2"
    reward = ep.reward("wd:Q2")
    assert abs(reward["total"] - 1.46) < 1e-9, reward

    text = ep.serialize("")
    offsets = [(i, i + 1) for i in range(len(text))]
    mask = ep.loss_mask(offsets)
    assert len(mask) == len(text) and any(mask) and not all(mask)

    assert abs(kgqa.valid_reward(True, 0, 1) - 1.48) < 1e-12
    assert abs(kgqa.valid_reward(False, 2, 5) - 0.5) < 1e-12
    assert kgqa.compute_advantages([1.0, 1.0, 1.0]) == [0.0, 0.0, 0.0]
    chi2, p = kgqa.mcnemar(354, 130)
    assert round(chi2, 2) == 102.75 and p < 1e-20
    assert kgqa.mcnemar(0, 0) is None

    world, tasks = kgqa.toy_world(seed=7)
    assert len(world) > 0 and tasks
    curves, summary = kgqa.train_toy(steps=5)
    assert len(curves) == 6 and summary["steps"] == 5

    print("python smoke test ok")


if __name__ == "__main__":
    main()
