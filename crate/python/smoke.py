"""Smoke test for the pytabletop extension.

Build and install first:
    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist && pip install dist/pytabletop-*.whl
"""
import sys
import tempfile

import pytabletop as tt


def main() -> int:
    assert tt.partial_credit(3, 5) == 60.0
    assert "put-blocks-in-bowls" in tt.task_names()

    env = tt.Env("put-blocks-in-bowls", "seen", 0)
    obs = env.observation()
    assert len(obs["color"]) == obs["height"] * obs["width"] * 3
    while not env.done:
        pick, place = env.expert_action()
        env.step(pick, place)
    assert env.score == 100.0, env.score
    print(f"expert: {env.steps} steps, score {env.score}")

    try:
        tt.Env("no-such-task", "seen", 0)
    except ValueError as e:
        print(f"rejected unknown task: {e}")
    else:
        raise AssertionError("unknown task accepted")

    with tempfile.TemporaryDirectory() as d:
        n = tt.generate_demos(f"{d}/demos", "put-blocks-in-bowls", "seen", 2)
        model, losses = tt.train([f"{d}/demos"], "spatial-only", iterations=3)
        assert n == 2 and len(losses) == 3
        model.save(f"{d}/m.ckpt")
        again = tt.Model.load(f"{d}/m.ckpt")
        env = tt.Env("put-blocks-in-bowls", "seen", tt.EVAL_SEED_BASE)
        assert model.act(env) == again.act(env)
        mean, scores = again.evaluate("put-blocks-in-bowls", "seen", episodes=2)
        print(f"3-step model: mean {mean:.1f} over {len(scores)} episodes")
    print("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
