"""Smoke test for the carp Python bindings.

Uses an installed `carp` module if there is one (`maturin develop` in
crates/py), otherwise loads target/release/libcarp_py.so built by
`cargo build --release -p carp-py`.
"""

import importlib.machinery
import importlib.util
import json
import math
import pathlib
import sys
import tempfile


def load_carp():
    try:
        import carp

        return carp
    except ImportError:
        pass
    root = pathlib.Path(__file__).resolve().parent.parent
    for name in ("libcarp_py.so", "libcarp_py.dylib", "carp_py.dll"):
        lib = root / "target" / "release" / name
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("carp", str(lib))
            spec = importlib.util.spec_from_file_location("carp", lib, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            sys.modules["carp"] = module
            return module
    sys.exit("carp extension not found; run `cargo build --release -p carp-py` first")


def main():
    carp = load_carp()

    a = carp.Tensor([2, 3], [1, 2, 3, 4, 5, 6])
    b = carp.Tensor([3, 1], [1, 0, -1])
    assert a.matmul(b).tolist() == [-2.0, -2.0]
    p = carp.Tensor([1, 3], [0.0, 0.0, math.log(2.0)]).softmax().tolist()
    assert abs(p[2] - 0.5) < 1e-6 and abs(sum(p) - 1.0) < 1e-6

    codebook = carp.Tensor([3, 2], [1, 0, 0, 1, -1, 0])
    queries = carp.Tensor([2, 2], [0.1, 5.0, -3.0, 0.2])
    assert carp.nearest_codes(codebook, queries) == [1, 2]

    env = carp.Env("reach", seed=3)
    obs = env.observe()
    assert len(obs) == 4
    obs, done, success = env.step([0.05, 0.0])
    assert env.steps == 1 and not done

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        data, tok, pol = tmp / "demos.jsonl", tmp / "tok.ckpt", tmp / "pol.ckpt"
        assert carp.generate_demos("reach", 8, str(data), seed=1) == 8
        report = json.loads(
            carp.train_tokenizer(str(data), str(tok), seed=1, config="epochs=2,k_scales=2,codebook_size=16")
        )
        assert report["stage"] == "tokenizer"

        tokenizer = carp.Tokenizer(str(tok))
        assert tokenizer.scale_lens == [1, 2]
        chunk = [[0.05 * math.cos(t / 3), 0.02] for t in range(tokenizer.horizon)]
        tokens = tokenizer.tokenize(chunk)
        assert [len(t) for t in tokens[0]] == [1, 2]
        recon = tokenizer.decode(tokens)
        assert len(recon) == tokenizer.horizon and len(recon[0]) == 2

        carp.train_policy(str(data), str(tok), str(pol), seed=1, config="epochs=1,width=16,layers=1,heads=2")
        policy = carp.Policy(str(pol))
        window = obs * policy.obs_steps
        plan = policy.predict(window, sampler="topk:3", seed=4)
        assert len(plan) == tokenizer.horizon
        metrics = json.loads(policy.evaluate("reach", episodes=2, seed=5))
        assert 0.0 <= metrics["success_rate"] <= 1.0

    print("python smoke test passed")


if __name__ == "__main__":
    main()
