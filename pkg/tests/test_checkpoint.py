import numpy as np
import pytest
import torch

from dpr.checkpoint import (
    CHECKPOINT_SCHEMA_VERSION,
    load_module,
    load_optimizer,
    load_tensors,
    module_tensors,
    optimizer_tensors,
    save_tensors,
)


class TestTensorArchive:
    def test_round_trip_values_and_meta(self, tmp_path, rng):
        tensors = {
            "a": rng.standard_normal((3, 4)).astype(np.float32),
            "b": rng.integers(0, 10, 5).astype(np.int64),
            "c": np.float32(0.25).reshape(()),
        }
        meta = {"epoch": 7, "note": "x"}
        path = save_tensors(tmp_path / "ckpt.dpr", tensors, meta)
        loaded, loaded_meta = load_tensors(path)
        assert loaded_meta == meta
        assert set(loaded) == set(tensors)
        for name in tensors:
            np.testing.assert_array_equal(loaded[name], tensors[name])
            assert loaded[name].dtype == tensors[name].dtype

    def test_identical_saves_are_byte_identical(self, tmp_path, rng):
        tensors = {"w": rng.standard_normal((8, 8)).astype(np.float32)}
        p1 = save_tensors(tmp_path / "a.dpr", tensors, {"epoch": 0})
        p2 = save_tensors(tmp_path / "b.dpr", tensors, {"epoch": 0})
        assert p1.read_bytes() == p2.read_bytes()

    def test_unsupported_dtype_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="dtype"):
            save_tensors(tmp_path / "x.dpr", {"t": np.zeros(3, dtype=np.uint8)})

    def test_schema_version_checked(self, tmp_path):
        import json
        import zipfile

        path = tmp_path / "old.dpr"
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("manifest.json", json.dumps(
                {"schema_version": CHECKPOINT_SCHEMA_VERSION + 1, "meta": {}, "tensors": []}
            ))
        with pytest.raises(ValueError, match="schema"):
            load_tensors(path)


class TestModuleRoundTrip:
    def test_module_state_restored_exactly(self, tmp_path):
        torch.manual_seed(0)
        src = torch.nn.Sequential(torch.nn.Linear(4, 8), torch.nn.BatchNorm1d(8))
        src(torch.randn(16, 4))  # advance batch-norm running stats
        path = save_tensors(tmp_path / "m.dpr", module_tensors(src, "model"))

        torch.manual_seed(1)
        dst = torch.nn.Sequential(torch.nn.Linear(4, 8), torch.nn.BatchNorm1d(8))
        tensors, _ = load_tensors(path)
        load_module(dst, tensors, "model")
        for (n1, t1), (n2, t2) in zip(src.state_dict().items(), dst.state_dict().items()):
            assert n1 == n2
            assert torch.equal(t1, t2)

    def test_missing_tensor_named_in_error(self, tmp_path):
        module = torch.nn.Linear(2, 2)
        with pytest.raises(KeyError, match="model/weight"):
            load_module(module, {}, "model")


class TestOptimizerRoundTrip:
    def test_adamw_state_restored(self):
        torch.manual_seed(0)
        model = torch.nn.Linear(3, 3)
        opt = torch.optim.AdamW(model.parameters(), lr=1e-2)
        for _ in range(3):
            opt.zero_grad()
            model(torch.randn(4, 3)).sum().backward()
            opt.step()
        tensors, steps = optimizer_tensors(opt)

        torch.manual_seed(0)
        model2 = torch.nn.Linear(3, 3)
        opt2 = torch.optim.AdamW(model2.parameters(), lr=1e-2)
        load_optimizer(opt2, tensors, steps)

        for p, q in zip(model.parameters(), model2.parameters()):
            s1, s2 = opt.state[p], opt2.state[q]
            assert set(s1) == set(s2)
            for key in s1:
                assert torch.allclose(torch.as_tensor(s1[key], dtype=torch.float64),
                                      torch.as_tensor(s2[key], dtype=torch.float64))

    def test_restored_optimizer_takes_identical_step(self):
        def run(load_state):
            torch.manual_seed(0)
            model = torch.nn.Linear(3, 2)
            opt = torch.optim.AdamW(model.parameters(), lr=1e-2)
            if load_state is not None:
                load_optimizer(opt, *load_state)
            else:
                for _ in range(2):
                    opt.zero_grad()
                    model(torch.ones(1, 3)).sum().backward()
                    opt.step()
            opt.zero_grad()
            model(torch.ones(1, 3)).sum().backward()
            opt.step()
            return [p.detach().clone() for p in model.parameters()], optimizer_tensors(opt)

        # run A: two warmup steps then one more; run B: restore after the warmup
        torch.manual_seed(0)
        model = torch.nn.Linear(3, 2)
        opt = torch.optim.AdamW(model.parameters(), lr=1e-2)
        for _ in range(2):
            opt.zero_grad()
            model(torch.ones(1, 3)).sum().backward()
            opt.step()
        state = optimizer_tensors(opt)
        params_a, _ = run(None)
        # restore weights too so the gradient matches
        torch.manual_seed(0)
        model_b = torch.nn.Linear(3, 2)
        with torch.no_grad():
            for p, q in zip(model_b.parameters(), model.parameters()):
                p.copy_(q)
        opt_b = torch.optim.AdamW(model_b.parameters(), lr=1e-2)
        load_optimizer(opt_b, *state)
        opt_b.zero_grad()
        model_b(torch.ones(1, 3)).sum().backward()
        opt_b.step()
        for p, q in zip(params_a, model_b.parameters()):
            assert torch.equal(p, q)
