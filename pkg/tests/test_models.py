import zipfile

import numpy as np
import pytest
import torch

from cycada.errors import FrozenModelError, IntegrityError
from cycada.models import (
    ArchitectureSpec,
    ModelHandle,
    build_feature_discriminator,
    build_generator,
    build_image_discriminator,
    build_module,
    build_task_net,
    build_toy_seg_net,
    checkpoint_hash,
    load_checkpoint,
    save_checkpoint,
)

from fd import fd_gradient, relative_error


def _image_batch(shape, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=gen) * 2 - 1


class TestTaskNet:
    def test_shape_contract_mnist_size(self):
        handle = build_task_net((1, 28, 28), 10)
        logits = handle(_image_batch((4, 1, 28, 28)))
        assert logits.shape == (4, 10)

    def test_shape_contract_rgb_32(self):
        handle = build_task_net((3, 32, 32), 10)
        assert handle(_image_batch((2, 3, 32, 32))).shape == (2, 10)

    def test_rejects_small_inputs(self):
        with pytest.raises(ValueError):
            build_task_net((1, 8, 8), 10)

    def test_seeded_init_is_bitwise_identical(self):
        a = build_task_net((1, 28, 28), 10, seed=7)
        b = build_task_net((1, 28, 28), 10, seed=7)
        assert a.state_bytes() == b.state_bytes()
        c = build_task_net((1, 28, 28), 10, seed=8)
        assert a.state_bytes() != c.state_bytes()

    def test_feature_layer_default_is_scores(self):
        handle = build_task_net((1, 28, 28), 10)
        x = _image_batch((3, 1, 28, 28))
        assert handle.features(x).shape == (3, 10)
        assert handle.feature_dim == 10

    def test_feature_layer_penultimate(self):
        handle = build_task_net((1, 28, 28), 10, feature_layer="penultimate")
        x = _image_batch((3, 1, 28, 28))
        assert handle.features(x).shape == (3, 500)
        assert handle.feature_dim == 500

    def test_eval_forward_is_deterministic_despite_dropout(self):
        handle = build_task_net((1, 28, 28), 10)
        x = _image_batch((2, 1, 28, 28))
        first = handle(x, train=False)
        second = handle(x, train=False)
        assert torch.equal(first, second)

    def test_train_mode_dropout_is_stochastic(self):
        handle = build_task_net((1, 28, 28), 10)
        x = _image_batch((2, 1, 28, 28))
        torch.manual_seed(0)
        first = handle(x, train=True)
        second = handle(x, train=True)
        assert not torch.equal(first, second)


class TestGenerator:
    def test_shape_and_range_contract(self):
        handle = build_generator(1, 32)
        out = handle(_image_batch((2, 1, 32, 32)))
        assert out.shape == (2, 1, 32, 32)
        assert float(out.min()) >= -1.0 and float(out.max()) <= 1.0

    def test_rejects_nonmultiple_of_four(self):
        with pytest.raises(ValueError):
            build_generator(1, 30)

    def test_identity_debug_is_tanh_passthrough(self):
        handle = build_generator(1, 16, identity_debug=True)
        x = _image_batch((2, 1, 16, 16))
        assert torch.allclose(handle(x), torch.tanh(x))

    def test_seeded_init_is_bitwise_identical(self):
        a = build_generator(1, 16, seed=3)
        b = build_generator(1, 16, seed=3)
        assert a.state_bytes() == b.state_bytes()

    def test_cycle_gradient_matches_finite_differences(self):
        # 4x4 toy generator: one conv into tanh, checked against central differences
        from cycada.losses import cycle_loss

        spec = ArchitectureSpec(
            role="generator",
            input_shape=(1, 4, 4),
            layers=[{"kind": "conv", "in": 1, "out": 1, "kernel": 3, "stride": 1,
                     "padding": 1, "act": "tanh"}],
        )
        module = build_module(spec).double()
        gen = torch.Generator().manual_seed(5)
        with torch.no_grad():
            for p in module.parameters():
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.3)
        x = _image_batch((2, 1, 4, 4), seed=1).double()
        weight = dict(module.named_parameters())["body.0.weight"]
        snapshot = weight.detach().clone()

        def rebuild():
            with torch.no_grad():
                weight.copy_(snapshot)
            return cycle_loss(x, module(x))

        loss = rebuild()
        (analytic,) = torch.autograd.grad(loss, weight)
        numeric = fd_gradient(rebuild, snapshot)
        assert relative_error(analytic, numeric) < 1e-4


class TestDiscriminators:
    def test_patch_output_shape(self):
        handle = build_image_discriminator(1, image_size=32)
        out = handle(_image_batch((2, 1, 32, 32)))
        assert out.shape[0] == 2 and out.shape[1] == 1
        assert out.shape[2] > 0 and out.shape[3] > 0

    def test_zero_input_gives_finite_scores(self):
        handle = build_image_discriminator(1, image_size=32)
        out = handle(torch.zeros(2, 1, 32, 32))
        assert torch.isfinite(out).all()

    def test_seeded_init_is_bitwise_identical(self):
        a = build_image_discriminator(3, image_size=32, seed=11)
        b = build_image_discriminator(3, image_size=32, seed=11)
        assert a.state_bytes() == b.state_bytes()

    def test_feature_discriminator_shape(self):
        handle = build_feature_discriminator(500)
        assert handle(torch.randn(8, 500)).shape == (8,)

    def test_feature_discriminator_finite_on_large_inputs(self):
        handle = build_feature_discriminator(16)
        out = handle(torch.full((4, 16), 1e4))
        assert torch.isfinite(out).all()

    def test_feature_discriminator_seeded(self):
        a = build_feature_discriminator(32, seed=2)
        b = build_feature_discriminator(32, seed=2)
        assert a.state_bytes() == b.state_bytes()

    def test_feature_discriminator_rejects_bad_dim(self):
        with pytest.raises(ValueError):
            build_feature_discriminator(0)


class TestToySegNet:
    def test_per_pixel_scores(self):
        handle = build_toy_seg_net((1, 16, 16), 3)
        out = handle(_image_batch((2, 1, 16, 16)))
        assert out.shape == (2, 3, 16, 16)


class TestFrozenHandles:
    def test_frozen_rejects_trainable_parameters(self):
        handle = build_task_net((1, 28, 28), 10).freeze()
        with pytest.raises(FrozenModelError):
            handle.trainable_parameters()

    def test_frozen_parameters_have_no_grad(self):
        handle = build_generator(1, 16).freeze()
        out = handle(_image_batch((1, 1, 16, 16)))
        assert all(not p.requires_grad for p in handle.module.parameters())
        assert not out.requires_grad

    def test_clone_is_independent(self):
        handle = build_task_net((1, 16, 16), 2)
        twin = handle.clone()
        with torch.no_grad():
            next(iter(twin.module.parameters())).add_(1.0)
        assert handle.state_bytes() != twin.state_bytes()


class TestCheckpoints:
    def test_round_trip_bitwise_forward(self, tmp_path):
        handle = build_task_net((1, 28, 28), 10, seed=42)
        path = tmp_path / "task.ckpt"
        save_checkpoint(handle, path)
        loaded = load_checkpoint(path)
        x = _image_batch((3, 1, 28, 28))
        assert torch.equal(handle(x), loaded(x))
        assert handle.state_bytes() == loaded.state_bytes()

    def test_generator_round_trip(self, tmp_path):
        handle = build_generator(1, 16, seed=9)
        path = tmp_path / "gen.ckpt"
        save_checkpoint(handle, path)
        loaded = load_checkpoint(path)
        x = _image_batch((2, 1, 16, 16))
        assert torch.equal(handle(x), loaded(x))

    def test_frozen_flag_survives(self, tmp_path):
        handle = build_task_net((1, 16, 16), 2).freeze()
        path = tmp_path / "frozen.ckpt"
        save_checkpoint(handle, path)
        assert load_checkpoint(path).frozen

    def test_truncated_file_is_integrity_error(self, tmp_path):
        handle = build_feature_discriminator(8)
        path = tmp_path / "d.ckpt"
        save_checkpoint(handle, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(IntegrityError):
            load_checkpoint(path)

    def test_corrupt_payload_is_integrity_error(self, tmp_path):
        handle = build_feature_discriminator(8)
        path = tmp_path / "d.ckpt"
        save_checkpoint(handle, path)
        with zipfile.ZipFile(path) as zf:
            meta = zf.read("meta.json")
            payload = bytearray(zf.read("payload.bin"))
        payload[3] ^= 0xFF
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("meta.json", meta)
            zf.writestr("payload.bin", bytes(payload))
        with pytest.raises(IntegrityError):
            load_checkpoint(path)

    def test_missing_file_is_integrity_error(self, tmp_path):
        with pytest.raises(IntegrityError):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_checkpoint_hash_tracks_parameters(self, tmp_path):
        a = build_feature_discriminator(8, seed=1)
        b = build_feature_discriminator(8, seed=2)
        path_a, path_b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, path_a)
        save_checkpoint(b, path_b)
        assert checkpoint_hash(path_a) != checkpoint_hash(path_b)


class TestSpecValidation:
    def test_incompatible_channel_chain_rejected(self):
        spec = ArchitectureSpec(
            role="generator",
            input_shape=(1, 8, 8),
            layers=[
                {"kind": "conv", "in": 2, "out": 4, "kernel": 3, "stride": 1,
                 "padding": 1, "act": "tanh"},
            ],
        )
        with pytest.raises(ValueError):
            build_module(spec)

    def test_generator_must_end_in_tanh(self):
        spec = ArchitectureSpec(
            role="generator",
            input_shape=(1, 8, 8),
            layers=[
                {"kind": "conv", "in": 1, "out": 1, "kernel": 3, "stride": 1,
                 "padding": 1, "act": "relu"},
            ],
        )
        with pytest.raises(ValueError):
            build_module(spec)

    def test_unknown_role_rejected(self):
        with pytest.raises(ValueError):
            ArchitectureSpec(role="mystery", input_shape=(1, 8, 8))

    def test_spec_round_trips_through_dict(self):
        handle = build_generator(1, 16)
        restored = ArchitectureSpec.from_dict(handle.spec.to_dict())
        assert restored.to_dict() == handle.spec.to_dict()
