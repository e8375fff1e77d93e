import numpy as np
import pytest

from invlab.data import synth_blobs
from invlab.models import build_classifier, build_decoder, eval_widths
from invlab.train import (
    CheckpointFormatError,
    ConfigError,
    TrainConfig,
    accuracy,
    checkpoint_bytes,
    finetune_first_layers,
    finetune_stage2,
    load_checkpoint,
    pretrain_stage1,
    save_checkpoint,
    train_eval_model,
    train_prior_decoder,
)

WIDTHS = [16, 12, 10, 8, 3]


def param_bytes(graph):
    return [p.data.tobytes() for p in graph.params()]


def layer_bytes(graph, i):
    return (graph.layers[i].weight.data.tobytes(), graph.layers[i].bias.data.tobytes())


@pytest.fixture(scope="module")
def pretrained(blob_bundle):
    cfg = TrainConfig(epochs=5, batch_size=16, learning_rate=0.05, seed=0, checkpoint_epochs=[5])
    return pretrain_stage1(build_classifier(WIDTHS, 0), blob_bundle.pretrain, cfg).graph


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kw", [{"learning_rate": -1}, {"momentum": 1.0}, {"momentum": -0.1}, {"weight_decay": -1e-3}, {"batch_size": 0}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"epochs": 1, "lr": 0.1})


class TestPretrain:
    def test_zero_lr_leaves_parameters(self, blob_bundle):
        g = build_classifier(WIDTHS, 0)
        res = pretrain_stage1(g, blob_bundle.pretrain, TrainConfig(epochs=1, learning_rate=0.0))
        assert param_bytes(res.graph) == param_bytes(g)

    def test_blobs_reach_95_percent(self):
        data = synth_blobs(5, 40, 16, 0.25, 0.08, seed=1)
        cfg = TrainConfig(epochs=20, batch_size=16, learning_rate=0.05, seed=0)
        res = pretrain_stage1(build_classifier([16, 16, 5], 0), data, cfg)
        assert accuracy(res.graph, data) >= 95.0
        assert res.epoch_losses[-1] < res.epoch_losses[0]

    def test_deterministic(self, blob_bundle):
        cfg = TrainConfig(epochs=3, batch_size=16, seed=4)
        a = pretrain_stage1(build_classifier(WIDTHS, 0), blob_bundle.pretrain, cfg)
        b = pretrain_stage1(build_classifier(WIDTHS, 0), blob_bundle.pretrain, cfg)
        assert checkpoint_bytes(a.graph, a.checkpoints[3].meta) == checkpoint_bytes(b.graph, b.checkpoints[3].meta)

    def test_checkpoints_at_requested_epochs(self, blob_bundle):
        cfg = TrainConfig(epochs=4, batch_size=16, checkpoint_epochs=[1, 3])
        res = pretrain_stage1(build_classifier(WIDTHS, 0), blob_bundle.pretrain, cfg)
        assert sorted(res.checkpoints) == [1, 3, 4]
        assert res.checkpoints[3].meta["stage"] == "pretrain"
        assert len(res.epoch_flops) == 4 and res.epoch_flops[-1] == res.grad_flops

    def test_class_count_mismatch(self, blob_bundle):
        with pytest.raises(ConfigError):
            pretrain_stage1(build_classifier([16, 8, 4], 0), blob_bundle.pretrain, TrainConfig(epochs=1))

    def test_does_not_mutate_input(self, blob_bundle):
        g = build_classifier(WIDTHS, 0)
        before = param_bytes(g)
        pretrain_stage1(g, blob_bundle.pretrain, TrainConfig(epochs=1))
        assert param_bytes(g) == before


class TestFinetuneStage2:
    @pytest.mark.parametrize("boundary", [1, 2, 3])
    def test_frozen_prefix_bitwise_identical(self, pretrained, blob_bundle, boundary):
        res = finetune_stage2(pretrained, boundary, blob_bundle.priv, TrainConfig(epochs=2, batch_size=16))
        for i in range(len(WIDTHS) - 1):
            same = layer_bytes(res.graph, i) == layer_bytes(pretrained, i)
            assert same == (i < boundary)

    def test_boundary_zero_updates_everything(self, pretrained, blob_bundle):
        res = finetune_stage2(pretrained, 0, blob_bundle.priv, TrainConfig(epochs=1, batch_size=16))
        assert all(layer_bytes(res.graph, i) != layer_bytes(pretrained, i) for i in range(4))

    def test_last_boundary_zero_lr_changes_nothing(self, pretrained, blob_bundle):
        res = finetune_stage2(pretrained, 3, blob_bundle.priv, TrainConfig(epochs=1, learning_rate=0.0))
        assert param_bytes(res.graph) == param_bytes(pretrained)

    def test_more_freezing_never_costs_more_flops(self, pretrained, blob_bundle):
        cfg = TrainConfig(epochs=1, batch_size=16)
        flops = [finetune_stage2(pretrained, b, blob_bundle.priv, cfg).grad_flops for b in range(5)]
        assert flops == sorted(flops, reverse=True)
        assert flops[-1] == 0

    def test_head_resize_reinitialises_head(self, pretrained):
        data = synth_blobs(5, 10, 16, 0.25, 0.08, seed=2)
        res = finetune_stage2(pretrained, 3, data, TrainConfig(epochs=1, learning_rate=0.0))
        assert res.graph.output_dim == 5
        assert layer_bytes(res.graph, 2) == layer_bytes(pretrained, 2)

    def test_resize_with_everything_frozen(self, pretrained):
        data = synth_blobs(5, 10, 16, 0.25, 0.08, seed=2)
        with pytest.raises(ConfigError):
            finetune_stage2(pretrained, 4, data, TrainConfig(epochs=1))

    def test_boundary_out_of_range(self, pretrained, blob_bundle):
        with pytest.raises(ConfigError):
            finetune_stage2(pretrained, 5, blob_bundle.priv, TrainConfig(epochs=1))


class TestFinetuneFirstLayers:
    def test_middle_layers_untouched(self, pretrained, blob_bundle):
        res = finetune_first_layers(pretrained, 1, blob_bundle.priv, TrainConfig(epochs=2, batch_size=16))
        assert layer_bytes(res.graph, 0) != layer_bytes(pretrained, 0)
        assert layer_bytes(res.graph, 1) == layer_bytes(pretrained, 1)
        assert layer_bytes(res.graph, 2) == layer_bytes(pretrained, 2)
        assert layer_bytes(res.graph, 3) != layer_bytes(pretrained, 3)

    def test_frozen_head(self, pretrained, blob_bundle):
        res = finetune_first_layers(pretrained, 2, blob_bundle.priv, TrainConfig(epochs=1), head="frozen")
        assert layer_bytes(res.graph, 3) == layer_bytes(pretrained, 3)
        assert res.trainable == sum(a * b + b for a, b in zip(WIDTHS[:2], WIDTHS[1:3]))

    def test_all_but_head_matches_full_finetune(self, pretrained, blob_bundle):
        cfg = TrainConfig(epochs=3, batch_size=16, seed=2)
        a = finetune_first_layers(pretrained, len(WIDTHS) - 2, blob_bundle.priv, cfg)
        b = finetune_stage2(pretrained, 0, blob_bundle.priv, cfg)
        assert abs(a.epoch_losses[-1] - b.epoch_losses[-1]) <= 1e-6

    def test_zero_lr_changes_only_resized_head(self, pretrained):
        data = synth_blobs(4, 10, 16, 0.25, 0.08, seed=2)
        res = finetune_first_layers(pretrained, 1, data, TrainConfig(epochs=1, learning_rate=0.0))
        assert all(layer_bytes(res.graph, i) == layer_bytes(pretrained, i) for i in range(3))
        assert res.graph.output_dim == 4

    @pytest.mark.parametrize("k", [0, 4])
    def test_k_out_of_range(self, pretrained, blob_bundle, k):
        with pytest.raises(ConfigError):
            finetune_first_layers(pretrained, k, blob_bundle.priv, TrainConfig(epochs=1))


class TestPriorDecoder:
    def test_overfits_one_image(self, blobs):
        one = blobs.subset([0])
        dec = build_decoder(4, [32], blobs.dim, seed=0)
        cfg = TrainConfig(epochs=400, batch_size=1, learning_rate=0.05, weight_decay=0.0)
        res, enc = train_prior_decoder(dec, one, cfg, latent_penalty=0.0)
        recon = res.graph.forward(enc.forward(one.images)).data
        assert float(np.mean((recon - one.images) ** 2)) <= 1e-3

    def test_zero_lr_leaves_decoder(self, blobs):
        dec = build_decoder(4, [8], blobs.dim, seed=0)
        res, _ = train_prior_decoder(dec, blobs, TrainConfig(epochs=1, learning_rate=0.0), latent_penalty=0.1)
        assert param_bytes(res.graph) == param_bytes(dec)

    def test_negative_penalty(self, blobs):
        with pytest.raises(ConfigError):
            train_prior_decoder(build_decoder(4, [8], blobs.dim, 0), blobs, TrainConfig(epochs=1), latent_penalty=-1)


class TestEvalModel:
    def test_same_arch_as_target_rejected(self, blob_bundle):
        target = build_classifier(WIDTHS, 0)
        with pytest.raises(ConfigError):
            train_eval_model(blob_bundle.priv_full, WIDTHS, TrainConfig(epochs=1), target_arch_id=target.arch_id)

    def test_deterministic(self, blob_bundle):
        cfg = TrainConfig(epochs=2, batch_size=16, seed=5)
        w = eval_widths(WIDTHS)
        a = train_eval_model(blob_bundle.priv_full, w, cfg)
        b = train_eval_model(blob_bundle.priv_full, w, cfg)
        assert param_bytes(a.graph) == param_bytes(b.graph)

    def test_untrained_is_near_chance(self):
        data = synth_blobs(4, 200, 16, 0.25, 0.08, seed=6)
        res = train_eval_model(data, [16, 4], TrainConfig(epochs=1, learning_rate=0.0))
        # a linear head with zero bias and symmetric init predicts near-uniformly
        assert abs(accuracy(res.graph, data) - 25.0) <= 25.0

    def test_eval_at_least_as_accurate_as_target(self, blob_bundle, pretrained):
        cfg = TrainConfig(epochs=20, batch_size=16, learning_rate=0.05)
        target = finetune_stage2(pretrained, 2, blob_bundle.priv, cfg).graph
        ev = train_eval_model(blob_bundle.priv_full, eval_widths(WIDTHS), cfg, target_arch_id=target.arch_id)
        assert accuracy(ev.graph, blob_bundle.priv_val) >= accuracy(target, blob_bundle.priv_val)


class TestCheckpoint:
    @pytest.fixture
    def saved(self, tmp_path, pretrained):
        meta = {"arch_id": pretrained.arch_id, "stage": "pretrain", "epoch": 5, "seed": 0, "dataset": "x"}
        return save_checkpoint(pretrained, meta, tmp_path / "m.ckpt")

    def test_round_trip_bit_exact(self, saved, tmp_path, pretrained):
        graph, meta = load_checkpoint(saved)
        assert param_bytes(graph) == param_bytes(pretrained)
        again = save_checkpoint(graph, meta, tmp_path / "again.ckpt")
        assert again.read_bytes() == saved.read_bytes()

    def test_header_layout(self, saved, pretrained):
        raw = saved.read_bytes()
        assert raw[:5] == b"TLDM\x01"
        n_meta = int.from_bytes(raw[5:9], "little")
        assert len(raw) == 9 + n_meta + 4 * pretrained.n_params()

    def test_bad_magic(self, saved):
        saved.write_bytes(b"XXXX" + saved.read_bytes()[4:])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(saved)

    def test_bad_version(self, saved):
        raw = bytearray(saved.read_bytes())
        raw[4] = 9
        saved.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(saved)

    def test_truncated_payload(self, saved):
        saved.write_bytes(saved.read_bytes()[:-4])
        with pytest.raises(OSError):
            load_checkpoint(saved)

    def test_unknown_stage(self, tmp_path, pretrained):
        with pytest.raises(CheckpointFormatError):
            save_checkpoint(pretrained, {"arch_id": "a", "stage": "other"}, tmp_path / "x.ckpt")
