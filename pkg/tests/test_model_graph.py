import pytest
import torch
from torch import nn

from graftkit.backbones import build_backbone, default_split, split_variants
from graftkit.checkpoints import load_backbone, load_checkpoint, save_backbone, save_checkpoint
from graftkit.errors import GraftkitError, ShapeMismatchError, SplitError
from graftkit.losses import LossWeights
from graftkit.model_graph import (
    BlockChain,
    GraftedModel,
    SplitSpec,
    build_grafted_frontend,
    clone_frontend,
    count_params,
    graft,
    split,
)

LENET_BLOCK_PARAMS = [156, 4832, 51264, 5460, 850]


def _five_block_chain():
    return BlockChain([nn.Linear(4, 4) for _ in range(5)], input_shape=(4,))


class TestSplit:
    def test_partition_sizes(self):
        front, mid, last = split(_five_block_chain(), SplitSpec(2, 4))
        assert (len(front), len(mid), len(last)) == (2, 2, 1)

    def test_empty_front_end_rejected(self):
        with pytest.raises(SplitError) as info:
            split(_five_block_chain(), SplitSpec(0, 2))
        assert info.value.index == 0

    def test_index_past_end_names_the_index(self):
        with pytest.raises(SplitError) as info:
            split(_five_block_chain(), SplitSpec(2, 6))
        assert info.value.index == 6
        assert isinstance(info.value, IndexError)

    def test_mid_before_front_rejected(self):
        with pytest.raises(SplitError):
            SplitSpec(3, 2).validate(5)

    def test_recomposition_reproduces_every_variant(self, lenet):
        x = torch.randn(100, 1, 28, 28, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            reference = lenet(x)
            for spec in split_variants(lenet):
                front, mid, last = split(lenet, spec)
                recomposed = last(mid(front(x)))
                assert (recomposed - reference).abs().max().item() <= 1e-6, spec

    def test_parts_share_modules(self, lenet):
        front, _, _ = split(lenet, default_split(lenet))
        assert front.blocks[0] is lenet.blocks[0]

    def test_input_shapes_propagate(self, lenet):
        front, mid, last = split(lenet, SplitSpec(2, 3))
        assert front.input_shape == (1, 28, 28)
        assert mid.input_shape == (32, 5, 5)
        assert last.input_shape == (120,)


class TestCountParams:
    def test_empty_chain(self):
        assert count_params(BlockChain([])).count == 0

    def test_single_conv(self):
        chain = BlockChain([nn.Conv2d(1, 6, kernel_size=5)])
        assert count_params(chain).count == 5 * 5 * 1 * 6 + 6

    def test_lenet_blocks_sum_to_total(self, lenet):
        assert lenet.param_counts() == LENET_BLOCK_PARAMS
        assert count_params(lenet).count == sum(LENET_BLOCK_PARAMS) == 62562

    def test_front_end_fraction(self, lenet):
        front, _, _ = split(lenet, SplitSpec(2, 3))
        result = count_params(front, total=count_params(lenet).count)
        assert result.count == 4988
        assert result.fraction == pytest.approx(4988 / 62562)


class TestBuildGraftedFrontend:
    def test_rechannels_first_conv_only(self, lenet):
        front, _, _ = split(lenet, SplitSpec(2, 3))
        gn_front = build_grafted_frontend(front, in_channels=3, seed=0)
        assert gn_front.blocks[0][0].weight.shape == (6, 3, 5, 5)
        assert gn_front.blocks[1][0].weight.shape == front.blocks[1][0].weight.shape
        assert gn_front.output_shape() == front.output_shape()

    def test_same_seed_same_parameters(self, lenet):
        front, _, _ = split(lenet, SplitSpec(2, 3))
        a = build_grafted_frontend(front, 3, seed=5)
        b = build_grafted_frontend(front, 3, seed=5)
        c = build_grafted_frontend(front, 3, seed=6)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        assert not all(torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))

    def test_template_untouched(self, lenet):
        front, _, _ = split(lenet, SplitSpec(2, 3))
        before = [p.clone() for p in front.parameters()]
        build_grafted_frontend(front, 3, seed=0)
        assert all(torch.equal(a, b) for a, b in zip(before, front.parameters()))

    @pytest.mark.parametrize("channels", [0, -1])
    def test_bad_channel_count(self, lenet, channels):
        front, _, _ = split(lenet, SplitSpec(2, 3))
        with pytest.raises(GraftkitError):
            build_grafted_frontend(front, channels)


class TestGraft:
    def test_identity_graft_matches_pretrained(self, lenet):
        front, mid, last = split(lenet, SplitSpec(2, 3))
        model = graft(clone_frontend(front), mid, last)
        x = torch.rand(4, 1, 28, 28)
        with torch.no_grad():
            assert torch.equal(model(x), lenet(x))

    def test_trainable_count_equals_front_end(self, lenet):
        front, mid, last = split(lenet, SplitSpec(2, 3))
        gn_front = build_grafted_frontend(front, 3)
        model = graft(gn_front, mid, last)
        assert model.trainable_param_count() == count_params(gn_front).count
        assert all(not p.requires_grad for p in model.mid.parameters())
        assert all(not p.requires_grad for p in model.last.parameters())

    def test_step_leaves_frozen_parts_untouched(self, lenet):
        front, mid, last = split(lenet, SplitSpec(2, 3))
        model = graft(build_grafted_frontend(front, 3), mid, last)
        frozen = {k: v.clone() for k, v in {**model.mid.state_dict(), **model.last.state_dict()}.items()}
        optimizer = torch.optim.Adam(model.trainable_parameters(), lr=1e-2)
        model.train()
        model(torch.rand(4, 3, 28, 28)).sum().backward()
        optimizer.step()
        after = {**model.mid.state_dict(), **model.last.state_dict()}
        assert all(torch.equal(frozen[k], after[k]) for k in frozen)

    def test_train_mode_keeps_frozen_parts_in_eval(self, lenet):
        front, mid, last = split(lenet, SplitSpec(2, 3))
        model = graft(clone_frontend(front), mid, last).train()
        assert model.gn_front.training
        assert not model.mid.training and not model.last.training

    def test_mismatched_front_end_shape(self, lenet):
        _, mid, last = split(lenet, SplitSpec(2, 3))
        wrong, _, _ = split(build_backbone(input_size=32), SplitSpec(2, 3))
        with pytest.raises(ShapeMismatchError):
            graft(wrong, mid, last)

    def test_front_end_without_input_shape_rejected(self, lenet):
        front, mid, last = split(lenet, SplitSpec(2, 3))
        shapeless = BlockChain(list(clone_frontend(front).blocks))
        with pytest.raises(ShapeMismatchError):
            graft(shapeless, mid, last)

    def test_training_input_check(self, lenet):
        front, mid, last = split(lenet, SplitSpec(2, 3))
        model = graft(clone_frontend(front), mid, last)
        assert model.check_training_input((1, 28, 28)) == (32, 5, 5)
        with pytest.raises(ShapeMismatchError):
            model.check_training_input((1, 24, 24))
        with pytest.raises(ShapeMismatchError):
            model.check_training_input((1, 4, 4))

    def test_grafted_model_holds_copies(self, lenet):
        front, mid, last = split(lenet, SplitSpec(2, 3))
        model = graft(clone_frontend(front), mid, last)
        assert isinstance(model, GraftedModel)
        assert model.mid.blocks[0] is not lenet.blocks[2]


class TestBackbones:
    def test_split_variants(self, lenet):
        assert [s.as_tuple() for s in split_variants(lenet)] == [(1, 2), (1, 3), (2, 3), (2, 4), (3, 4), (3, 5)]

    def test_deeper_front_never_fewer_parameters(self, lenet):
        counts = [count_params(split(lenet, s)[0]).count for s in split_variants(lenet)]
        assert counts == sorted(counts)

    def test_unknown_backbone(self):
        with pytest.raises(GraftkitError):
            build_backbone("resnet")


class TestCheckpoints:
    def test_backbone_round_trip(self, lenet, tmp_path):
        path = save_backbone(lenet, tmp_path / "lenet.pt")
        restored = load_backbone(path)
        x = torch.rand(2, 1, 28, 28)
        with torch.no_grad():
            assert torch.equal(restored(x), lenet(x))

    def test_grafted_round_trip(self, lenet, tmp_path):
        front, mid, last = split(lenet, SplitSpec(2, 3))
        model = graft(build_grafted_frontend(front, 3, seed=1), mid, last).eval()
        path = save_checkpoint(tmp_path / "g.pt", model, SplitSpec(2, 3), LossWeights(), lenet.meta, {"epoch": 4})
        restored, spec, weights, blob = load_checkpoint(path)
        x = torch.rand(2, 3, 28, 28)
        with torch.no_grad():
            assert torch.equal(restored(x), model(x))
        assert spec == SplitSpec(2, 3)
        assert weights == LossWeights()
        assert blob["extra"] == {"epoch": 4}

    def test_unknown_format_version(self, lenet, tmp_path):
        path = tmp_path / "old.pt"
        torch.save({"format_version": 0}, path)
        with pytest.raises(GraftkitError):
            load_backbone(path)
