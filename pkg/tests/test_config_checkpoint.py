import numpy as np
import pytest

from gimp import checkpoint as ckpt
from gimp.config import PROFILES, TrainConfig, profile_config, rng_stream
from gimp.errors import ConfigError, DataError, MissingFileError
from gimp.model import GiMPModel
from gimp.training import (FinetuneState, finetune, make_finetune_optimizer, make_pretrain_optimizer,
                           pretrain)


def _strip(history):
    return [{k: v for k, v in r.items() if k != "seconds"} for r in history]


class TestConfig:
    def test_ini_round_trip(self):
        cfg = TrainConfig(d=16, lr=3e-5, use_mpm=False, seed=11)
        assert TrainConfig.from_ini(cfg.to_ini()) == cfg
        assert TrainConfig.from_ini(cfg.to_ini()).to_ini() == cfg.to_ini()

    def test_full_scale_profile_round_trip(self):
        cfg = profile_config("paper")
        assert cfg.window_len == 6000 and cfg.d == 512 and cfg.finetune_epochs == 70
        assert TrainConfig.from_ini(cfg.to_ini()) == cfg

    def test_desk_defaults(self):
        cfg = profile_config("desk")
        assert (cfg.window_len, cfg.mask_ratio, cfg.delta, cfg.lr) == (128, 0.5, 0.8, 1e-4)
        assert (cfg.pretrain_epochs, cfg.finetune_epochs, cfg.batch_size) == (10, 10, 8)

    def test_override_over_profile(self):
        cfg = TrainConfig.from_ini("[run]\nprofile = paper\n[train]\nwindow_len = 64\n")
        assert cfg.window_len == 64 and cfg.d == PROFILES["paper"]["d"]

    @pytest.mark.parametrize("text", [
        "[train]\nbogus = 1\n",
        "[train]\nwindow_len = many\n",
        "[train]\nuse_mpm = maybe\n",
        "[run]\nprofile = huge\n",
        "[model]\nd = 10\nheads = 4\n",
        "[train]\nmask_ratio = 1.0\n",
        "[train]\noptimizer = sgd\n",
        "not an ini",
    ])
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            TrainConfig.from_ini(text)

    def test_architecture_mismatch(self):
        TrainConfig().check_compatible(TrainConfig(lr=1.0, seed=3))
        with pytest.raises(ConfigError, match="d"):
            TrainConfig().check_compatible(TrainConfig(d=16))


class TestRngStreams:
    def test_reproducible(self):
        a = rng_stream(3, "masking", 1, 2).random(5)
        assert a.tobytes() == rng_stream(3, "masking", 1, 2).random(5).tobytes()

    def test_streams_differ(self):
        draws = {rng_stream(3, n, *k).random() for n, k in
                 [("masking", ()), ("init", ()), ("masking", (1,)), ("masking", (2,))]}
        draws.add(rng_stream(4, "masking").random())
        assert len(draws) == 5


@pytest.fixture
def capture(small_cfg):
    model = GiMPModel.build(small_cfg)
    model.freeze("gene_encoder")
    opt = make_pretrain_optimizer(model, small_cfg)
    for _, p in opt.params:
        p.grad = np.ones_like(p.data)
    opt.step()
    best = FinetuneState(0.75, 2, {"head": model.head.state_dict()})
    return ckpt.Checkpoint.capture(model, small_cfg, "pretrain", 3, opt, {"batching": rng_stream(0, "batching")},
                                   best=best, extra={"note": "x"})


class TestCheckpoint:
    def test_byte_identical_resave(self, capture, tmp_path):
        ckpt.save(capture, tmp_path / "a.gimp")
        ckpt.save(ckpt.load(tmp_path / "a.gimp"), tmp_path / "b.gimp")
        assert (tmp_path / "a.gimp").read_bytes() == (tmp_path / "b.gimp").read_bytes()

    def test_contents(self, capture):
        back = ckpt.from_bytes(ckpt.to_bytes(capture))
        assert back.config == capture.config and back.stage == "pretrain" and back.epoch == 3
        assert back.frozen["gene_encoder"] and back.optimizer["t"] == 1
        assert back.best_val_acc == 0.75 and back.best_epoch == 2 and back.extra == {"note": "x"}
        for g, params in capture.params.items():
            for k, v in params.items():
                assert back.params[g][k].tobytes() == v.tobytes()
        assert back.generator("batching").random() == rng_stream(0, "batching").random()

    def test_build_model(self, capture):
        model = capture.build_model()
        assert model.frozen["gene_encoder"] and not model.frozen["aggregator"]
        assert model.state_dict()["decoder"]["mask_embedding"].tobytes() == \
            capture.params["decoder"]["mask_embedding"].tobytes()

    def test_config_is_embedded_verbatim(self, capture):
        raw = ckpt.to_bytes(capture)
        assert b"window_len = 16" in raw

    def test_bad_magic(self, capture):
        raw = bytearray(ckpt.to_bytes(capture))
        raw[0:8] = b"NOTACKPT"
        with pytest.raises(DataError, match="magic"):
            ckpt.from_bytes(bytes(raw))

    def test_truncated(self, capture):
        raw = ckpt.to_bytes(capture)
        with pytest.raises(DataError, match="truncated"):
            ckpt.from_bytes(raw[:-8])
        with pytest.raises(DataError, match="truncated"):
            ckpt.from_bytes(raw[:10])

    def test_trailing(self, capture):
        with pytest.raises(DataError, match="trailing"):
            ckpt.from_bytes(ckpt.to_bytes(capture) + b"\0")

    def test_missing(self, tmp_path):
        with pytest.raises(MissingFileError):
            ckpt.load(tmp_path / "none.gimp")

    def test_unknown_stage(self, small_cfg):
        with pytest.raises(DataError):
            ckpt.Checkpoint(small_cfg, "warmup", 0, {}, {})


class TestResume:
    def test_pretrain_resume_matches_uninterrupted(self, small_cfg, small_dataset):
        cfg = small_cfg.replace(pretrain_epochs=3)
        train = small_dataset.split("train")

        def fresh():
            m = GiMPModel.build(cfg)
            m.freeze("gene_encoder")
            return m
        full_model = fresh()
        full = pretrain(full_model, train, cfg)

        saved = {}
        model = fresh()

        def on_epoch(rec, opt, rng):
            saved["raw"] = ckpt.to_bytes(ckpt.Checkpoint.capture(model, cfg, "pretrain", rec["epoch"] + 1,
                                                                 opt, {"batching": rng}))
        first = pretrain(model, train, cfg, on_epoch=on_epoch, stop_epoch=1)
        ck = ckpt.from_bytes(saved["raw"])
        resumed_model = ck.build_model()
        opt = make_pretrain_optimizer(resumed_model, cfg)
        opt.load_state_dict(ck.optimizer)
        rest = pretrain(resumed_model, train, cfg, ck.epoch, opt, ck.generator("batching"))
        assert _strip(first + rest) == _strip(full)
        for g, params in full_model.state_dict().items():
            for k, v in params.items():
                assert resumed_model.state_dict()[g][k].tobytes() == v.tobytes()

    def test_finetune_resume_matches_uninterrupted(self, small_cfg, small_dataset):
        cfg = small_cfg.replace(finetune_epochs=3)
        train, val = small_dataset.split("train"), small_dataset.split("val")

        def fresh():
            m = GiMPModel.build(cfg)
            m.freeze("gene_encoder")
            return m
        full_model = fresh()
        full, full_state = finetune(full_model, train, val, cfg)

        saved = {}
        model = fresh()

        def on_epoch(rec, opt, rng, st):
            saved["raw"] = ckpt.to_bytes(ckpt.Checkpoint.capture(model, cfg, "finetune", rec["epoch"] + 1,
                                                                 opt, {"finetune": rng}, best=st))
        first, _ = finetune(model, train, val, cfg, on_epoch=on_epoch, stop_epoch=2)
        ck = ckpt.from_bytes(saved["raw"])
        m2 = ck.build_model()
        opt = make_finetune_optimizer(m2, cfg)
        opt.load_state_dict(ck.optimizer)
        state = FinetuneState(ck.best_val_acc, ck.best_epoch, ck.best_params or {})
        rest, st2 = finetune(m2, train, val, cfg, ck.epoch, opt, ck.generator("finetune"), state)
        assert _strip(first + rest) == _strip(full)
        assert st2.best_epoch == full_state.best_epoch
        for g, params in full_model.state_dict().items():
            for k, v in params.items():
                assert m2.state_dict()[g][k].tobytes() == v.tobytes()
