import dataclasses
import re
import struct
import zlib

import numpy as np
import pytest

from fedmla.fedsim import (
    CHECKPOINT_VERSION,
    CheckpointError,
    ClientFailure,
    ClientState,
    ClientToServer,
    FeatureUpload,
    LrSchedule,
    ServerToClient,
    SignatureError,
    aggregate,
    copy_param_set,
    dataset_loss,
    encode_message,
    fedavg_weights,
    load_checkpoint,
    local_train,
    make_clients,
    param_set_from_bytes,
    param_set_to_bytes,
    run_federation,
    save_checkpoint,
)
from fedmla.segnet import NetConfig, build_segnet

CFG = NetConfig(levels=2, base_channels=4, bin_depth=1)


def random_models(k, seed=0):
    rng = np.random.default_rng(seed)
    base = build_segnet(CFG).param_set()
    return [{n: rng.normal(size=v.shape) for n, v in base.items()} for _ in range(k)]


def toy_data(seed, n=6, size=8):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 1, size, size))
    y = np.zeros((n, 1, size, size), dtype=np.uint8)
    for i in range(n):
        r, c = rng.integers(1, size - 4, size=2)
        y[i, 0, r:r + 3, c:c + 3] = 1
        x[i, 0] += 2.0 * y[i, 0]
    return x, y


def bitwise_equal(a, b):
    return list(a) == list(b) and all(a[k].tobytes() == b[k].tobytes() for k in a)


class TestAggregation:
    def test_one_hot_is_bitwise_identity(self):
        models = random_models(3)
        for j in range(3):
            assert bitwise_equal(aggregate(models, np.eye(3)[j]), models[j])

    def test_convex_envelope(self):
        models = random_models(4, seed=1)
        out = aggregate(models, [0.1, 0.2, 0.3, 0.4])
        for name in out:
            stack = np.stack([m[name] for m in models])
            assert np.all(out[name] >= stack.min(0)) and np.all(out[name] <= stack.max(0))

    def test_linear_in_weights(self):
        models = random_models(3, seed=2)
        u, v, alpha = np.array([0.2, 0.5, 0.3]), np.array([0.6, 0.1, 0.3]), 0.35
        lhs = aggregate(models, alpha * u + (1 - alpha) * v)
        au, av = aggregate(models, u), aggregate(models, v)
        for name in lhs:
            assert np.max(np.abs(lhs[name] - (alpha * au[name] + (1 - alpha) * av[name]))) <= 1e-12

    def test_rejects_off_simplex_weights(self):
        with pytest.raises(ValueError):
            aggregate(random_models(2), [0.7, 0.7])
        with pytest.raises(ValueError):
            aggregate(random_models(2), [1.2, -0.2])

    def test_rejects_signature_mismatch(self):
        a, b = random_models(2)
        b["head.bias"] = np.zeros(2)
        with pytest.raises(SignatureError):
            aggregate([a, b], [0.5, 0.5])

    def test_fedavg_case_ratios(self):
        w = fedavg_weights([30, 30, 19, 13, 12, 12])
        assert w.tolist() == [c / 116 for c in (30, 30, 19, 13, 12, 12)]

    def test_fedavg_uniform_and_single(self):
        assert fedavg_weights([5, 5, 5, 5]).tolist() == [0.25] * 4
        assert fedavg_weights([7]).tolist() == [1.0]

    def test_fedavg_on_simplex(self):
        w = fedavg_weights(np.random.default_rng(0).integers(1, 100, size=9))
        assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12


class TestSchedule:
    def test_step_decay(self):
        s = LrSchedule()
        assert s(0) == 0.01 and s(99) == 0.01
        assert s(100) == pytest.approx(0.008) and s(250) == pytest.approx(0.01 * 0.8 ** 2)

    def test_invalid(self):
        with pytest.raises(ValueError):
            LrSchedule(base=0.0)


class TestMessages:
    def test_params_are_read_only_copies(self):
        ps = build_segnet(CFG).param_set()
        msg = ServerToClient(0, ps)
        ps["head.bias"][0] = 5.0
        assert msg.params["head.bias"][0] == 0.0
        with pytest.raises(ValueError):
            msg.params["head.bias"][0] = 1.0
        with pytest.raises(dataclasses.FrozenInstanceError):
            msg.round = 3

    def test_no_message_field_can_hold_an_image(self):
        # structural audit: every field is a scalar, a ParamSet, or an (n, F) matrix
        for cls in (ServerToClient, ClientToServer, FeatureUpload):
            names = {f.name for f in dataclasses.fields(cls)}
            assert not names & {"images", "image", "masks", "mask", "data"}
        with pytest.raises(ValueError):
            FeatureUpload(0, np.zeros((2, 1, 8, 8)))

    def test_serialized_updates_do_not_contain_client_images(self):
        x, y = toy_data(0)
        client = make_clients([(0, x, y)], CFG)[0]
        reply = local_train(client, ServerToClient(0, build_segnet(CFG).param_set()))
        wire = encode_message(reply)
        for img in x:
            assert img.astype("<f8").tobytes()[:64] not in wire
        expected = 1 + struct.calcsize("<IIQd") + len(param_set_to_bytes(reply.params))
        assert len(wire) == expected

    def test_encode_rejects_other_types(self):
        with pytest.raises(TypeError):
            encode_message(np.zeros((1, 1, 4, 4)))


class TestLocalTraining:
    def test_zero_epochs_returns_global(self):
        x, y = toy_data(0)
        client = make_clients([(0, x, y)], CFG)[0]
        g = build_segnet(CFG, seed=4).param_set()
        reply = local_train(client, ServerToClient(0, g), epochs_per_round=0)
        assert bitwise_equal(reply.params, g) and reply.n_samples == 6

    @pytest.mark.parametrize("seed", range(10))
    def test_local_training_lowers_own_loss(self, seed):
        x, y = toy_data(seed)
        client = make_clients([(0, x, y)], CFG, seed)[0]
        g = build_segnet(CFG, seed).param_set()
        net = build_segnet(CFG, seed)
        net.load_param_set(g)
        before = dataset_loss(net, x, y)
        reply = local_train(client, ServerToClient(0, g), epochs_per_round=3, batch_size=3, seed=seed)
        net.load_param_set(dict(reply.params))
        assert dataset_loss(net, x, y) < before

    def test_identical_clients_identical_updates(self):
        x, y = toy_data(1)
        a, b = make_clients([(0, x, y), (0, x.copy(), y.copy())], CFG)
        g = build_segnet(CFG).param_set()
        ra, rb = local_train(a, ServerToClient(0, g)), local_train(b, ServerToClient(0, g))
        assert bitwise_equal(ra.params, rb.params)

    def test_rounds_must_advance(self):
        x, y = toy_data(0)
        client = make_clients([(0, x, y)], CFG)[0]
        g = build_segnet(CFG).param_set()
        local_train(client, ServerToClient(1, g))
        with pytest.raises(ValueError):
            local_train(client, ServerToClient(1, g))

    def test_empty_client_rejected(self):
        with pytest.raises(ValueError):
            ClientState(0, np.zeros((0, 1, 8, 8)), np.zeros((0, 1, 8, 8)), build_segnet(CFG))


class TestFederation:
    def test_zero_rounds_returns_initial_model(self):
        x, y = toy_data(0)
        res = run_federation(make_clients([(0, x, y), (1, x, y)], CFG, 3), 0, CFG, seed=3)
        assert bitwise_equal(res.global_params, build_segnet(CFG, 3).param_set())

    def test_single_client_is_centralized_training(self):
        x, y = toy_data(2)
        res = run_federation(make_clients([(0, x, y)], CFG), 3, CFG)
        solo = make_clients([(0, x, y)], CFG)[0]
        params = build_segnet(CFG).param_set()
        for r in range(3):
            params = copy_param_set(local_train(solo, ServerToClient(r, params)).params)
        assert bitwise_equal(res.global_params, params)

    def test_two_identical_clients_follow_solo_trajectory(self):
        x, y = toy_data(3)
        # one full batch per epoch, so the shuffle order cannot matter
        pair = run_federation(make_clients([(0, x, y), (1, x, y)], CFG), 3, CFG, batch_size=len(x))
        solo = run_federation(make_clients([(0, x, y)], CFG), 3, CFG, batch_size=len(x))
        for name in solo.global_params:
            assert np.max(np.abs(pair.global_params[name] - solo.global_params[name])) <= 1e-9

    def test_thread_count_does_not_change_result(self):
        data = [(d, *toy_data(d)) for d in range(3)]
        one = run_federation(make_clients(data, CFG), 2, CFG, threads=1)
        four = run_federation(make_clients(data, CFG), 2, CFG, threads=4)
        assert bitwise_equal(one.global_params, four.global_params)
        assert all(bitwise_equal(a, b) for a, b in zip(one.local_params, four.local_params))

    def test_logs_per_round(self):
        data = [(d, *toy_data(d)) for d in range(2)]
        res = run_federation(make_clients(data, CFG), 2, CFG)
        assert [l.round for l in res.logs] == [0, 1]
        assert set(res.logs[0].client_dice) == {0, 1}

    def test_client_failure_names_round_and_domain(self):
        x, y = toy_data(0)
        bad = x.copy()
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(ClientFailure) as info:
            run_federation(make_clients([(0, x, y), (7, bad, y)], CFG), 2, CFG)
        assert info.value.round == 0 and info.value.domain == 7


class TestCheckpoints:
    def test_round_trip_bitwise(self, tmp_path):
        ps = random_models(1)[0]
        save_checkpoint(ps, tmp_path / "m.mlbn")
        assert bitwise_equal(load_checkpoint(tmp_path / "m.mlbn"), ps)

    def test_layout(self):
        ps = {"a": np.array([1.0, 2.0])}
        buf = param_set_to_bytes(ps)
        assert buf[:4] == b"MLBN"
        assert struct.unpack_from("<II", buf, 4) == (CHECKPOINT_VERSION, 1)
        assert struct.unpack_from("<H", buf, 12) == (1,) and buf[14:15] == b"a" and buf[15] == 1
        assert struct.unpack_from("<I", buf, 16) == (2,)
        assert struct.unpack_from("<2d", buf, 20) == (1.0, 2.0)
        assert struct.unpack_from("<I", buf, 36) == (zlib.crc32(buf[:36]),)

    def test_truncation_names_parameter(self):
        ps = build_segnet(CFG).param_set()
        buf = param_set_to_bytes(ps)
        last = list(ps)[-1]
        # cut into the data of the last parameter, keeping its header intact
        with pytest.raises(CheckpointError, match=re.escape(last)):
            param_set_from_bytes(buf[:-4 - 4])

    def test_version_mismatch_reports_both(self):
        buf = bytearray(param_set_to_bytes({"a": np.zeros(1)}))
        buf[4:8] = struct.pack("<I", 9)
        with pytest.raises(CheckpointError, match=r"version 9.*supports 1"):
            param_set_from_bytes(bytes(buf))

    def test_bad_magic_and_crc(self):
        buf = bytearray(param_set_to_bytes({"a": np.zeros(3)}))
        with pytest.raises(CheckpointError, match="magic"):
            param_set_from_bytes(b"XXXX" + bytes(buf[4:]))
        buf[-6] ^= 0xFF
        with pytest.raises(CheckpointError, match="CRC32"):
            param_set_from_bytes(bytes(buf))

    def test_shape_overflow(self):
        body = b"MLBN" + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"w" + bytes([2]) + struct.pack("<2I", 2**31, 2**31)
        buf = body + struct.pack("<I", zlib.crc32(body))
        with pytest.raises(CheckpointError, match="'w'"):
            param_set_from_bytes(buf)
