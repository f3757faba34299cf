import random

import pytest

from unisuf.adversary import Knowledge
from unisuf.codec import decode
from unisuf.crypto import make_backend
from unisuf.materials import EcuResponse, Flag
from unisuf.network import (
    Adversary,
    Delay,
    DelayBoundExceeded,
    Drop,
    Inject,
    Modify,
    Network,
    Origin,
    ScriptAction,
    ScriptError,
    SecureChannelViolation,
    Security,
    UnknownChannel,
    channel_between,
    encode_message,
    flip_byte,
    parse_script,
)
from unisuf.rounds import LogicalClock, UpdateRoundId

RID = UpdateRoundId("V1", 1000, 1)


def make_net(script=None, eta=8, seed=0):
    adv = Adversary(Knowledge(make_backend()), script)
    return Network(random.Random(seed), LogicalClock(), adv, eta)


def drain(net):
    out = []
    while (env := net.step()) is not None:
        out.append(env)
    return out


class TestChannels:
    def test_only_cia_ecu_is_insecure(self):
        assert channel_between("CIA@V1", "ECU@V1").security is Security.INSECURE
        assert channel_between("CIA@V1", "CSA@V1").security is Security.SECURE
        assert channel_between("VCM", "PDA").security is Security.SECURE

    def test_unknown_pair(self):
        with pytest.raises(UnknownChannel):
            channel_between("Supplier", "ECU@V1")

    def test_cross_vehicle(self):
        with pytest.raises(UnknownChannel):
            channel_between("CIA@V1", "ECU@V2")

    def test_channel_name_is_symmetric(self):
        assert channel_between("ECU@V1", "CIA@V1").name == channel_between("CIA@V1", "ECU@V1").name


class TestDelivery:
    def test_delay_within_bound(self):
        net = make_net(eta=3)
        for _ in range(50):
            net.send("VCM", "PDA", RID, encode_message("9.1", (Flag("request", "x"),)))
        times = [t for t, _ in net.schedule.pending()]
        assert min(times) >= 1 and max(times) <= 3

    def test_every_message_delivered_once(self):
        net = make_net()
        sent = [net.send("VCM", "PDA", RID, encode_message("9.1", (Flag("request", str(i)),))) for i in range(20)]
        got = drain(net)
        assert sorted(e.seq for e in got) == sorted(e.seq for e in sent)
        assert net.delivered == 20

    def test_same_seed_same_order(self):
        def order(seed):
            net = make_net(seed=seed)
            for i in range(15):
                net.send("VCM", "PDA", RID, encode_message("9.1", (Flag("request", str(i)),)))
            return [e.seq for e in drain(net)]

        assert order(4) == order(4)

    def test_eta_must_be_positive(self):
        with pytest.raises(ValueError):
            make_net(eta=0)

    def test_secure_link_not_observed(self):
        net = make_net()
        net.send("VCM", "PDA", RID, encode_message("9.1", (Flag("request", "x"),)))
        assert net.adversary.history == []

    def test_insecure_link_observed(self):
        net = make_net()
        net.send("CIA@V1", "ECU@V1", RID, encode_message("17.8", (EcuResponse(b"r" * 8),)))
        assert len(net.adversary.history) == 1
        net.adversary.knowledge.derive_closure()
        assert net.adversary.knowledge.knows(b"r" * 8)


def msg(step, data=b"payload-bytes"):
    return encode_message(step, (EcuResponse(data),))


class TestScriptedAdversary:
    def test_drop(self):
        net = make_net([ScriptAction(0, "drop", "CIA|ECU", "step:17.8")])
        net.send("CIA@V1", "ECU@V1", RID, msg("17.8"))
        assert drain(net) == []
        assert net.adversary.log[0]["action"] == "drop"

    def test_delay_exact(self):
        net = make_net([ScriptAction(0, "delay", "CIA|ECU", "step:17.8", {"d": 5})])
        net.send("CIA@V1", "ECU@V1", RID, msg("17.8"))
        assert net.schedule.pending()[0][0] == 5

    def test_delay_bound(self):
        net = make_net([ScriptAction(0, "delay", "CIA|ECU", "step:17.8", {"d": 9})])
        with pytest.raises(DelayBoundExceeded):
            net.send("CIA@V1", "ECU@V1", RID, msg("17.8"))

    def test_modify_flip(self):
        net = make_net([ScriptAction(0, "modify", "CIA|ECU", "step:17.8", {"payload": "flip", "index": 2})])
        net.send("CIA@V1", "ECU@V1", RID, msg("17.8"))
        (env,) = drain(net)
        assert env.inject_origin is Origin.ADVERSARY
        assert decode(env.payload).items[0].value != b"payload-bytes"

    def test_inject_duplicates(self):
        net = make_net([ScriptAction(0, "inject", "CIA|ECU", "step:17.8")])
        net.send("CIA@V1", "ECU@V1", RID, msg("17.8"))
        got = drain(net)
        assert len(got) == 2 and got[0].payload == got[1].payload
        assert {e.inject_origin for e in got} == {Origin.HONEST, Origin.ADVERSARY}

    def test_skip(self):
        net = make_net([ScriptAction(0, "drop", "CIA|ECU", "step:17.8", {"skip": 1})])
        net.send("CIA@V1", "ECU@V1", RID, msg("17.8", b"a"))
        net.send("CIA@V1", "ECU@V1", RID, msg("17.8", b"b"))
        net.send("CIA@V1", "ECU@V1", RID, msg("17.8", b"c"))
        assert sorted(decode(e.payload).items[0].value for e in drain(net)) == [b"a", b"c"]

    def test_action_fires_once(self):
        net = make_net([ScriptAction(0, "drop", "CIA|ECU", "step:17.8")])
        net.send("CIA@V1", "ECU@V1", RID, msg("17.8", b"a"))
        net.send("CIA@V1", "ECU@V1", RID, msg("17.8", b"b"))
        assert len(drain(net)) == 1

    def test_replay_needs_history(self):
        net = make_net([ScriptAction(0, "modify", "CIA|ECU", "step:17.8", {"payload": "replay", "step": "17.8"})])
        with pytest.raises(ScriptError):
            net.send("CIA@V1", "ECU@V1", RID, msg("17.8"))

    def test_replay_previous_round(self):
        net = make_net([ScriptAction(0, "modify", "CIA|ECU", "step:17.8", {"payload": "replay", "step": "17.8", "skip": 1})])
        old = UpdateRoundId("V1", 500, 9)
        net.send("CIA@V1", "ECU@V1", old, msg("17.8", b"old"))
        net.send("CIA@V1", "ECU@V1", RID, msg("17.8", b"new"))
        values = sorted(decode(e.payload).items[0].value for e in drain(net))
        assert values == [b"old", b"old"]


class TestDirectActions:
    def test_secure_channel_actions_refused(self):
        net = make_net()
        env = net.send("VCM", "PDA", RID, encode_message("9.1", (Flag("request", "x"),)))
        for action in (Drop(env), Modify(env, b"x"), Delay(env, 1), Inject(env.channel, env)):
            with pytest.raises(SecureChannelViolation):
                net.adversary_act(action)

    def test_drop_pending(self):
        net = make_net([ScriptAction(0, "delay", "CIA|ECU", "step:17.8", {"d": 8})])
        env = net.send("CIA@V1", "ECU@V1", RID, msg("17.8"))
        net.adversary_act(Drop(env))
        assert drain(net) == []


class TestScriptParsing:
    def test_parse_lines(self):
        acts = parse_script(['# comment', '', '{"action": "drop", "match": "step:17.17"}'])
        assert len(acts) == 1 and acts[0].channel == "CIA|ECU" and acts[0].at == 0

    @pytest.mark.parametrize(
        "line",
        ['{"action": "burn", "match": "step:1"}', '{"action": "drop"}', '{"action": "drop", "match": "color:red"}', "not json"],
    )
    def test_bad_lines(self, line):
        with pytest.raises(ScriptError):
            parse_script([line])

    def test_secure_channel_refused(self):
        with pytest.raises(SecureChannelViolation):
            parse_script(['{"action": "drop", "channel": "VCM|PDA", "match": "step:9.1"}'])


class TestFlip:
    def test_flip_stays_decodable(self):
        data = msg("17.8", b"\x00" * 4)
        for i in range(8):
            assert decode(flip_byte(data, i)) != decode(data)

    def test_no_bytes_field(self):
        with pytest.raises(ScriptError):
            flip_byte(encode_message("17.1", (Flag("request", "x"),)), 0)
