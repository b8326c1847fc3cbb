"""Transport contract tests against live loopback services."""

import socket
import threading

import pytest

from runctl import transport, wire
from runctl.errors import ProtocolError, Timeout, TransportError
from runctl.model import FsmCommand, LogMessage, Severity
from runctl.wire import Kind, command_to_body, log_message_to_body, make_envelope


def closed_port() -> int:
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


@pytest.fixture
def echo_service():
    def handler(env):
        return wire.reply_to(env, Kind.ACK, "echo", {"seen": env.kind.value})

    with transport.EnvelopeService("echo", handler) as svc:
        yield svc


class TestRequest:
    def test_ack_with_matching_correlation(self, echo_service):
        env = make_envelope(Kind.COMMAND, "t", "echo", command_to_body(FsmCommand("start")))
        resp = transport.request(echo_service.url, env)
        assert resp.kind is Kind.ACK
        assert resp.correlation_id == env.id
        assert resp.body == {"seen": "command"}

    def test_closed_port(self):
        url = f"http://127.0.0.1:{closed_port()}{transport.ENVELOPE_PATH}"
        env = make_envelope(Kind.QUERY, "t", "x", {"q": 1})
        with pytest.raises(TransportError):
            transport.request(url, env, timeout=2.0)

    def test_wrong_correlation(self):
        def handler(env):
            return make_envelope(Kind.ACK, "bad", env.source, {}, correlation_id="not-it")

        with transport.EnvelopeService("bad", handler) as svc:
            env = make_envelope(Kind.QUERY, "t", "bad", {"q": 1})
            with pytest.raises(ProtocolError):
                transport.request(svc.url, env)

    def test_push_kind_rejected_as_request(self, echo_service):
        env = make_envelope(Kind.PUBLISH, "t", "echo",
                            log_message_to_body(LogMessage("n", "t", Severity.INFO)))
        with pytest.raises(ValueError):
            transport.request(echo_service.url, env)

    def test_timeout(self):
        def handler(env):
            import time
            time.sleep(3)
            return wire.reply_to(env, Kind.ACK, "slow", {})

        with transport.EnvelopeService("slow", handler) as svc:
            env = make_envelope(Kind.QUERY, "t", "slow", {"q": 1})
            with pytest.raises(Timeout):
                transport.request(svc.url, env, timeout=0.3)

    def test_error_envelope_passthrough_and_raise(self, echo_service):
        from runctl.errors import UnknownVerb, raise_from_body

        def handler(env):
            raise UnknownVerb("no such verb 'fly'")

        with transport.EnvelopeService("judge", handler) as svc:
            env = make_envelope(Kind.COMMAND, "t", "judge", command_to_body(FsmCommand("fly")))
            resp = transport.request(svc.url, env)
            assert resp.kind is Kind.ERROR
            assert resp.body["code"] == "UnknownVerb"
            with pytest.raises(UnknownVerb):
                raise_from_body(resp.body)


class TestPush:
    def test_delivered(self):
        got = []

        def handler(env):
            got.append(env)
            return wire.reply_to(env, Kind.ACK, "recv", {})

        with transport.EnvelopeService("recv", handler) as svc:
            env = make_envelope(Kind.EVENT, "t", "recv", {"ping": 1})
            transport.push(svc.url, env)
        assert len(got) == 1 and got[0].body == {"ping": 1}

    def test_unreachable(self):
        url = f"http://127.0.0.1:{closed_port()}{transport.ENVELOPE_PATH}"
        env = make_envelope(Kind.EVENT, "t", "x", {})
        with pytest.raises(TransportError):
            transport.push(url, env, timeout=2.0)

    def test_hundred_pushes_from_four_senders(self):
        count = threading.Lock()
        seen = []

        def handler(env):
            with count:
                seen.append(env.body["n"])
            return wire.reply_to(env, Kind.ACK, "counter", {})

        with transport.EnvelopeService("counter", handler) as svc:
            def sender(offset):
                for i in range(25):
                    env = make_envelope(Kind.PUBLISH, f"s{offset}", "counter",
                                        log_message_to_body(LogMessage("n", "t", Severity.INFO)))
                    env = wire.Envelope(id=env.id, kind=Kind.EVENT, source=env.source,
                                        target=env.target, body={"n": offset * 25 + i},
                                        issued_at=env.issued_at)
                    transport.push(svc.url, env)

            threads = [threading.Thread(target=sender, args=(k,)) for k in range(4)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        assert sorted(seen) == list(range(100))


class TestServiceBasics:
    def test_health(self, echo_service):
        assert transport.probe_health(echo_service.base_url)
        assert not transport.probe_health(f"http://127.0.0.1:{closed_port()}")

    def test_undecodable_request_is_http_400(self, echo_service):
        import http.client
        conn = http.client.HTTPConnection(echo_service.host, echo_service.port, timeout=2)
        conn.request("POST", transport.ENVELOPE_PATH, b"not json",
                     {"Content-Type": "application/json"})
        resp = conn.getresponse()
        resp.read()
        conn.close()
        assert resp.status == 400

    def test_keepalive_reuses_connection(self, echo_service):
        env1 = make_envelope(Kind.QUERY, "t", "echo", {"n": 1})
        env2 = make_envelope(Kind.QUERY, "t", "echo", {"n": 2})
        r1 = transport.request(echo_service.url, env1)
        r2 = transport.request(echo_service.url, env2)
        assert r1.correlation_id == env1.id and r2.correlation_id == env2.id
