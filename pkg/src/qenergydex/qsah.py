"""Symmetric authenticated handshake over a rented quantum key.

Two messages establish a session between peers that already share a
256-bit key K rented from the key service under the same key id:

    client -> server:  n_c (16 bytes) || GMAC_K(n_c)            (16 bytes)
    server -> client:  n_s (16 bytes) || GMAC_K(n_s || n_c)     (16 bytes)

Both sides then derive a 256-bit session key with HKDF-SHA256 over
K || n_c || n_s with context label ``Q-EnergyDEX`` and empty salt.

GMAC is instantiated as AES-GCM over an empty plaintext with the message
as associated data; the required 96-bit GCM nonce is derived
deterministically from the message transcript (the construction needs a
nonce, and deriving it from the transcript keeps the wire format exactly
two 16-byte fields per message). The server keeps a per-key replay cache
of client nonces for the key lifetime, so a replayed hello is rejected
even though its tag verifies.

The latency benchmark races this one-round-trip handshake against a
modeled multi-round-trip PKI baseline over the same simulated links; no
real TLS stack is involved.
"""

from __future__ import annotations

import hashlib
import hmac as hmac_mod
from dataclasses import dataclass, field

import numpy as np
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .netsim import LinkModel, Network, sample_rtt
from .qkms import KeyPoolState, KeyRecord, KmsReplica
from .rng import substream
from .stats import Ecdf, ecdf

__all__ = [
    "NoKey",
    "AuthFail",
    "Replay",
    "HandshakeSession",
    "BaselineHandshakeModel",
    "gmac_tag",
    "gmac_verify",
    "hkdf_sha256",
    "derive_session_key",
    "advantage_bound",
    "ClientSession",
    "ServerEndpoint",
    "BenchmarkResult",
    "latency_benchmark",
    "KDF_CONTEXT",
]

NONCE_LEN = 16
TAG_LEN = 16
KDF_CONTEXT = b"Q-EnergyDEX"   # 11 ASCII bytes


class NoKey(RuntimeError):
    """Handshake attempted without a rented shared key."""


class AuthFail(RuntimeError):
    """MAC verification failed (wrong key or tampered message)."""


class Replay(RuntimeError):
    """Client nonce reused within the key lifetime."""


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _m1_nonce(n_c: bytes) -> bytes:
    return hashlib.sha256(b"qsah/m1" + n_c).digest()[:12]


def _m2_nonce(n_s: bytes, n_c: bytes) -> bytes:
    return hashlib.sha256(b"qsah/m2" + n_s + n_c).digest()[:12]


def gmac_tag(key: bytes, nonce: bytes, data: bytes) -> bytes:
    """16-byte GMAC tag: AES-GCM over empty plaintext with ``data`` as AAD."""
    return AESGCM(key).encrypt(nonce, b"", data)


def gmac_verify(key: bytes, nonce: bytes, data: bytes, tag: bytes) -> bool:
    return hmac_mod.compare_digest(gmac_tag(key, nonce, data), tag)


def hkdf_sha256(ikm: bytes, info: bytes, length: int = 32, salt: bytes = b"") -> bytes:
    """RFC 5869 extract-then-expand over SHA-256."""
    if not salt:
        salt = b"\x00" * 32
    prk = hmac_mod.new(salt, ikm, hashlib.sha256).digest()
    okm = b""
    block = b""
    counter = 1
    while len(okm) < length:
        block = hmac_mod.new(prk, block + info + bytes([counter]), hashlib.sha256).digest()
        okm += block
        counter += 1
    return okm[:length]


def derive_session_key(shared_key: bytes, n_c: bytes, n_s: bytes) -> bytes:
    """Session key = HKDF(K || n_c || n_s, context ``Q-EnergyDEX``), 32 bytes."""
    return hkdf_sha256(shared_key + n_c + n_s, KDF_CONTEXT, 32)


def advantage_bound(eps_mac: float, eps_kdf: float, eps_rnd: float) -> float:
    """Distinguishing-advantage bound: the three error terms compose additively."""
    for v in (eps_mac, eps_kdf, eps_rnd):
        if not 0.0 <= v <= 1.0:
            raise ValueError("error terms must lie in [0, 1]")
    return min(1.0, eps_mac + eps_kdf + eps_rnd)


# ---------------------------------------------------------------------------
# protocol state machines
# ---------------------------------------------------------------------------


@dataclass
class HandshakeSession:
    """One peer's view of a handshake."""

    key_id: str
    shared_key: bytes
    n_c: bytes = b""
    n_s: bytes = b""
    session_key: bytes = b""
    state: str = "init"        # init | challenged | established | failed
    t_start_ms: float = 0.0
    t_done_ms: float = 0.0


class ClientSession:
    """Client side: emits the hello, verifies the response, derives the key."""

    def __init__(self, key: KeyRecord | None, rng: np.random.Generator):
        if key is None:
            raise NoKey("client has no rented key")
        self.session = HandshakeSession(key_id=key.key_id, shared_key=key.key_bits)
        self._rng = rng

    def client_hello(self, now_ms: float = 0.0) -> bytes:
        """Build message 1: fresh nonce and its tag."""
        s = self.session
        if s.state != "init":
            raise RuntimeError("hello already sent")
        s.n_c = self._rng.bytes(NONCE_LEN)
        s.t_start_ms = now_ms
        s.state = "challenged"
        tag = gmac_tag(s.shared_key, _m1_nonce(s.n_c), s.n_c)
        return s.n_c + tag

    def client_finish(self, message2: bytes, now_ms: float = 0.0) -> bytes:
        """Verify message 2 and derive the session key."""
        s = self.session
        if s.state != "challenged":
            raise RuntimeError("unexpected finish")
        if len(message2) != NONCE_LEN + TAG_LEN:
            s.state = "failed"
            raise AuthFail("malformed response")
        n_s, tag2 = message2[:NONCE_LEN], message2[NONCE_LEN:]
        if not gmac_verify(s.shared_key, _m2_nonce(n_s, s.n_c), n_s + s.n_c, tag2):
            s.state = "failed"
            raise AuthFail("response tag invalid")
        if n_s == s.n_c:
            s.state = "failed"
            raise AuthFail("nonce collision")
        s.n_s = n_s
        s.session_key = derive_session_key(s.shared_key, s.n_c, n_s)
        s.state = "established"
        s.t_done_ms = now_ms
        return s.session_key


class ServerEndpoint:
    """Server side: verifies hellos and answers with its own challenge.

    Keeps a replay cache of client nonces per key id; entries live until
    the key is dropped via ``forget_key`` (key ttl expiry).
    """

    def __init__(self, rng: np.random.Generator):
        self._rng = rng
        self._keys: dict[str, bytes] = {}
        self._seen: dict[str, set[bytes]] = {}
        self.sessions: list[HandshakeSession] = []

    def install_key(self, key: KeyRecord) -> None:
        self._keys[key.key_id] = key.key_bits
        self._seen.setdefault(key.key_id, set())

    def forget_key(self, key_id: str) -> None:
        self._keys.pop(key_id, None)
        self._seen.pop(key_id, None)

    def server_response(self, key_id: str, message1: bytes, now_ms: float = 0.0) -> bytes:
        """Verify message 1, enforce nonce freshness, build message 2."""
        shared = self._keys.get(key_id)
        if shared is None:
            raise NoKey(f"no key installed for {key_id}")
        if len(message1) != NONCE_LEN + TAG_LEN:
            raise AuthFail("malformed hello")
        n_c, tag = message1[:NONCE_LEN], message1[NONCE_LEN:]
        if not gmac_verify(shared, _m1_nonce(n_c), n_c, tag):
            raise AuthFail("hello tag invalid")
        if n_c in self._seen[key_id]:
            raise Replay("client nonce reused")
        self._seen[key_id].add(n_c)

        n_s = self._rng.bytes(NONCE_LEN)
        if n_s == n_c:
            raise AuthFail("nonce collision")
        session = HandshakeSession(key_id=key_id, shared_key=shared, n_c=n_c, n_s=n_s)
        session.session_key = derive_session_key(shared, n_c, n_s)
        session.state = "established"
        session.t_done_ms = now_ms
        self.sessions.append(session)
        return n_s + gmac_tag(shared, _m2_nonce(n_s, n_c), n_s + n_c)


# ---------------------------------------------------------------------------
# latency benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BaselineHandshakeModel:
    """PKI-handshake stand-in: several round trips plus lognormal compute."""

    round_trips: int = 3
    compute_median_ms: float = 2.0
    compute_sigma: float = 0.5

    def __post_init__(self):
        if self.round_trips < 1:
            raise ValueError("round_trips must be >= 1")


@dataclass(frozen=True)
class BenchmarkResult:
    qsah_latencies: np.ndarray
    baseline_local: np.ndarray
    baseline_rtt: np.ndarray
    qsah_ecdf: Ecdf
    baseline_local_ecdf: Ecdf
    baseline_rtt_ecdf: Ecdf
    established: int


def latency_benchmark(
    n_handshakes: int,
    batch_size: int,
    link: LinkModel,
    baseline: BaselineHandshakeModel,
    seed: int,
    batch_gap_ms: float = 500.0,
) -> BenchmarkResult:
    """Measure handshake latency against the modeled baseline.

    The symmetric handshake runs as real protocol messages through the
    event-driven network (one round trip, per-message processing cost);
    requests start in batches of ``batch_size``. The baseline arms are
    sampled from the model: compute cost alone (loopback) and compute cost
    plus ``round_trips`` round trips on the same link.
    """
    if n_handshakes < 1:
        raise ValueError("n_handshakes must be >= 1")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")

    net = Network(seed=seed, default_link=link)
    nonce_rng = substream(seed, "qsah", "nonces")
    server = ServerEndpoint(rng=nonce_rng)

    pool = KeyPoolState(
        balance_bits=n_handshakes * 512, capacity_bits=n_handshakes * 512, gen_rate_bps=0.0
    )
    kms = KmsReplica(0, pool, seed=seed)

    clients: dict[int, ClientSession] = {}
    latencies = np.zeros(n_handshakes)
    established = 0

    def server_handler(network: Network, event) -> None:
        idx, key_id, message1 = event.payload
        reply = server.server_response(key_id, message1, now_ms=network.now_ms)
        network.send("server", "client", (idx, reply), kind="qsah2")

    def client_handler(network: Network, event) -> None:
        nonlocal established
        idx, message2 = event.payload
        client = clients[idx]
        client.client_finish(message2, now_ms=network.now_ms)
        latencies[idx] = network.now_ms - client.session.t_start_ms
        established += 1

    net.register_node("client", client_handler)
    net.register_node("server", server_handler)

    def start_handshake(idx: int) -> None:
        key = kms.rent(256, int(net.now_ms))
        server.install_key(key)
        client = ClientSession(key, nonce_rng)
        clients[idx] = client
        message1 = client.client_hello(now_ms=net.now_ms)
        net.send("client", "server", (idx, client.session.key_id, message1), kind="qsah1")

    for idx in range(n_handshakes):
        batch = idx // batch_size
        net.call_at(batch * batch_gap_ms, (lambda i: (lambda: start_handshake(i)))(idx))
    net.run_to_quiescence()

    # modeled baseline arms: same per-handshake structure, drawn from the model
    model_rng = substream(seed, "qsah", "baseline")
    ln_median = np.log(baseline.compute_median_ms)
    compute = model_rng.lognormal(ln_median, baseline.compute_sigma, size=n_handshakes)
    rtts = np.empty(n_handshakes)
    for i in range(n_handshakes):
        rtts[i] = sum(sample_rtt(link, model_rng) for _ in range(baseline.round_trips))
    baseline_local = compute
    baseline_rtt = compute + rtts

    return BenchmarkResult(
        qsah_latencies=latencies,
        baseline_local=baseline_local,
        baseline_rtt=baseline_rtt,
        qsah_ecdf=ecdf(latencies),
        baseline_local_ecdf=ecdf(baseline_local),
        baseline_rtt_ecdf=ecdf(baseline_rtt),
        established=established,
    )
