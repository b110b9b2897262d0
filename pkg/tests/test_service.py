import base64
import datetime as dt
import json
import os
import random
import threading
import urllib.error
import urllib.request

import pytest

from sketchpriv import sketches as sk
from sketchpriv.errors import (
    DomainError,
    DuplicateKey,
    ParamMismatch,
    PolicyViolation,
    SaltMismatch,
    UnknownKey,
)
from sketchpriv.service import (
    ApiMode,
    ApiPolicy,
    SketchRecord,
    SketchService,
    SketchStore,
    check_key,
    parse_elements,
    round_estimate,
)
from sketchpriv.sketches import Algo, Salt


def _elems(prefix, n, start=0):
    return [b"%s-%d" % (prefix, i) for i in range(start, start + n)]


# --- store --------------------------------------------------------------------


def test_put_get_round_trip(tmp_path, salt):
    store = SketchStore(tmp_path)
    m = sk.build(Algo.HLL, 10, _elems(b"x", 500), salt)
    store.put(SketchRecord("cafe", "2024-02-01", m))
    rec = store.get(("cafe", "2024-02-01"))
    assert sk.serialize(rec.sketch) == sk.serialize(m)
    assert store.get_bytes(("cafe", "2024-02-01")) == sk.serialize(m)
    assert rec.salt_fingerprint == salt.fingerprint
    assert rec.created_at is not None
    assert (tmp_path / "cafe" / "2024-02-01.skp").read_bytes() == sk.serialize(m)


def test_missing_and_duplicate_keys(tmp_path, salt):
    store = SketchStore(tmp_path)
    with pytest.raises(UnknownKey):
        store.get(("cafe", "2024-02-01"))
    with pytest.raises(UnknownKey):
        store.get_bytes(("cafe", "2024-02-01"))
    m = sk.empty(Algo.KMV, 16, salt)
    store.put(SketchRecord("cafe", "2024-02-01", m))
    with pytest.raises(DuplicateKey):
        store.put(SketchRecord("cafe", "2024-02-01", m))
    m2 = sk.add(m, b"y", salt)
    store.put(SketchRecord("cafe", "2024-02-01", m2), overwrite=True)
    assert store.get(("cafe", "2024-02-01")).sketch == m2


@pytest.mark.parametrize("key", [("", "2024-01-01"), ("../etc", "2024-01-01"), (".raw", "2024-01-01"),
                                 ("ok", "2024-13-01"), ("ok", "yesterday"), ("a/b", "2024-01-01")])
def test_invalid_keys(key):
    with pytest.raises(DomainError):
        check_key(*key)


def test_thousand_puts_and_month_scan(tmp_path, salt):
    store = SketchStore(tmp_path)
    m = sk.empty(Algo.KMV, 8, salt)
    keys = []
    rng = random.Random(4)
    days = [dt.date(2024, 3, d).isoformat() for d in range(1, 26)]
    dims = [f"place{i:02d}" for i in range(40)]
    for dim in dims:
        for day in days:
            keys.append((dim, day))
    rng.shuffle(keys)
    for k in keys:
        store.put(SketchRecord(k[0], k[1], m))
    # a neighbouring month must not leak into the scan
    store.put(SketchRecord("place00", "2024-04-01", m))
    got = store.scan("2024-03-01", "2024-03-31")
    assert len(got) == 1000
    assert [r.key for r in got] == sorted(keys)
    assert len(store.scan("2024-03-01", "2024-03-31", dimension="place07")) == 25
    assert len(store.keys()) == 1001


def test_interrupted_write_leaves_old_record(tmp_path, salt, monkeypatch):
    store = SketchStore(tmp_path)
    old = sk.build(Algo.HLL, 8, [b"a"], salt)
    store.put(SketchRecord("d", "2024-01-01", old))

    def boom(src, dst):
        raise OSError("simulated crash before rename")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        store.put(SketchRecord("d", "2024-01-01", sk.build(Algo.HLL, 8, [b"b"], salt)), overwrite=True)
    with pytest.raises(OSError):
        store.put(SketchRecord("d", "2024-01-02", old))
    monkeypatch.undo()
    assert store.get(("d", "2024-01-01")).sketch == old
    assert ("d", "2024-01-02") not in store
    assert store.keys() == [("d", "2024-01-01")]
    assert sorted(p.name for p in (tmp_path / "d").iterdir()) == ["2024-01-01.skp"]


def test_in_flight_temp_files_are_invisible(tmp_path, salt):
    store = SketchStore(tmp_path)
    store.put(SketchRecord("d", "2024-01-01", sk.empty(Algo.HLL, 4, salt)))
    (tmp_path / "d" / ".tmp-abc.part").write_bytes(b"SKP1 half")
    assert store.keys() == [("d", "2024-01-01")]


def test_concurrent_writers_on_one_key(tmp_path, salt):
    store = SketchStore(tmp_path)
    versions = [sk.build(Algo.HLL, 10, _elems(b"w%d" % i, 200), salt) for i in range(8)]
    store.put(SketchRecord("hot", "2024-01-01", versions[0]))

    def writer(m):
        for _ in range(20):
            store.put(SketchRecord("hot", "2024-01-01", m), overwrite=True)

    threads = [threading.Thread(target=writer, args=(m,)) for m in versions]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert store.get(("hot", "2024-01-01")).sketch in versions


# --- ingestion -----------------------------------------------------------------


def test_parse_elements():
    assert parse_elements(b"a\nb\r\n\nc\n") == [b"a", b"b", b"c"]
    assert parse_elements(b"") == []
    assert parse_elements(["x", b"y\n"]) == [b"x", b"y"]


@pytest.mark.parametrize("algo,param", [(Algo.HLL, 12), (Algo.KMV, 64), (Algo.PCSA, 16), (Algo.LOGLOG, 8)])
def test_ingest_is_idempotent(make_service, algo, param):
    svc = make_service(algo=algo, param=param)
    elems = _elems(b"u", 300)
    svc.ingest("a", "2024-01-01", b"\n".join(e for e in elems for _ in range(5)))
    svc.ingest("b", "2024-01-01", elems)
    assert svc.store.get_bytes(("a", "2024-01-01")) == svc.store.get_bytes(("b", "2024-01-01"))


def test_empty_stream_gives_empty_sketch(make_service, salt):
    svc = make_service()
    rec = svc.ingest("a", "2024-01-01", b"")
    assert rec.sketch == sk.empty(Algo.HLL, 15, salt)
    assert svc.estimate([("a", "2024-01-01")]) == {"estimate": 0, "merged": 1}


def test_sharded_ingest_equals_single_pass(make_service):
    svc = make_service(param=10)
    rng = random.Random(0)
    for trial in range(5):
        elems = _elems(b"s%d" % trial, 400)
        cut = sorted(rng.sample(range(400), 3))
        shards = [elems[:cut[0]], elems[cut[0]:cut[1]], elems[cut[1]:cut[2]], elems[cut[2]:]]
        whole = svc.ingest("whole", f"2024-01-0{trial + 1}", elems).sketch
        parts = [svc.ingest(f"shard{i}", f"2024-01-0{trial + 1}", s).sketch for i, s in enumerate(shards)]
        assert sk.merge_all(parts) == whole


def test_ingest_with_bad_params(make_service):
    with pytest.raises(DomainError):
        make_service().ingest("a", "2024-01-01", [b"x"], algo="hll", param=30)


# --- queries --------------------------------------------------------------------


def test_round_estimate():
    assert round_estimate(1042, 100) == 1000
    assert round_estimate(1050, 100) == 1000  # half to even
    assert round_estimate(1150, 100) == 1200
    assert round_estimate(1042.4, 1) == 1042


def test_single_key_estimate_matches_direct(make_service):
    svc = make_service(param=12)
    rec = svc.ingest("a", "2024-01-01", _elems(b"q", 777))
    assert svc.estimate([("a", "2024-01-01")])["estimate"] == round(sk.estimate(rec.sketch))


def test_rounding_policy(make_service):
    svc = make_service(mode=ApiMode.RESTRICTED, rounding=100)
    svc.ingest("a", "2024-01-01", _elems(b"q", 1042))
    raw = sk.estimate(svc.store.get(("a", "2024-01-01")).sketch)
    got = svc.estimate([("a", "2024-01-01")])
    assert got["estimate"] == round_estimate(raw, 100)
    assert got["estimate"] % 100 == 0
    # a finer request cannot undercut the policy
    assert svc.estimate([("a", "2024-01-01")], rounding=1) == got
    assert svc.estimate([("a", "2024-01-01")], rounding=1000)["estimate"] % 1000 == 0
    with pytest.raises(DomainError):
        ApiPolicy(ApiMode.RESTRICTED, 0)


def test_month_of_overlapping_visits_counts_distinct_people(make_service):
    svc = make_service(param=14)
    rng = random.Random(7)
    universe = [b"person-%d" % i for i in range(10_000)]
    union = set()
    keys = []
    for day in range(1, 31):
        visitors = rng.sample(universe, 600)
        union.update(visitors)
        key = ("restaurant", f"2024-06-{day:02d}")
        svc.ingest(*key, visitors)
        keys.append(key)
    got = svc.estimate(keys)
    assert got["merged"] == 30
    rse = sk.theoretical_rse(Algo.HLL, 6 * 2 ** 14)
    assert abs(got["estimate"] - len(union)) <= 3 * rse * len(union)
    assert got["estimate"] < 0.5 * 30 * 600


def test_estimate_errors(make_service, tmp_path, other_salt):
    svc = make_service(param=10)
    svc.ingest("a", "2024-01-01", [b"x"])
    with pytest.raises(UnknownKey):
        svc.estimate([("a", "2024-01-01"), ("a", "2024-01-02")])
    with pytest.raises(DomainError):
        svc.estimate([])
    svc.ingest("b", "2024-01-01", [b"x"], param=11)
    with pytest.raises(ParamMismatch):
        svc.estimate([("a", "2024-01-01"), ("b", "2024-01-01")])
    with pytest.raises(SaltMismatch):
        svc.put("c", "2024-01-01", sk.build(Algo.HLL, 10, [b"x"], other_salt))


@pytest.mark.parametrize("algo,param", [(Algo.HLL, 10), (Algo.KMV, 32), (Algo.PCSA, 8), (Algo.LOGLOG, 6)])
def test_service_merge_is_associative(make_service, salt, algo, param):
    svc = make_service(algo=algo, param=param)
    rng = random.Random(param)
    keys = []
    for i, name in enumerate("abc"):
        elems = _elems(b"z", rng.randint(0, 300), start=rng.randint(0, 200))
        svc.ingest(name, "2024-01-01", elems)
        keys.append((name, "2024-01-01"))
    whole = svc.estimate(keys)["estimate"]
    ab = sk.merge(svc.store.get(keys[0]).sketch, svc.store.get(keys[1]).sketch)
    svc.put("ab", "2024-01-01", ab)
    assert svc.estimate([("ab", "2024-01-01"), keys[2]])["estimate"] == whole
    assert svc.estimate(keys[::-1])["estimate"] == whole


# --- policy and audit --------------------------------------------------------------


def test_restricted_mode_blocks_raw_access(make_service, salt):
    svc = make_service(mode=ApiMode.RESTRICTED)
    svc.ingest("a", "2024-01-01", [b"x"])
    with pytest.raises(PolicyViolation):
        svc.get_bytes("a", "2024-01-01")
    with pytest.raises(PolicyViolation):
        svc.put("b", "2024-01-01", sk.empty(Algo.HLL, 15, salt))
    raw = make_service(subdir="open")
    raw.ingest("a", "2024-01-01", [b"x"])
    assert sk.deserialize(raw.get_bytes("a", "2024-01-01")).salt_fingerprint == salt.fingerprint


def _audit_lines(svc):
    path = svc.policy.audit_log_path
    if not os.path.exists(path):
        return []
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh]


def test_audit_records_every_restricted_call(make_service, salt):
    svc = make_service(mode=ApiMode.RESTRICTED)
    calls = 0
    svc.ingest("a", "2024-01-01", [b"x"]); calls += 1
    svc.estimate([("a", "2024-01-01")]); calls += 1
    for bad in (lambda: svc.get_bytes("a", "2024-01-01"),
                lambda: svc.estimate([("zz", "2024-01-01")]),
                lambda: svc.put("b", "2024-01-01", sk.empty(Algo.HLL, 15, salt))):
        with pytest.raises(Exception):
            bad()
        calls += 1
    lines = _audit_lines(svc)
    assert len(lines) == calls
    assert {"timestamp", "endpoint", "keys", "mode", "outcome"} <= set(lines[0])
    assert [e["outcome"] for e in lines] == ["ok", "ok", "PolicyViolation", "UnknownKey", "PolicyViolation"]
    assert all(e["mode"] == "restricted" for e in lines)


def test_raw_mode_does_not_audit(make_service):
    svc = make_service()
    svc.ingest("a", "2024-01-01", [b"x"])
    assert _audit_lines(svc) == []


# --- salt rotation ------------------------------------------------------------------


def test_rotation_with_raw_streams(make_service, salt, other_salt):
    svc = make_service(param=10)
    elems = {k: _elems(k.encode(), 200) for k in ("a", "b", "c")}
    for k, e in elems.items():
        svc.ingest(k, "2024-01-01", e)
    before = svc.store.get(("a", "2024-01-01")).sketch
    report = svc.rotate_salt(other_salt)
    assert report["rotated"] == 3 and not report["refused"] and report["stranded"] == 0
    assert svc.salt_fingerprint == other_salt.fingerprint
    for k, e in elems.items():
        rec = svc.store.get((k, "2024-01-01"))
        assert rec.salt_fingerprint == other_salt.fingerprint
        assert rec.sketch == sk.build(Algo.HLL, 10, e, other_salt)
    # new ingests merge with rotated records
    svc.ingest("d", "2024-01-01", [b"new"])
    assert svc.estimate([("a", "2024-01-01"), ("d", "2024-01-01")])["merged"] == 2
    after = svc.store.get(("a", "2024-01-01")).sketch
    with pytest.raises(SaltMismatch):
        sk.merge(before, after)


def test_rotation_without_raw_streams_is_refused(tmp_path, salt, other_salt):
    svc = SketchService(tmp_path / "s", salt, ApiPolicy(), Algo.HLL, 10, keep_raw=False)
    for i in range(4):
        svc.ingest(f"d{i}", "2024-01-01", [b"x%d" % i])
    snapshot = {k: svc.store.get_bytes(k) for k in svc.store.keys()}
    report = svc.rotate_salt(other_salt)
    assert report["refused"] and report["stranded"] == 4 and report["rotated"] == 0
    assert {k: svc.store.get_bytes(k) for k in svc.store.keys()} == snapshot
    assert svc.salt_fingerprint == salt.fingerprint


def test_rotation_refused_when_caller_has_no_streams(make_service, other_salt):
    svc = make_service(param=10)
    svc.ingest("a", "2024-01-01", [b"x"])
    report = svc.rotate_salt(other_salt, raw_streams_available=False)
    assert report["refused"] and report["stranded"] == 1


# --- HTTP --------------------------------------------------------------------------


def _raw_request(client, method, path, body=None):
    data = None if body is None else json.dumps(body).encode()
    req = urllib.request.Request(client.base_url + path, data=data, method=method,
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as exc:
        return exc.code, exc.read()


def test_http_round_trip_raw_mode(http_service, salt):
    svc, client = http_service(param=12)
    m = sk.build(Algo.HLL, 12, _elems(b"p", 300), salt)
    client.put("shop", "2024-01-01", m)
    assert client.get_bytes("shop", "2024-01-01") == sk.serialize(m)
    with pytest.raises(DuplicateKey):
        client.put("shop", "2024-01-01", m)
    with pytest.raises(UnknownKey):
        client.get_bytes("shop", "2024-01-02")
    client.ingest("shop", "2024-01-02", _elems(b"p", 300, start=150))
    got = client.estimate([("shop", "2024-01-01"), ("shop", "2024-01-02")])
    assert got["merged"] == 2
    assert abs(got["estimate"] - 450) < 45


def test_http_restricted_information_barrier(http_service, salt):
    svc, client = http_service(mode=ApiMode.RESTRICTED, rounding=10, param=10)
    client.ingest("bar", "2024-01-01", _elems(b"v", 700))
    client.ingest("bar", "2024-01-02", _elems(b"v", 700, start=300))
    payloads = [svc.store.get_bytes(k) for k in svc.store.keys()]
    responses = [
        _raw_request(client, "POST", "/estimate", {"keys": [["bar", "2024-01-01"], ["bar", "2024-01-02"]]}),
        _raw_request(client, "POST", "/estimate", {"keys": [["bar", "2024-01-01"]], "rounding": 1}),
        _raw_request(client, "GET", "/sketch?dimension=bar&period=2024-01-01"),
        _raw_request(client, "PUT", "/sketch", {"dimension": "x", "period": "2024-01-01",
                                                "sketch": base64.b64encode(sk.serialize(
                                                    sk.empty(Algo.HLL, 10, salt))).decode()}),
        _raw_request(client, "POST", "/estimate", {"keys": "nonsense"}),
        _raw_request(client, "GET", "/elsewhere"),
    ]
    statuses = [s for s, _ in responses]
    assert statuses == [200, 200, 403, 403, 400, 404]
    ok = json.loads(responses[0][1])
    assert set(ok) == {"estimate", "merged"} and ok["estimate"] % 10 == 0
    for _, body in responses:
        for payload in payloads:
            regs = payload[20:]
            for needle in (regs[:64], base64.b64encode(payload)[:40], payload.hex()[:64].encode()):
                assert needle not in body
    with pytest.raises(PolicyViolation):
        client.get_bytes("bar", "2024-01-01")
    # two ingests + six raw requests + one client call
    assert len(_audit_lines(svc)) == 2 + len(responses) + 1


def test_http_bad_json(http_service):
    _, client = http_service()
    req = urllib.request.Request(client.base_url + "/ingest", data=b"{not json", method="POST")
    with pytest.raises(urllib.error.HTTPError) as err:
        urllib.request.urlopen(req, timeout=10)
    assert err.value.code == 400


def test_stray_file_in_place_of_dimension_dir(tmp_path):
    store = SketchStore(tmp_path)
    (tmp_path / "notes").write_text("not a directory")
    with pytest.raises(UnknownKey):
        store.get(("notes", "2024-01-01"))
    assert store.keys() == []
