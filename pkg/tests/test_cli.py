"""End-to-end exercises of the command line interface via CliRunner."""

import hashlib
import json
import shutil
import struct

import numpy as np
import pytest
from click.testing import CliRunner

from framekv import container as C
from framekv import layout as L
from framekv import netstore as NS
from framekv.cli import main

CID_HEX = "ab" * 16


def run(args, code=0):
    res = CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)
    assert res.exit_code == code, f"exit {res.exit_code}:\n{_text(res)}"
    return res


def _text(res):
    try:
        err = res.stderr
    except ValueError:
        err = ""
    return res.output + err


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def corpus(work):
    out = work / "gen"
    run(["--out-dir", out, "gen", "--tokens", 64, "--layers", 3, "--heads", 4,
         "--dim", 8, "--count", 2])
    return out / "corpus"


@pytest.fixture(scope="module")
def layout_file(work, corpus):
    out = work / "search"
    run(["--out-dir", out, "--format", "json", "search", "--corpus-dir", corpus,
         "--group-size", 32])
    return out / "layout.json"


@pytest.fixture(scope="module")
def store(work, corpus, layout_file):
    out = work / "pack"
    run(["--out-dir", out, "--format", "json", "pack", "--corpus-dir", corpus,
         "--layout", layout_file, "--group-size", 32, "--cache-id", CID_HEX])
    return out / "store"


@pytest.fixture(scope="module")
def server(store):
    handle = NS.serve(NS.ChunkStore(str(store)), ("127.0.0.1", 0))
    try:
        yield f"127.0.0.1:{handle.address[1]}"
    finally:
        handle.close()


def test_gen_manifest_and_artifacts(corpus):
    man = json.loads((corpus / "manifest.json").read_text())
    assert man["schema_version"] == 1
    assert man["params"]["tokens"] == 64
    assert len(man["files"]) == 2
    for entry in man["files"]:
        arr = np.load(corpus / entry["name"])
        assert arr.shape == (64, 3, 4, 8)
        assert hashlib.sha256(arr.tobytes()).hexdigest() == entry["sha256"]
    out = corpus.parent
    assert (out / "gen.csv").exists()
    assert (out / "gen.png").exists()


def test_gen_rejects_bad_smoothness(work):
    res = run(["--out-dir", work / "junk", "gen", "--token-smoothness", "1.5"],
              code=2)
    assert "token_smoothness" in _text(res)


def test_search_evaluates_every_tiling(work, corpus, layout_file):
    report = json.loads((work / "search" / "search.json").read_text())
    assert report["summary"]["candidates"] == 12
    assert len(report["rows"]) == 12
    chosen = [r for r in report["rows"] if r[6]]
    assert len(chosen) == 1
    cfg = L.LayoutConfig.from_json(json.loads(layout_file.read_text()))
    assert cfg.a_h * cfg.b_h == 4
    assert cfg.a_d * cfg.b_d == 8
    assert report["summary"]["chosen"] == f"{cfg.tile_h}x{cfg.tile_w}"
    assert (work / "search" / "search.png").exists()


def test_search_requires_existing_corpus(work):
    run(["--out-dir", work / "junk", "search", "--corpus-dir", work / "missing"],
        code=2)


def test_pack_writes_containers(work, store):
    cid = bytes.fromhex(CID_HEX)
    names = sorted(p.name for p in store.glob("*.kvfc"))
    assert names == [C.container_filename(cid, i) for i in range(2)]
    for i, name in enumerate(names):
        cont = C.ChunkContainer.from_bytes((store / name).read_bytes())
        assert cont.cache_id == cid
        assert cont.chunk_index == i
        assert cont.token_start == i * 64
        assert cont.token_count == 64
        assert sorted(cont.payloads) == sorted(L.RESOLUTION_CODE.values())
    report = json.loads((work / "pack" / "pack.json").read_text())
    summary = report["summary"]
    assert summary["containers"] == 2
    assert summary["cache_id"] == CID_HEX
    for res in L.RESOLUTION_ORDER:
        fp16 = summary[f"ratio_fp16_{res}"]
        int8 = summary[f"ratio_int8_{res}"]
        assert fp16 > 0 and int8 > 0
        assert fp16 == pytest.approx(2 * int8, rel=1e-2)
    assert (work / "pack" / "pack.png").exists()


def test_pack_rejects_unknown_resolution(work, corpus):
    res = run(["--out-dir", work / "junk", "pack", "--corpus-dir", corpus,
               "--resolutions", "R240,R999"], code=2)
    assert "unknown resolution" in _text(res)


def test_pack_store_dir_under_file_is_io_error(work, corpus):
    blocker = work / "blocker"
    blocker.write_text("not a directory\n")
    run(["--out-dir", work / "junk", "pack", "--corpus-dir", corpus,
         "--group-size", 32, "--store-dir", blocker / "sub"], code=3)


def test_restore_roundtrip_against_corpus(work, corpus, store):
    out = work / "restore"
    res = run(["--out-dir", out, "--format", "json", "restore", "--store-dir",
               store, "--verify-corpus", corpus])
    assert "restored 2 containers" in res.output
    report = json.loads((out / "restore.json").read_text())
    assert report["summary"]["verified"] is True
    assert report["summary"]["containers"] == 2
    with np.load(out / "restored" / f"restored_{CID_HEX}.npz") as npz:
        assert npz["values"].shape == (128, 3, 4, 8)
        assert npz["scales"].shape == (3, 1)
        assert int(npz["group_size"]) == 32
    assert (out / "restore.png").exists()


def test_restore_detects_foreign_corpus(work, store):
    gen_out = work / "gen2"
    run(["--seed", 9, "--out-dir", gen_out, "gen", "--tokens", 64, "--layers", 3,
         "--heads", 4, "--dim", 8, "--count", 2])
    res = run(["--out-dir", work / "junk", "restore", "--store-dir", store,
               "--verify-corpus", gen_out / "corpus"], code=2)
    assert "differs" in _text(res)


def test_restore_corrupt_payload_is_decode_error(work, store):
    broken = work / "broken_store"
    shutil.copytree(store, broken)
    victim = sorted(broken.glob("*.kvfc"))[0]
    cont = C.ChunkContainer.from_bytes(victim.read_bytes())
    # A valid one-frame header followed by an impossible frame type byte.
    cont.payloads[L.RESOLUTION_CODE["R240"]] = struct.pack("<III", 1, 16, 16) + b"\x07"
    victim.write_bytes(cont.to_bytes())
    run(["--out-dir", work / "junk", "restore", "--store-dir", broken], code=3)


def test_simulate_summary_and_determinism(work):
    outs = [work / "sim1", work / "sim2"]
    for out in outs:
        res = run(["--out-dir", out, "--format", "json", "simulate"])
        assert "vs fixed:R1080" in res.output
    report = json.loads((outs[0] / "simulate.json").read_text())
    summary = report["summary"]
    assert summary["policy"] == "adaptive"
    assert summary["ttft_s"] == pytest.approx(4.163333, abs=1e-4)
    assert summary["fixed_ttft_s"] == pytest.approx(4.9155, abs=1e-4)
    assert 10.0 < summary["saving_pct"] < 30.0
    assert (outs[0] / "simulate.json").read_bytes() == (outs[1] / "simulate.json").read_bytes()
    assert (outs[0] / "simulate.png").exists()


def test_simulate_needs_trace_for_plain_tables(work):
    res = run(["--out-dir", work / "junk", "simulate", "--table", "h20"], code=2)
    assert "trace" in _text(res)


def test_schedule_report_rows(work):
    out = work / "sched"
    out.mkdir()
    run(["--seed", 3, "--out-dir", out, "--format", "json", "schedule",
         "--n-requests", 12, "--rate-hz", 2.0, "--save-trace", out / "trace.jsonl"])
    report = json.loads((out / "schedule.json").read_text())
    assert len(report["rows"]) == 12
    summary = report["summary"]
    assert summary["reuse_count"] + summary["non_reuse_count"] == 12
    lines = (out / "trace.jsonl").read_text().splitlines()
    assert len(lines) == 12
    assert (out / "schedule.png").exists()


def test_similarity_names_token_axis(work):
    out = work / "sim_axes"
    res = run(["--out-dir", out, "--format", "json", "similarity", "--tokens", 96,
               "--layers", 3, "--heads", 4, "--dim", 8])
    assert "ssim argmax axis:" in res.output
    report = json.loads((out / "similarity.json").read_text())
    assert {r[0] for r in report["rows"]} == {"token", "layer", "head", "dim"}
    assert report["summary"]["ssim_argmax"] in {"token", "layer", "head", "dim"}
    assert (out / "similarity.png").exists()


def test_fetch_live_roundtrip(work, store, server):
    out = work / "fetch"
    res = run(["--out-dir", out, "--format", "json", "fetch", "--addr", server,
               "--cache-id", CID_HEX, "--chunk-indexes", "0-1",
               "--policy", "fixed:R240", "--save-slabs"])
    assert "fetched 2 chunks" in res.output
    report = json.loads((out / "fetch.json").read_text())
    assert report["summary"]["chunks"] == 2
    assert report["summary"]["slabs_saved"] == 2
    cont = C.ChunkContainer.from_bytes(
        (store / C.container_filename(bytes.fromhex(CID_HEX), 1)).read_bytes())
    want = C.unpack_chunk(cont, L.RESOLUTION_CODE["R240"])
    with np.load(out / "slab_0001.npz") as npz:
        assert np.array_equal(npz["values"], want.values)
        assert np.array_equal(npz["scales"], want.scales)
    assert (out / "fetch.png").exists()


def test_fetch_unknown_chunk_exits_4(work, server):
    run(["--out-dir", work / "junk", "fetch", "--addr", server, "--cache-id",
         CID_HEX, "--chunk-indexes", "99"], code=4)


def test_repro_chain_produces_all_artifacts(work):
    out = work / "repro"
    res = run(["--seed", 1, "--out-dir", out, "repro"])
    assert "repro artifacts under" in res.output
    for name in ("gen", "search", "pack", "restore", "simulate", "schedule",
                 "similarity"):
        assert (out / f"{name}.csv").exists()
        assert (out / f"{name}.png").exists()
    assert (out / "corpus" / "manifest.json").exists()
    assert (out / "layout.json").exists()
    assert len(list((out / "store").glob("*.kvfc"))) == 4
    assert len(list((out / "restored").glob("*.npz"))) == 1
