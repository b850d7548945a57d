"""Command-line entry points.

Commands write their tables (CSV or JSON) plus a rendered PNG into --out-dir.
Exit codes: 0 success, 2 invalid argument, 3 I/O failure, 4 protocol or
network failure.
"""

from __future__ import annotations

import functools
import hashlib
import json
import os
import sys

import click
import numpy as np

from . import codec, container as C, fetchsim as F, kvmodel as KV, layout as L
from . import netstore as NS, reports, scheduler as S

RES_ALL = ",".join(L.RESOLUTION_ORDER)


def guard(fn):
    @functools.wraps(fn)
    def inner(*a, **kw):
        try:
            return fn(*a, **kw)
        except (NS.ProtocolError, NS.ChunkNotFound, NS.FetchTimeout) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(4)
        except (OSError, codec.DecodeError) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(3)
        except (ValueError, RuntimeError) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(2)

    return inner


@click.group()
@click.option("--seed", default=0, show_default=True, help="Base RNG seed.")
@click.option("--out-dir", default="reports", show_default=True,
              type=click.Path(file_okay=False))
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv",
              show_default=True, help="Delimited report format.")
@click.pass_context
def main(ctx, seed, out_dir, fmt):
    """Tensor-to-video KV cache toolkit."""
    ctx.obj = {"seed": seed, "out_dir": out_dir, "fmt": fmt}


# ---------------------------------------------------------------------------
# corpus helpers


def _load_manifest(corpus_dir):
    with open(os.path.join(corpus_dir, "manifest.json")) as fh:
        return json.load(fh)


def _load_corpus(corpus_dir):
    man = _load_manifest(corpus_dir)
    out = []
    for ent in man["files"]:
        arr = np.load(os.path.join(corpus_dir, ent["name"]))
        out.append(KV.KVCache(arr))
    return man, out


def _quantized_slabs(caches, group_size):
    slabs = []
    for kv in caches:
        q = KV.quantize(kv.pad_layers(), group_size)
        for j in range(q.layers // 3):
            slabs.append(q.layer_triplet(j))
    return slabs


def _parse_cache_id(text):
    raw = bytes.fromhex(text)
    if len(raw) != 16:
        raise ValueError("cache id must be 32 hex characters")
    return raw


def _default_cache_id(manifest):
    blob = json.dumps(manifest, sort_keys=True).encode()
    return hashlib.sha256(blob).digest()[:16]


def _load_layout(path_or_name, H, D):
    if path_or_name == "identity":
        return L.identity_layout(H, D)
    with open(path_or_name) as fh:
        return L.LayoutConfig.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# commands


@main.command()
@click.option("--tokens", default=2048, show_default=True)
@click.option("--layers", default=6, show_default=True)
@click.option("--heads", default=16, show_default=True)
@click.option("--dim", default=64, show_default=True)
@click.option("--token-smoothness", default=0.9, show_default=True)
@click.option("--channel-smoothness", default=0.3, show_default=True)
@click.option("--count", default=2, show_default=True, help="Corpus files to generate.")
@click.option("--corpus-dir", default=None, help="Default <out-dir>/corpus.")
@click.pass_obj
@guard
def gen(obj, tokens, layers, heads, dim, token_smoothness, channel_smoothness, count,
        corpus_dir):
    """Generate a synthetic KV corpus with a manifest."""
    corpus_dir = corpus_dir or os.path.join(obj["out_dir"], "corpus")
    os.makedirs(corpus_dir, exist_ok=True)
    params = {
        "tokens": tokens, "layers": layers, "heads": heads, "dim": dim,
        "token_smoothness": token_smoothness,
        "channel_smoothness": channel_smoothness,
        "count": count, "seed": obj["seed"],
    }
    files = []
    rows = []
    for i in range(count):
        kv = KV.gen_synthetic_kv(tokens, layers, heads, dim, token_smoothness,
                                 obj["seed"] + i, channel_smoothness)
        name = f"kv_{i:04d}.npy"
        np.save(os.path.join(corpus_dir, name), kv.data)
        digest = hashlib.sha256(kv.data.tobytes()).hexdigest()
        files.append({"name": name, "sha256": digest, "tokens": tokens,
                      "layers": layers, "heads": heads, "dim": dim})
        rows.append([name, digest[:16], kv.data.nbytes])
    manifest = {"schema_version": 1, "params": params, "files": files}
    with open(os.path.join(corpus_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    bundle = reports.ReportBundle("gen", params, ["file", "digest16", "bytes"], rows,
                                  {"corpus_dir": corpus_dir})
    path = bundle.write(obj["out_dir"], obj["fmt"])
    q0 = KV.quantize(KV.KVCache(np.load(os.path.join(corpus_dir, files[0]["name"]))),
                     group_size=min(128, heads * dim))
    view = (q0.values[:, 0].reshape(tokens, -1).astype(np.int16) + 128).astype(np.uint8)
    fig = reports.corpus_figure(view, os.path.join(obj["out_dir"], "gen.png"))
    click.echo(f"wrote {len(files)} corpus files, {path}, {fig}")


@main.command()
@click.option("--corpus-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--resolution", default="R240", show_default=True,
              type=click.Choice(L.RESOLUTION_ORDER))
@click.option("--frames", default=L.DEFAULT_GROUP_FRAMES, show_default=True)
@click.option("--group-size", default=128, show_default=True)
@click.option("--layout-out", default=None, help="Default <out-dir>/layout.json.")
@click.pass_obj
@guard
def search(obj, corpus_dir, resolution, frames, group_size, layout_out):
    """Search the intra-frame tiling that minimizes encoded corpus size."""
    man, caches = _load_corpus(corpus_dir)
    slabs = _quantized_slabs(caches, group_size)
    handle = codec.make_corpus_encoder(resolution, frames)
    trail = []
    best = L.search_intra_layout(slabs, handle, report=trail)
    rows = []
    for cfg, total in trail:
        rows.append([f"{cfg.tile_h}x{cfg.tile_w}", cfg.a_h, cfg.b_h, cfg.a_d, cfg.b_d,
                     total, cfg == best])
    layout_out = layout_out or os.path.join(obj["out_dir"], "layout.json")
    os.makedirs(os.path.dirname(layout_out) or ".", exist_ok=True)
    with open(layout_out, "w") as fh:
        json.dump(best.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    params = {"corpus": man["params"], "resolution": resolution, "frames": frames,
              "group_size": group_size}
    summary = {"chosen": f"{best.tile_h}x{best.tile_w}", "candidates": len(rows),
               "layout_file": layout_out}
    bundle = reports.ReportBundle(
        "search", params,
        ["tile", "a_h", "b_h", "a_d", "b_d", "encoded_bytes", "chosen"], rows, summary)
    path = bundle.write(obj["out_dir"], obj["fmt"])
    fig = reports.search_figure(
        [(r[0], r[5]) for r in rows], f"{best.tile_h}x{best.tile_w}",
        os.path.join(obj["out_dir"], "search.png"))
    click.echo(f"chose {best.tile_h}x{best.tile_w} of {len(rows)} candidates, "
               f"{path}, {fig}")


@main.command()
@click.option("--corpus-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--layout", "layout_path", default="identity", show_default=True,
              help="Layout JSON file, or 'identity'.")
@click.option("--resolutions", default=RES_ALL, show_default=True)
@click.option("--frames", default=L.DEFAULT_GROUP_FRAMES, show_default=True)
@click.option("--group-size", default=128, show_default=True)
@click.option("--cache-id", default=None, help="32 hex chars; default from manifest.")
@click.option("--store-dir", default=None, help="Default <out-dir>/store.")
@click.pass_obj
@guard
def pack(obj, corpus_dir, layout_path, resolutions, frames, group_size, cache_id,
         store_dir):
    """Encode the corpus into multi-resolution chunk containers."""
    man, caches = _load_corpus(corpus_dir)
    names = [r.strip() for r in resolutions.split(",") if r.strip()]
    for n in names:
        if n not in L.RESOLUTION_ORDER:
            raise ValueError(f"unknown resolution class {n!r}")
    store_dir = store_dir or os.path.join(obj["out_dir"], "store")
    os.makedirs(store_dir, exist_ok=True)
    cid = _parse_cache_id(cache_id) if cache_id else _default_cache_id(man)
    H, D = caches[0].H, caches[0].D
    cfg = _load_layout(layout_path, H, D)
    n_files = len(caches)
    rows = []
    totals = {n: 0 for n in names}
    raw_elems = 0
    token_base = 0
    per_file = []
    for kv in caches:
        per_file.append(KV.quantize(kv.pad_layers(), group_size))
        raw_elems += kv.data.size
    triplets = per_file[0].layers // 3
    for j in range(triplets):
        for i, q in enumerate(per_file):
            chunk_index = j * n_files + i
            slab = q.layer_triplet(j)
            cont = C.pack_chunk(slab, cfg, names, cache_id=cid,
                                chunk_index=chunk_index,
                                token_start=i * slab.tokens,
                                layer_triplet_index=j, F=frames)
            blob = cont.to_bytes()
            fname = C.container_filename(cid, chunk_index)
            with open(os.path.join(store_dir, fname), "wb") as fh:
                fh.write(blob)
            for name in names:
                nbytes = len(cont.bitstream(L.RESOLUTION_CODE[name]))
                totals[name] += nbytes
                rows.append([fname, chunk_index, j, slab.tokens, name, nbytes])
    fp16_mb = raw_elems * 2 / 1e6
    int8_mb = raw_elems / 1e6
    summary = {"cache_id": cid.hex(), "containers": triplets * n_files,
               "fp16_raw_mb": round(fp16_mb, 3), "int8_raw_mb": round(int8_mb, 3)}
    for name in names:
        summary[f"ratio_fp16_{name}"] = round(raw_elems * 2 / totals[name], 3)
        summary[f"ratio_int8_{name}"] = round(raw_elems / totals[name], 3)
    params = {"corpus": man["params"], "layout": cfg.to_json(), "resolutions": names,
              "frames": frames, "group_size": group_size, "cache_id": cid.hex()}
    bundle = reports.ReportBundle(
        "pack", params,
        ["container", "chunk_index", "triplet", "tokens", "resolution", "payload_bytes"],
        rows, summary)
    path = bundle.write(obj["out_dir"], obj["fmt"])
    fig = reports.pack_figure({n: totals[n] / 1e6 for n in names}, fp16_mb, int8_mb,
                              os.path.join(obj["out_dir"], "pack.png"))
    click.echo(f"packed {summary['containers']} containers to {store_dir}, {path}, {fig}")


@main.command()
@click.option("--store-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--resolution", default="R240", show_default=True,
              type=click.Choice(L.RESOLUTION_ORDER))
@click.option("--restored-dir", default=None, help="Default <out-dir>/restored.")
@click.option("--verify-corpus", default=None, type=click.Path(exists=True),
              help="Corpus dir to verify against, bit-exactly.")
@click.pass_obj
@guard
def restore(obj, store_dir, resolution, restored_dir, verify_corpus):
    """Decode containers back into tensors through the paged-memory path."""
    code = L.RESOLUTION_CODE[resolution]
    restored_dir = restored_dir or os.path.join(obj["out_dir"], "restored")
    os.makedirs(restored_dir, exist_ok=True)
    files = sorted(f for f in os.listdir(store_dir) if f.endswith(".kvfc"))
    if not files:
        raise ValueError(f"no .kvfc containers under {store_dir}")
    rows = []
    slabs = {}
    for fname in files:
        with open(os.path.join(store_dir, fname), "rb") as fh:
            cont = C.ChunkContainer.from_bytes(fh.read())
        if code not in cont.payloads:
            raise ValueError(f"{fname} has no {resolution} entry")
        slab = C.unpack_chunk(cont, code)
        mem = KV.PagedMemory()
        mem.begin_fetch()
        stats = F.restore_stream(cont.bitstream(code), cont.plan(code), cont.layout(),
                                 mem)
        key = cont.cache_id
        slabs.setdefault(key, []).append((cont, slab))
        rows.append([fname, cont.chunk_index, cont.layer_triplet_index,
                     cont.token_count, len(cont.bitstream(code)),
                     stats["peak_buffer_bytes"]])
    outputs = []
    for cid, items in slabs.items():
        items.sort(key=lambda t: t[0].chunk_index)
        tok_max = max(c.token_start + c.token_count for c, _ in items)
        trip_max = max(c.layer_triplet_index for c, _ in items) + 1
        first = items[0][1]
        values = np.zeros((tok_max, trip_max * 3, first.H, first.D), np.int8)
        scales = np.zeros((trip_max * 3, first.scales.shape[1]), np.float32)
        for cont, slab in items:
            t0, j = cont.token_start, cont.layer_triplet_index
            values[t0 : t0 + cont.token_count, 3 * j : 3 * j + 3] = slab.values
            scales[3 * j : 3 * j + 3] = slab.scales
        out = os.path.join(restored_dir, f"restored_{cid.hex()}.npz")
        np.savez(out, values=values, scales=scales, group_size=first.group_size)
        outputs.append(out)
    summary = {"resolution": resolution, "containers": len(rows),
               "outputs": len(outputs)}
    if verify_corpus:
        summary["verified"] = _verify_restored(verify_corpus, slabs)
    params = {"store_dir": store_dir, "resolution": resolution}
    bundle = reports.ReportBundle(
        "restore", params,
        ["container", "chunk_index", "triplet", "tokens", "payload_bytes",
         "peak_stream_bytes"], rows, summary)
    path = bundle.write(obj["out_dir"], obj["fmt"])
    fig = reports.restore_figure([(r[1], r[4], r[5]) for r in rows],
                                 os.path.join(obj["out_dir"], "restore.png"))
    click.echo(f"restored {len(rows)} containers, {path}, {fig}")


def _verify_restored(corpus_dir, slabs):
    man, caches = _load_corpus(corpus_dir)
    n_files = len(caches)
    for cid, items in slabs.items():
        group_size = items[0][1].group_size
        for cont, slab in items:
            i = cont.chunk_index % n_files
            q = KV.quantize(caches[i].pad_layers(), group_size)
            want = q.layer_triplet(cont.layer_triplet_index)
            if not (np.array_equal(slab.values, want.values)
                    and np.array_equal(slab.scales, want.scales)):
                raise ValueError(
                    f"restored chunk {cont.chunk_index} differs from source")
    return True


def _scenario_inputs(table_name, trace_json, chunks, prior, initial_active):
    table = F.LookupTable.load(table_name)
    obj = F.load_table_json(table_name)
    sc = obj.get("scenario", {})
    if trace_json:
        with open(trace_json) as fh:
            trace = F.BandwidthTrace(json.load(fh))
    elif "trace_gbps" in sc:
        trace = F.BandwidthTrace(sc["trace_gbps"])
    else:
        raise ValueError("no bandwidth trace: pass --trace-json")
    chunks = chunks if chunks is not None else sc.get("chunks", 8)
    prior = prior if prior is not None else sc.get("prior_gbps")
    initial_active = initial_active or sc.get("initial_active", "R1080")
    return table, trace, chunks, prior, initial_active


@main.command()
@click.option("--table", "table_name", default="stepdown", show_default=True,
              help="Bundled table name or JSON path.")
@click.option("--trace-json", default=None, help="[[t_s, gbps], ...] file.")
@click.option("--chunks", default=None, type=int)
@click.option("--prior", default=None, type=float, help="Bandwidth prior, Gbps.")
@click.option("--initial-active", default=None)
@click.option("--policy", default="adaptive", show_default=True)
@click.option("--compare/--no-compare", default=True, show_default=True,
              help="Also run fixed:R1080 and report the saving.")
@click.pass_obj
@guard
def simulate(obj, table_name, trace_json, chunks, prior, initial_active, policy,
             compare):
    """Simulate the transfer/decode fetch pipeline on a bandwidth trace."""
    table, trace, chunks, prior, initial_active = _scenario_inputs(
        table_name, trace_json, chunks, prior, initial_active)
    tl = F.simulate_fetch(chunks, trace, table, policy, prior_gbps=prior,
                          initial_active=initial_active)
    timelines = {policy: tl}
    summary = {"policy": policy, "ttft_s": round(tl.ttft, 6),
               "total_bubble_s": round(tl.total_bubble, 6)}
    if compare and policy != "fixed:R1080":
        fx = F.simulate_fetch(chunks, trace, table, "fixed:R1080", prior_gbps=prior,
                              initial_active=initial_active)
        timelines["fixed:R1080"] = fx
        summary["fixed_ttft_s"] = round(fx.ttft, 6)
        summary["saving_pct"] = round(100 * (fx.ttft - tl.ttft) / fx.ttft, 2)
    rows = list(tl.csv_rows())
    params = {"table": table_name, "chunks": chunks, "policy": policy,
              "prior": prior, "initial_active": initial_active}
    bundle = reports.ReportBundle("simulate", params, rows[0], rows[1:], summary)
    path = bundle.write(obj["out_dir"], obj["fmt"])
    fig = reports.timeline_figure(timelines, os.path.join(obj["out_dir"], "simulate.png"))
    msg = f"ttft {summary['ttft_s']} s"
    if "saving_pct" in summary:
        msg += f", {summary['saving_pct']}% vs fixed:R1080"
    click.echo(f"{msg}, {path}, {fig}")


@main.command()
@click.option("--requests", "requests_path", default=None,
              help="JSON-lines request trace; generated when omitted.")
@click.option("--n-requests", default=30, show_default=True)
@click.option("--rate-hz", default=0.2, show_default=True)
@click.option("--reuse-threshold", default=40_000, show_default=True)
@click.option("--table", "table_name", default="stepdown", show_default=True)
@click.option("--bandwidth", default=6.0, show_default=True, help="Constant link Gbps.")
@click.option("--prior", default=6.0, show_default=True)
@click.option("--prefill-a", default=2e-5, show_default=True)
@click.option("--prefill-b", default=1.5e-9, show_default=True)
@click.option("--quantum", default=0.010, show_default=True)
@click.option("--layers", default=30, show_default=True)
@click.option("--capacity", default=None, type=int, help="Batch tokens; unlimited if unset.")
@click.option("--early-admission", is_flag=True)
@click.option("--first-token-coeff", default=0.0, show_default=True)
@click.option("--save-trace", default=None, help="Write the generated trace here.")
@click.pass_obj
@guard
def schedule(obj, requests_path, n_requests, rate_hz, reuse_threshold, table_name,
             bandwidth, prior, prefill_a, prefill_b, quantum, layers, capacity,
             early_admission, first_token_coeff, save_trace):
    """Run the fetching-aware scheduler over a request trace."""
    if requests_path:
        trace = S.load_request_trace(requests_path)
    else:
        trace = S.gen_request_trace(n_requests, obj["seed"], rate_hz, reuse_threshold)
        if save_trace:
            S.save_request_trace(save_trace, trace)
    engine = S.EngineModel(prefill_a, prefill_b, capacity, quantum, layers,
                           first_token_coeff)
    env = S.FetchEnv(F.LookupTable.load(table_name),
                     F.BandwidthTrace.constant(bandwidth), prior_gbps=prior,
                     early_admission=early_admission)
    metrics = S.run_trace(trace, engine, env)
    rows = []
    for r in metrics["requests"]:
        rows.append([r["id"], int(r["reuse"]), r["context_tokens"],
                     round(r["arrival_s"], 6),
                     round(r["fetch_done_s"], 6) if r["fetch_done_s"] is not None else "",
                     round(r["admitted_s"], 6) if r["admitted_s"] is not None else "",
                     round(r["ttft_s"], 6) if r["ttft_s"] is not None else ""])
    summary = {}
    for cls, st in metrics["per_class"].items():
        for k, v in st.items():
            summary[f"{cls}_{k}"] = round(v, 6) if isinstance(v, float) else v
    params = {"n": len(trace), "seed": obj["seed"], "engine": vars(engine),
              "table": table_name, "bandwidth": bandwidth}
    bundle = reports.ReportBundle(
        "schedule", params,
        ["id", "reuse", "context_tokens", "arrival_s", "fetch_done_s", "admitted_s",
         "ttft_s"], rows, summary)
    path = bundle.write(obj["out_dir"], obj["fmt"])
    fig = reports.schedule_figure(metrics, os.path.join(obj["out_dir"], "schedule.png"))
    click.echo(f"{len(trace)} requests, {path}, {fig}")


@main.command()
@click.option("--corpus-dir", default=None, type=click.Path(exists=True, file_okay=False),
              help="Uses the first corpus file; generates one when omitted.")
@click.option("--tokens", default=512, show_default=True)
@click.option("--layers", default=6, show_default=True)
@click.option("--heads", default=16, show_default=True)
@click.option("--dim", default=64, show_default=True)
@click.option("--token-smoothness", default=0.9, show_default=True)
@click.option("--channel-smoothness", default=0.3, show_default=True)
@click.option("--group-size", default=128, show_default=True)
@click.pass_obj
@guard
def similarity(obj, corpus_dir, tokens, layers, heads, dim, token_smoothness,
               channel_smoothness, group_size):
    """Mean SSIM and PSNR between adjacent slices along each tensor axis."""
    if corpus_dir:
        man, caches = _load_corpus(corpus_dir)
        kv = caches[0]
        params = {"corpus": man["params"]}
    else:
        kv = KV.gen_synthetic_kv(tokens, layers, heads, dim, token_smoothness,
                                 obj["seed"], channel_smoothness)
        params = {"tokens": tokens, "layers": layers, "heads": heads, "dim": dim,
                  "token_smoothness": token_smoothness,
                  "channel_smoothness": channel_smoothness, "seed": obj["seed"]}
    q = KV.quantize(kv, min(group_size, kv.channel))
    rep = L.dimension_similarity_report(q)
    rows = [[axis, round(rep[axis]["ssim"], 6), round(rep[axis]["psnr"], 4)]
            for axis in rep]
    argmax = max(rep, key=lambda a: rep[a]["ssim"])
    bundle = reports.ReportBundle("similarity", params, ["axis", "ssim", "psnr"], rows,
                                  {"ssim_argmax": argmax})
    path = bundle.write(obj["out_dir"], obj["fmt"])
    fig = reports.similarity_figure(rep, os.path.join(obj["out_dir"], "similarity.png"))
    click.echo(f"ssim argmax axis: {argmax}, {path}, {fig}")


@main.command()
@click.option("--store-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--addr", default=None, help=f"host:port; default ${NS.ADDR_ENV} or "
              f"{NS.DEFAULT_ADDR}.")
@click.option("--rate-gbps", default=None, type=float,
              help=f"Egress limit; default ${NS.RATE_ENV}.")
@guard
def serve(store_dir, addr, rate_gbps):
    """Serve chunk containers over TCP until interrupted."""
    store = NS.ChunkStore(store_dir)
    handle = NS.serve(store, addr, rate_gbps)
    host, port = handle.address
    click.echo(f"serving {len(store)} chunks on {host}:{port}")
    try:
        while True:
            import time

            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        handle.close()


@main.command()
@click.option("--addr", default=None, help=f"host:port; default ${NS.ADDR_ENV}.")
@click.option("--cache-id", required=True, help="32 hex chars.")
@click.option("--chunk-indexes", default="0", show_default=True,
              help="Comma list or a-b range.")
@click.option("--policy", default="adaptive", show_default=True)
@click.option("--table", "table_name", default="stepdown", show_default=True)
@click.option("--prior", default=6.0, show_default=True)
@click.option("--save-slabs", is_flag=True, help="Write decoded slabs as .npz.")
@click.pass_obj
@guard
def fetch(obj, addr, cache_id, chunk_indexes, policy, table_name, prior, save_slabs):
    """Fetch chunks from a running server through the live pipeline."""
    cid = _parse_cache_id(cache_id)
    idxs = []
    for part in chunk_indexes.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            idxs.extend(range(int(a), int(b) + 1))
        elif part:
            idxs.append(int(part))
    if not idxs:
        raise ValueError("no chunk indexes given")
    table = F.LookupTable.load(table_name)
    out_dir = obj["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    saved = []

    def on_chunk(rec, slab):
        if save_slabs:
            p = os.path.join(out_dir, f"slab_{rec['chunk']:04d}.npz")
            np.savez(p, values=slab.values, scales=slab.scales)
            saved.append(p)

    tl = NS.live_fetch_pipeline(addr, [(cid, i) for i in idxs], table, policy,
                                prior_gbps=prior, on_chunk=on_chunk)
    rows = list(tl.csv_rows())
    params = {"cache_id": cache_id, "chunks": idxs, "policy": policy,
              "table": table_name}
    summary = {"ttft_s": round(tl.ttft, 6), "chunks": len(tl.records),
               "slabs_saved": len(saved)}
    bundle = reports.ReportBundle("fetch", params, rows[0], rows[1:], summary)
    path = bundle.write(out_dir, obj["fmt"])
    fig = reports.timeline_figure({policy: tl}, os.path.join(out_dir, "fetch.png"))
    click.echo(f"fetched {len(tl.records)} chunks, ttft {summary['ttft_s']} s, "
               f"{path}, {fig}")


@main.command()
@click.pass_context
@guard
def repro(ctx):
    """Chain gen, search, pack, restore, simulate, schedule and similarity."""
    obj = ctx.obj
    out = obj["out_dir"]
    corpus = os.path.join(out, "corpus")
    store = os.path.join(out, "store")
    layout_file = os.path.join(out, "layout.json")
    ctx.invoke(gen, tokens=512, layers=6, heads=16, dim=64, token_smoothness=0.9,
               channel_smoothness=0.3, count=2, corpus_dir=corpus)
    ctx.invoke(search, corpus_dir=corpus, resolution="R240",
               frames=L.DEFAULT_GROUP_FRAMES, group_size=128, layout_out=layout_file)
    ctx.invoke(pack, corpus_dir=corpus, layout_path=layout_file, resolutions=RES_ALL,
               frames=L.DEFAULT_GROUP_FRAMES, group_size=128, cache_id=None,
               store_dir=store)
    ctx.invoke(restore, store_dir=store, resolution="R240", restored_dir=None,
               verify_corpus=corpus)
    ctx.invoke(simulate, table_name="stepdown", trace_json=None, chunks=None,
               prior=None, initial_active=None, policy="adaptive", compare=True)
    ctx.invoke(schedule, requests_path=None, n_requests=20, rate_hz=0.2,
               reuse_threshold=40_000, table_name="stepdown", bandwidth=6.0,
               prior=6.0, prefill_a=2e-5, prefill_b=1.5e-9, quantum=0.010, layers=30,
               capacity=None, early_admission=False, first_token_coeff=0.0,
               save_trace=None)
    ctx.invoke(similarity, corpus_dir=corpus, tokens=512, layers=6, heads=16, dim=64,
               token_smoothness=0.9, channel_smoothness=0.3, group_size=128)
    click.echo(f"repro artifacts under {out}")


if __name__ == "__main__":
    main()
