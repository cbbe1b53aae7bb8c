"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are printed even
when output capture is on.
"""

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from fpq import analysis, formats, tensor_io
from fpq.gptq import build_hessian, gptq_quantize, proxy_loss, rtn_baseline
from fpq.lorc import lorc
from fpq.quant import dequantize, quantize
from fpq.scalecast import cast_group_to_fp8, constrain_m1, constrain_m2
from fpq.spec import parse_spec


@pytest.fixture
def report(capsys):
    def emit(n, ok, elapsed, limit, detail):
        status = "PASS" if ok and elapsed < limit else "FAIL"
        with capsys.disabled():
            print(f"\ncriterion {n}: {status} ({elapsed:.2f}s / {limit}s) {detail}")
    return emit


def brute_force_codes(x, fmt):
    """Nearest code by exhaustive search; ties go to the even code, sign follows x."""
    table = formats.decode_table(fmt)
    limit = formats.max_finite(fmt)
    codes = np.arange(table.size)
    xc = np.clip(x, -limit, limit)[:, None]
    d = np.abs(table[None, :] - xc)
    best = d == d.min(axis=1, keepdims=True)
    sign_ok = ((codes & fmt.sign_mask) != 0)[None, :] == (x < 0)[:, None]
    cand = best & sign_ok
    # among distinct-valued candidates (a real tie) keep the even code
    even = cand & ((codes % 2) == 0)[None, :]
    multi = np.array([np.unique(table[row]).size > 1 for row in cand])
    cand = np.where(multi[:, None], even, cand)
    return np.argmax(cand, axis=1)


# -- 1 ------------------------------------------------------------------------

def test_criterion_1_codec_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    details, ok = [], True
    for fmt in (formats.E5M2, formats.E4M3, formats.E3M0, formats.E2M1):
        limit = formats.max_finite(fmt)
        v = np.unique(formats.enumerate_values(fmt))
        mids = 0.5 * (v[1:] + v[:-1])
        n_rand = 100_000 - mids.size
        x = np.concatenate([
            rng.uniform(-1.1 * limit, 1.1 * limit, n_rand // 2),
            rng.standard_normal(n_rand - n_rand // 2) * limit / 64,
            mids,
        ])
        mismatches = int(np.count_nonzero(formats.encode_nearest(x, fmt) != brute_force_codes(x, fmt)))
        ok &= mismatches == 0
        details.append(f"{fmt}:{mismatches} mismatches/{x.size}")
    elapsed = time.perf_counter() - t0
    report(1, ok, elapsed, 10, "; ".join(details))
    assert ok and elapsed < 10


# -- 2 ------------------------------------------------------------------------

def scalar_tensor_oracle(x, spec_text):
    """Element-by-element quantize/dequantize of a per-tensor spec."""
    spec = parse_spec(spec_text)
    xs = x.tolist()
    if spec.is_int:
        lo, hi = min(xs), max(xs)
        s = (hi - lo) / 255
        z = round(-lo / s)
        return np.array([s * (min(255, max(0, round(v / s) + z)) - z) for v in xs]), s
    vals = sorted(set(formats.enumerate_values(spec.fmt).tolist()))
    s = max(abs(v) for v in xs) / formats.max_finite(spec.fmt)
    return np.array([s * min(vals, key=lambda c: abs(c - v / s)) for v in xs]), s


def test_criterion_2_cluster_outlier(report):
    t0 = time.perf_counter()
    x = analysis.cluster_outlier_vector()
    errs, ok = {}, True
    for text in ("int8:asym:tensor", "fp8:e5m2:tensor", "fp8:e4m3:tensor"):
        y = dequantize(quantize(x, parse_spec(text)))
        oracle, s = scalar_tensor_oracle(x, text)
        # the library snaps scales to a 36-bit significand
        ok &= bool(np.allclose(y, oracle, rtol=2.0**-34, atol=0))
        errs[text] = float(np.max(np.abs(y[:14] - x[:14])))
        if text.startswith("int8"):
            outlier_ok = abs(y[-1] - x[-1]) <= s
            ok &= bool(outlier_ok)
    ok &= errs["fp8:e4m3:tensor"] < errs["int8:asym:tensor"]
    ok &= errs["fp8:e5m2:tensor"] < errs["int8:asym:tensor"]
    elapsed = time.perf_counter() - t0
    report(2, ok, elapsed, 1, "clustered max|err| " + ", ".join(f"{k}={v:.4f}" for k, v in errs.items()))
    assert ok and elapsed < 1


# -- 3 ------------------------------------------------------------------------

def test_criterion_3_fp8_vs_int8_activations(report):
    t0 = time.perf_counter()
    specs = {name: parse_spec(name) for name in ("fp8:e4m3:token", "int8:sym:token", "int8:asym:token")}
    means = {}
    for kind in ("relu_skewed", "outlier_injected"):
        acc = {name: 0.0 for name in specs}
        for trial in range(100):
            x = analysis.gen_synthetic(kind, (128, 1024), seed=trial)
            for name, spec in specs.items():
                acc[name] += float(np.mean((dequantize(quantize(x, spec)) - x) ** 2))
        means[kind] = {name: v / 100 for name, v in acc.items()}
    verdicts = {kind: m["fp8:e4m3:token"] < m["int8:sym:token"] for kind, m in means.items()}
    ok = all(verdicts.values())
    elapsed = time.perf_counter() - t0
    detail = "; ".join(
        f"{kind}: e4m3={m['fp8:e4m3:token']:.3g} int8sym={m['int8:sym:token']:.3g} "
        f"[int8asym={m['int8:asym:token']:.3g}, ungated] -> {'ok' if verdicts[kind] else 'int8 wins'}"
        for kind, m in means.items())
    report(3, ok, elapsed, 60, detail)
    assert ok and elapsed < 60


# -- 4 ------------------------------------------------------------------------

def test_criterion_4_format_ordering(report):
    t0 = time.perf_counter()
    names = ("fp4:e2m1:group256", "fp4:e3m0:group256", "fp8:e4m3:group256", "fp8:e5m2:group256")
    acc = dict.fromkeys(names, 0.0)
    rng = np.random.default_rng(4)
    for _ in range(100):
        W = rng.standard_normal((256, 256))
        for name in names:
            acc[name] += float(np.mean((dequantize(quantize(W, parse_spec(name))) - W) ** 2)) / 100
    ok = acc[names[0]] < acc[names[1]] and acc[names[2]] < acc[names[3]]
    elapsed = time.perf_counter() - t0
    report(4, ok, elapsed, 60, ", ".join(f"{n}={v:.4g}" for n, v in acc.items()))
    assert ok and elapsed < 60


# -- 5 ------------------------------------------------------------------------

def test_criterion_5_gptq_dominance(report):
    t0 = time.perf_counter()
    details, ok = [], True
    for text in ("int4:sym:group32", "fp4:e2m1:group32"):
        spec = parse_spec(text)
        rng = np.random.default_rng(5)
        wins, g_sum, r_sum = 0, 0.0, 0.0
        for _ in range(100):
            W = rng.standard_normal((64, 64))
            X = rng.standard_normal((32, 64))
            hess = build_hessian(X)
            g = proxy_loss(W, dequantize(gptq_quantize(W, hess, spec)), X)
            r = proxy_loss(W, dequantize(rtn_baseline(W, spec)), X)
            wins += g <= r
            g_sum += g
            r_sum += r
        ok &= wins >= 95 and g_sum < r_sum
        details.append(f"{text}: gptq<=rtn in {wins}/100, mean {g_sum / 100:.3f} vs {r_sum / 100:.3f}")
    # identity Hessian: no error feedback, so GPTQ must reproduce RTN exactly
    W = np.random.default_rng(55).standard_normal((64, 64))
    hess = build_hessian(np.eye(64))
    same = all(np.array_equal(gptq_quantize(W, hess, parse_spec(t)).codes, rtn_baseline(W, parse_spec(t)).codes)
               for t in ("int4:sym:group32", "fp4:e2m1:group32"))
    ok &= same
    details.append(f"identity-Hessian degeneration exact: {same}")
    elapsed = time.perf_counter() - t0
    report(5, ok, elapsed, 120, "; ".join(details))
    assert ok and elapsed < 120


# -- 6 ------------------------------------------------------------------------

def test_criterion_6_lorc(report):
    t0 = time.perf_counter()
    spec = parse_spec("fp4:e2m1:group32")
    monotone = strict = full = 0
    worst_full = 0.0
    for seed in range(20):
        W = np.random.default_rng(600 + seed).standard_normal((64, 96))
        q = quantize(W, spec)
        ranks = (0, 1, 2, 4, 8, 16, min(W.shape))
        errs = [float(np.linalg.norm(W - lorc(W, q, r)[1])) for r in ranks]
        monotone += all(b <= a for a, b in zip(errs, errs[1:]))
        strict += errs[ranks.index(8)] < errs[0]
        rel = errs[-1] / np.linalg.norm(W)
        worst_full = max(worst_full, rel)
        full += rel <= 1e-8
    ok = monotone == 20 and strict == 20 and full == 20
    elapsed = time.perf_counter() - t0
    report(6, ok, elapsed, 60, f"monotone {monotone}/20, rank-8 strict {strict}/20, "
                               f"full-rank residual max {worst_full:.2e}")
    assert ok and elapsed < 60


# -- 7 ------------------------------------------------------------------------

def _bit_pow2(x):
    bits = np.asarray(x, dtype=np.float64).view(np.uint64)
    exp = (bits >> np.uint64(52)) & np.uint64(0x7FF)
    return ((bits & np.uint64((1 << 52) - 1)) == 0) & (exp > 0) & (exp < 0x7FF)


def test_criterion_7_m1_m2(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    group = 16
    s = np.exp(rng.normal(-4, 3, (10_000, group))).reshape(-1)
    m1 = constrain_m1(s).constrained
    c2 = constrain_m2(s, group)
    s_max = np.repeat(c2.shared_max, group)
    pow2_ok = bool(_bit_pow2(m1).all() and _bit_pow2(s_max / c2.constrained).all())
    m1_bracket = bool(np.all((s <= m1) & (m1 < 2 * s)))
    m2_bracket = bool(np.all((s / 2 < c2.constrained) & (c2.constrained <= s)))

    # reconstruction MSE with one weight row per M2 compute group, four groups per row
    m1_mse = m2_mse = 0.0
    cast_exact, saturations = True, 0
    for _ in range(100):
        W = rng.standard_normal((256, 1024))
        q1 = quantize(W, parse_spec("fp4:e2m1:group256:m1"))
        q2 = quantize(W, parse_spec("fp4:e2m1:group256:m2:1"))
        m1_mse += float(np.mean((dequantize(q1) - W) ** 2)) / 100
        m2_mse += float(np.mean((dequantize(q2) - W) ** 2)) / 100
        for q in (q1, q2):
            cast = cast_group_to_fp8(q)
            saturations += cast.meta["saturations"]
            cast_exact &= bool(np.array_equal(dequantize(cast), dequantize(q)))
    mse_ok = m2_mse <= m1_mse
    ok = pow2_ok and m1_bracket and m2_bracket and mse_ok and cast_exact and saturations == 0
    elapsed = time.perf_counter() - t0
    report(7, ok, elapsed, 60,
           f"pow2 {pow2_ok}, M1 [S,2S) {m1_bracket}, M2 (S/2,S] {m2_bracket}, "
           f"mean MSE M2={m2_mse:.5f} vs M1={m1_mse:.5f} ({'ok' if mse_ok else 'M2 worse'}), "
           f"cast exact {cast_exact}, saturations {saturations}")
    assert ok and elapsed < 60


# -- 8 ------------------------------------------------------------------------

SERIAL_SPECS = ["int8:sym:token", "int8:asym:group7", "int4:sym:group5", "int4:asym:tensor",
                "fp8:e4m3:group8", "fp8:e5m2:token", "fp4:e2m1:group3", "fp4:e3m0:group4",
                "fp4:e2m1:group4:m1", "fp4:e2m1:group6:m2:2"]


def test_criterion_8_serialization(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    failures = ragged = 0
    for i in range(1000):
        if i % 2 == 0:
            ndim = int(rng.integers(1, 5))
            x = rng.standard_normal(tuple(int(d) for d in rng.integers(1, 7, ndim)))
            blob = tensor_io.dumps_tensor(x)
            failures += tensor_io.loads_tensor(blob).tobytes() != x.tobytes()
        else:
            spec = parse_spec(SERIAL_SPECS[i // 2 % len(SERIAL_SPECS)])
            shape = (int(rng.integers(1, 9)), int(rng.integers(1, 17)))
            q = quantize(rng.standard_normal(shape) * 3, spec)
            blob = tensor_io.dumps_quantized(q)
            r = tensor_io.loads_quantized(blob)
            ragged += spec.bits == 4 and q.codes.size % 2 == 1
            failures += (tensor_io.dumps_quantized(r) != blob
                         or not np.array_equal(r.codes, q.codes)
                         or not np.array_equal(dequantize(r), dequantize(q)))
    rejected = 0
    probes = [tensor_io.dumps_tensor(rng.standard_normal((3, 4))),
              tensor_io.dumps_quantized(quantize(rng.standard_normal(7), parse_spec("fp4:e2m1:group3")))]
    for blob in probes:
        for pos in (len(blob) - 1, len(blob) // 2, 20):
            bad = bytearray(blob)
            bad[pos] ^= 0x01
            try:
                (tensor_io.loads_tensor if blob is probes[0] else tensor_io.loads_quantized)(bytes(bad))
            except tensor_io.FormatError:
                rejected += 1
    ok = failures == 0 and rejected == 6 and ragged > 0
    elapsed = time.perf_counter() - t0
    report(8, ok, elapsed, 30, f"round-trip failures {failures}/1000 ({ragged} ragged 4-bit), "
                               f"corruptions rejected {rejected}/6")
    assert ok and elapsed < 30


# -- 9 ------------------------------------------------------------------------

def test_criterion_9_end_to_end(report, tmp_path):
    t0 = time.perf_counter()
    fpq = [sys.executable, "-m", "fpq"]
    steps = [
        ["gen", "--kind", "normal", "--shape", "512x512", "--seed", "9", "--out", str(tmp_path / "w.bin")],
        ["gen", "--kind", "normal", "--shape", "2048x512", "--seed", "10", "--out", str(tmp_path / "x.bin")],
        ["quantize", "--weights", str(tmp_path / "w.bin"), "--calib", str(tmp_path / "x.bin"),
         "--spec", "fp4:e2m1:group256", "--gptq", "--lorc", "8", "--scale-constraint", "m2:1",
         "--out", str(tmp_path / "q.qt"), "--lorc-out", str(tmp_path / "f.lorc"),
         "--report", str(tmp_path / "report.json")],
    ]
    for step in steps:
        r = subprocess.run(fpq + step, capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
    rep = json.loads((tmp_path / "report.json").read_text())
    stages = rep["stages"]
    names = [s["stage"] for s in stages]
    frob = [s["frobenius"] for s in stages]
    steps_ok = [b <= a for a, b in zip(frob, frob[1:-1])]
    cast = stages[-1]
    cast_ok = (cast["cast_added_error"] == 0.0 and cast["saturations"] == 0
               and cast["inexact"] == 0 and cast["frobenius"] == frob[-2])
    ok = names == ["gptq", "lorc", "constrain_m2", "cast_e5m2"] and all(steps_ok) and cast_ok
    elapsed = time.perf_counter() - t0
    trail = " -> ".join(f"{n}={f:.3f}" for n, f in zip(names, frob))
    bad = [f"{names[i]}->{names[i + 1]}" for i, good in enumerate(steps_ok) if not good]
    report(9, ok, elapsed, 120, f"frobenius {trail}; cast exact {cast_ok}"
                                + (f"; increases at {', '.join(bad)}" if bad else ""))
    assert ok and elapsed < 120
