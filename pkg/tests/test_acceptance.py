"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

The end-to-end criteria (6-8) share a fixture: tinycnn pretrained for 10 epochs
on seeded 4-class bar images, then either fine-tuned for 20 more epochs
(baseline) or pruned to 50% kernel sparsity over those same 20 epochs.
"""

import json
import math
import struct
import time
import zlib
from functools import lru_cache
from statistics import median

import numpy as np
import pytest

from kcprune import ckptio, datasets, kcp
from kcprune.cli import main
from kcprune.distill import combined_loss, fd_loss
from kcprune.errors import FormatError
from kcprune.nncore import ModelGraph, grad_check, init_state, tinycnn
from kcprune.nncore import graph as G
from kcprune.nncore.graph import ARCH_DIR
from kcprune.nncore.losses import softmax_cross_entropy
from kcprune.nncore.train import TrainConfig, evaluate, train_epoch
from oracles import central_difference, full_sort_select, idx_bytes, loop_mean_kernels

# fixture for criteria 6-8
N_TRAIN, N_EVAL, CLASSES, SIZE, SEP = 4000, 1000, 4, 16, 2.0
PRETRAIN = TrainConfig(epochs=10, batch_size=64, lr=0.05, momentum=0.9, weight_decay=5e-4)
FINETUNE = TrainConfig(epochs=20, batch_size=64, lr=0.01, momentum=0.9, weight_decay=5e-4)
TARGET, PRUNE_EPOCHS = 0.5, 20


@lru_cache(maxsize=None)
def pretrained(seed):
    g = tinycnn()
    st = init_state(g, seed)
    tr = datasets.synth_dataset(seed, N_TRAIN, CLASSES, SIZE, SEP)
    ev = datasets.synth_dataset(seed + 1000, N_EVAL, CLASSES, SIZE, SEP)
    for e in range(PRETRAIN.epochs):
        train_epoch(g, st, tr, PRETRAIN, e, seed=seed)
    return g, st, tr, ev, evaluate(g, st, ev)[0]


@lru_cache(maxsize=None)
def final_accuracy(seed, variant):
    g, st, tr, ev, _ = pretrained(seed)
    st = st.copy()
    if variant == "baseline":
        for e in range(FINETUNE.epochs):
            train_epoch(g, st, tr, FINETUNE, PRETRAIN.epochs + e, seed=seed)
        return evaluate(g, st, ev)[0]
    kw = {"soft": {}, "hard": {"finetune_mode": "hard"}}.get(variant)
    if kw is None:
        kw = {"criteria": "adversarial", "adversarial_layer_fraction": float(variant[3:])}
    cfg = kcp.PruneConfig(TARGET, PRUNE_EPOCHS, seed=seed, **kw)
    st, rep = kcp.run_schedule(g, st, tr, cfg, FINETUNE, eval_dataset=ev, epoch_offset=PRETRAIN.epochs)
    assert rep.records[-1]["kernel_sparsity"] == pytest.approx(TARGET, abs=0.02)
    return rep.records[-1]["eval_accuracy"]


# 1 -------------------------------------------------------------------------

def test_c01_flops_anchors(capsys, verdict):
    anchors = {20: 4.06e7, 32: 6.89e7, 56: 1.25e8, 110: 2.53e8}
    parts, ok = [], True
    for depth, ref in anchors.items():
        t = time.perf_counter()
        code = main(["flops", str(ARCH_DIR / f"resnet{depth}.json"), "--json"])
        dt = time.perf_counter() - t
        got = json.loads(capsys.readouterr().out)["flops"]
        rel = abs(got - ref) / ref
        ok &= code == 0 and rel <= 0.02 and dt < 1.0
        parts.append(f"R{depth} {got:.3E} ({rel:.2%}, {dt:.2f}s)")
    verdict(1, ok, "; ".join(parts))


# 2 -------------------------------------------------------------------------

def test_c02_selection_oracle(verdict):
    rng = np.random.default_rng(2024)
    t = time.perf_counter()
    bad = ties = 0
    for case in range(1000):
        layers = int(rng.integers(1, 4))
        ties += case % 2
        dist = {}
        for j in range(layers):
            shape = tuple(int(v) for v in rng.integers(1, 65, size=2))
            if case % 2:
                dist[j] = rng.integers(0, 5, size=shape).astype(np.float64)  # heavy ties
            else:
                dist[j] = rng.random(shape) * 10
        p = float(rng.choice([0.0, 1.0, rng.random()], p=[0.05, 0.05, 0.9]))
        adv = {j for j in dist if rng.random() < 0.5}
        criteria = "adversarial" if adv else "center"
        got = kcp.select_prune_set(dist, p, criteria, adv)
        for j, d in dist.items():
            k = math.floor(p * d.size + 0.5)
            want = full_sort_select(d, k, largest=j in adv)
            have = {(int(n), int(m)) for n, m in zip(*np.nonzero(got[j]))}
            bad += have != want
    dt = time.perf_counter() - t
    verdict(2, bad == 0 and dt < 30, f"{bad} mismatches over 1000 cases ({ties} tie-heavy), {dt:.1f}s")


# 3 -------------------------------------------------------------------------

def test_c03_cluster_center_oracle(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        co, ci = (int(v) for v in rng.integers(1, 17, size=2))
        k = int(rng.choice([1, 3, 5]))
        w = (rng.standard_normal((co, ci, k, k)) * rng.uniform(0.01, 10)).astype(np.float32)
        got = kcp.cluster_center(w)
        want = np.array(loop_mean_kernels(w))
        rel = np.abs(got - want) / np.maximum(np.abs(want), 1e-300)
        worst = max(worst, float(rel.max()))
    kern = rng.standard_normal((3, 3)).astype(np.float32)
    sym = kcp.cluster_center(np.stack([kern, -kern])[:, None])
    zero = bool(np.all(sym == 0.0))
    verdict(3, worst <= 1e-12 and zero, f"max rel error {worst:.2e} over 200 layers; {{K,-K}} center zero: {zero}")


# 4 -------------------------------------------------------------------------

def _gradcheck_cases():
    r = np.random.default_rng(4)
    conv_pool = ModelGraph("conv_pool", (2, 6, 6), 3, [
        G.conv2d(2, 3, 3, padding=1, bias=True), G.relu(), G.maxpool2d(2),
        G.conv2d(3, 4, 2, stride=1), G.relu(), G.flatten(), G.linear(16, 3),
    ])
    strided = ModelGraph("strided", (2, 7, 7), 3, [
        G.conv2d(2, 3, 3, stride=2, padding=1), G.relu(), G.global_avg_pool(), G.linear(3, 3),
    ])
    bn = ModelGraph("bn", (2, 5, 5), 3, [
        G.conv2d(2, 4, 3, padding=1), G.batchnorm2d(4), G.relu(), G.global_avg_pool(), G.linear(4, 3),
    ])
    residual = ModelGraph("residual", (2, 4, 4), 2, [
        G.conv2d(2, 3, 3, padding=1), G.relu(),
        G.conv2d(3, 4, 3, stride=2, padding=1), G.conv2d(3, 4, 1, stride=2, input_from=1),
        G.residual_add(3, input_from=2), G.relu(), G.residual_add(5), G.global_avg_pool(), G.linear(4, 2),
    ])
    dense = ModelGraph("dense", (1, 2, 3), 4, [G.flatten(), G.linear(6, 5), G.linear(5, 4)])
    out = []
    for g, n, tol in ((conv_pool, 3, 1e-4), (strided, 3, 1e-4), (bn, 4, 1e-4), (residual, 3, 1e-4),
                      (dense, 3, 1e-6)):
        st = init_state(g, 11)
        for name, v in st.params.items():
            if name.endswith("bias") or (".1." in name and g is bn):
                v[:] = r.uniform(0.5, 1.5, v.shape) if name.endswith("weight") else r.uniform(-0.3, 0.3, v.shape)
        x = r.standard_normal((n,) + g.input_shape)
        y = r.integers(0, g.class_count, n)
        out.append((g, st, x, y, tol))
    return out


def test_c04_gradient_checks(verdict):
    t = time.perf_counter()
    parts, ok = [], True
    kinds = set()
    for g, st, x, y, tol in _gradcheck_cases():
        rep = grad_check(g, st, x, y, tolerance=tol, per_param=8, seed=1)
        kinds |= {l.kind for l in g.layers}
        ok &= rep.passed
        parts.append(f"{g.name} {rep.max_rel_error:.1e}/{tol:.0e}")

    # KL path: analytic gradient of the distillation loss, alone and through a network
    rng = np.random.default_rng(9)
    ct, cs = rng.standard_normal((1, 6)), rng.standard_normal((1, 6))
    _, grad = fd_loss(ct, cs, 15.0)
    kl_err = 0.0
    for i in range(6):
        num = central_difference(lambda: fd_loss(ct, cs, 15.0)[0], cs, i, 1e-5)
        kl_err = max(kl_err, abs(num - grad[0, i]) / max(abs(num), abs(grad[0, i]), 1e-10))
    net = ModelGraph("fd", (1, 2, 3), 3, [G.flatten(), G.linear(6, 5), G.linear(5, 3)])
    target = rng.standard_normal((2, 5))
    labels = np.array([0, 2])

    def objective(logits, tapped):
        loss, gl, gf = combined_loss(softmax_cross_entropy(logits, labels), fd_loss(target, tapped[1], 4.0), 0.9)
        return loss, gl, {1: gf}

    rep = grad_check(net, init_state(net, 2), rng.standard_normal((2, 1, 2, 3)), objective=objective, taps=(1,),
                     tolerance=1e-6, per_param=8)
    ok &= kl_err <= 1e-6 and rep.passed
    parts.append(f"KL {kl_err:.1e}, KL+CE net {rep.max_rel_error:.1e}/1e-06")
    want = {"conv2d", "linear", "batchnorm2d", "relu", "maxpool2d", "global_avg_pool", "flatten", "residual_add"}
    ok &= want <= kinds
    dt = time.perf_counter() - t
    ok &= dt < 120
    verdict(4, ok, f"{'; '.join(parts)}; {len(kinds)} layer kinds; {dt:.1f}s")


# 5 -------------------------------------------------------------------------

def test_c05_schedule(verdict):
    cfg = kcp.PruneConfig(0.5, 10, seed=0)
    seq = kcp.portion_schedule(cfg)
    seq_ok = np.allclose(seq, [0.05 * k for k in range(1, 11)], rtol=0, atol=1e-12)

    g = tinycnn()
    tr = datasets.synth_dataset(5, 512, 4, 16, 2.0)
    tc = TrainConfig(epochs=10, batch_size=64, lr=0.01)
    seen = []
    st, rep = kcp.run_schedule(g, init_state(g, 5), tr, cfg, tc,
                               on_epoch=lambda rec, s, m: seen.append(rec["p"]))
    realized = np.allclose(seen, seq, rtol=0, atol=1e-12)
    per_layer_ok = True
    for j, m in st.masks.items():
        frac = 1 - m.mean()
        zeros = int(np.count_nonzero(~np.any(st.conv_weight(j) != 0, axis=(2, 3))))
        per_layer_ok &= 0.5 - 1 / m.size <= frac <= 0.5 and zeros >= (~m).sum()

    hard = kcp.PruneConfig(0.5, 10, finetune_mode="hard", seed=0)
    history = []

    def keep(rec, s, masks):
        history.append({j: (m.copy(), s.conv_weight(j).copy()) for j, m in masks.items()})

    kcp.run_schedule(g, init_state(g, 5), tr, hard, tc, on_epoch=keep)
    mono = True
    for prev, cur in zip(history, history[1:]):
        for j in cur:
            pm, cm = prev[j][0], cur[j][0]
            mono &= not np.any(cm & ~pm)  # nothing regrows
            mono &= not np.any(cur[j][1][~pm])  # pruned weights stayed zero through training
    final = history[-1]
    hard_final = all(0.5 - 1 / m.size <= 1 - m.mean() for m, _ in final.values())
    ok = seq_ok and realized and per_layer_ok and mono and hard_final
    verdict(5, ok, f"p sequence {seq_ok and realized}; final per-layer sparsity "
                   f"{[round(float(1 - m.mean()), 4) for m in st.masks.values()]}; hard masks monotone {mono}")


# 6-8 -----------------------------------------------------------------------

@pytest.mark.slow
def test_c06_accuracy_retention(verdict):
    t = time.perf_counter()
    pre = pretrained(0)[4]
    base = final_accuracy(0, "baseline")
    soft = final_accuracy(0, "soft")
    dt = time.perf_counter() - t
    drop = (base - soft) * 100
    verdict(6, pre >= 0.95 and drop <= 3.0 and dt < 600,
            f"pretrained {pre:.3f}, baseline {base:.3f}, pruned (S=0.5, soft) {soft:.3f}, "
            f"drop {drop:+.2f} pp, {dt:.0f}s")


@pytest.mark.slow
def test_c07_adversarial_degradation(verdict):
    center = final_accuracy(0, "soft")
    a1 = final_accuracy(0, "adv0.1")
    a4 = final_accuracy(0, "adv0.4")
    verdict(7, a1 < center and a4 < center and a4 <= a1,
            f"center {center:.3f}, adversarial 10% {a1:.3f}, adversarial 40% {a4:.3f}")


@pytest.mark.slow
def test_c08_soft_vs_hard(verdict):
    soft = [final_accuracy(s, "soft") for s in (0, 1, 2)]
    hard = [final_accuracy(s, "hard") for s in (0, 1, 2)]
    ok = median(soft) >= median(hard) - 0.005
    verdict(8, ok, f"soft {soft} (median {median(soft):.3f}) vs hard {hard} (median {median(hard):.3f})")


# 9 -------------------------------------------------------------------------

def test_c09_distillation(verdict):
    rng = np.random.default_rng(10)
    c = rng.standard_normal((2, 3, 4))
    l0, g0 = fd_loss(c, c.copy(), 15.0)
    zero = l0 == 0.0 and not np.any(g0)
    hand, _ = fd_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), 1.0)
    limit, _ = fd_loss(rng.standard_normal((2, 6)), rng.standard_normal((2, 6)), 1e6)
    ct, cs = rng.standard_normal((1, 6)), rng.standard_normal((1, 6))
    _, grad = fd_loss(ct, cs, 2.0)
    err = 0.0
    for i in range(6):
        num = central_difference(lambda: fd_loss(ct, cs, 2.0)[0], cs, i, 1e-5)
        err = max(err, abs(num - grad[0, i]) / max(abs(num), abs(grad[0, i]), 1e-10))
    ok = zero and abs(hand - 0.4621) <= 1e-4 and limit <= 1e-9 and err <= 1e-6
    verdict(9, ok, f"equal->0 {zero}; two-class {hand:.6f}; T=1e6 {limit:.1e}; FD grad rel error {err:.1e}")


# 10 ------------------------------------------------------------------------

def _same_bytes(a, b, names):
    return all((a / n).read_bytes() == (b / n).read_bytes() for n in names)


def _mutate_header(raw, rng):
    """Re-encode a structurally mutated header with a consistent prefix and CRC."""
    _, _, hlen = struct.unpack_from("<4sIQ", raw)
    header = json.loads(raw[16:16 + hlen])
    payload = raw[16 + hlen:]
    junk = [None, -1, 0, 3, 10**12, 1.5, "x", [], {}, [1, -2], True]
    pool = header["tensors"] + header["masks"]
    e = pool[int(rng.integers(len(pool)))]
    choice = int(rng.integers(7))
    if choice == 0:
        e[str(rng.choice(["offset", "length", "shape", "dtype", "name", "layer"]))] = junk[int(rng.integers(len(junk)))]
    elif choice == 1:
        e["offset"] = int(rng.integers(0, len(payload) + 8))
    elif choice == 2:
        e["shape"] = [int(v) for v in rng.integers(1, 9, size=int(rng.integers(1, 5)))]
    elif choice == 3:
        lay = header["graph"]["layers"][int(rng.integers(len(header["graph"]["layers"])))]
        lay[str(rng.choice(list(lay)))] = junk[int(rng.integers(len(junk)))]
    elif choice == 4:
        header[str(rng.choice(["graph", "tensors", "masks", "payload_length"]))] = junk[int(rng.integers(len(junk)))]
    elif choice == 5:
        payload = bytearray(payload)
        payload[int(rng.integers(len(payload)))] = int(rng.integers(256))
        payload = bytes(payload)
        header["payload_crc32"] = zlib.crc32(payload)
    else:
        header["graph"]["input_shape"] = [int(v) for v in rng.integers(0, 20, size=int(rng.integers(1, 4)))]
    hb = json.dumps(header).encode()
    return b"KCPT" + struct.pack("<IQ", 1, len(hb)) + hb + payload


def test_c10_determinism_and_formats(tmp_path, capsys, verdict):
    # determinism through the CLI
    train = ["train", "--arch", "tinycnn", "--data", "synth:4,512,4,16,2.0", "--seed", "4", "--epochs", "2"]
    for d in ("a", "b"):
        assert main(train + ["--out", str(tmp_path / d)]) == 0
    prune = ["prune", "--checkpoint", str(tmp_path / "a" / "model.ckpt"), "--data", "synth:4,512,4,16,2.0",
             "--seed", "4", "--epochs", "3", "--sparsity", "0.5"]
    for d in ("pa", "pb"):
        assert main(prune + ["--out", str(tmp_path / d)]) == 0
    capsys.readouterr()
    det = (_same_bytes(tmp_path / "a", tmp_path / "b", ["model.ckpt", "report.json", "report.csv"])
           and _same_bytes(tmp_path / "pa", tmp_path / "pb", ["pruned.ckpt", "report.json", "report.csv"]))

    # bit-exact round trip including masks and momentum
    src = tmp_path / "pa" / "pruned.ckpt"
    g, st, masks = ckptio.load_checkpoint(src)
    again = ckptio.save_checkpoint(g, st, tmp_path / "again.ckpt", masks=masks, meta=ckptio.read_meta(src))
    g2, st2, masks2 = ckptio.load_checkpoint(again)
    roundtrip = again.read_bytes() == src.read_bytes() and all(
        getattr(st, s)[k].tobytes() == getattr(st2, s)[k].tobytes()
        for s in ("params", "buffers", "velocity") for k in getattr(st, s)
    ) and all(np.array_equal(masks[j], masks2[j]) for j in masks)

    # fuzzing: every outcome must be a typed format error or a valid load
    rng = np.random.default_rng(10_000)
    raw = src.read_bytes()
    target = tmp_path / "fuzz.ckpt"
    crashes, silent, typed = [], 0, 0
    for i in range(10_000):
        mode = i % 4
        if mode == 0:
            data = raw[: int(rng.integers(0, len(raw)))]
        elif mode == 1:
            data = bytearray(raw)
            for _ in range(int(rng.integers(1, 9))):
                data[int(rng.integers(len(data)))] = int(rng.integers(256))
            data = bytes(data)
        elif mode == 2:
            data = _mutate_header(raw, rng)
        else:
            data = b"KCPT" + rng.integers(0, 256, size=int(rng.integers(0, 64)), dtype=np.uint8).tobytes()
        target.write_bytes(data)
        try:
            ckptio.load_checkpoint(target)
            silent += mode == 0
        except FormatError:
            typed += 1
        except Exception as exc:  # noqa: BLE001 - a crash is what we are counting
            crashes.append(f"ckpt case {i}: {type(exc).__name__}: {exc}")

    imgs = rng.integers(0, 256, size=(6, 4, 4), dtype=np.uint8)
    good_img = idx_bytes(0x803, imgs.shape, imgs.reshape(-1).tolist())
    good_lab = idx_bytes(0x801, (6,), [0, 1, 2, 3, 0, 1])
    ip, lp = tmp_path / "i.idx", tmp_path / "l.idx"
    for i in range(10_000):
        which = i % 2
        data = bytearray(good_img if which == 0 else good_lab)
        mode = (i // 2) % 3
        if mode == 0:
            data = data[: int(rng.integers(0, len(data)))]
        elif mode == 1:
            for _ in range(int(rng.integers(1, 5))):
                data[int(rng.integers(min(len(data), 16)))] = int(rng.integers(256))
        else:
            data += rng.integers(0, 256, size=int(rng.integers(1, 8)), dtype=np.uint8).tobytes()
        ip.write_bytes(bytes(data) if which == 0 else good_img)
        lp.write_bytes(bytes(data) if which == 1 else good_lab)
        try:
            datasets.load_idx(ip, lp)
            silent += mode != 1
        except FormatError:
            typed += 1
        except Exception as exc:  # noqa: BLE001
            crashes.append(f"idx case {i}: {type(exc).__name__}: {exc}")

    ok = det and roundtrip and not crashes and silent == 0
    verdict(10, ok, f"byte-identical reruns {det}; round trip {roundtrip}; 20000 fuzz cases: "
                    f"{typed} typed errors, {len(crashes)} crashes, {silent} silent accepts"
                    + (f"; first crash {crashes[0]}" if crashes else ""))
