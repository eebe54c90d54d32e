"""Acceptance criteria, one test per criterion.

Each test records its outcome in ``RESULTS``; ``conftest.py`` prints one
PASS/FAIL line per criterion at the end of the session. The experiment
criteria (5, 6, 10, 11) train on the bundled synthetic task and take several
minutes each.
"""

import csv
import itertools
import math
import os
import sys
import time
import warnings
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import yaml

from ewcnmt import autodiff as ad
from ewcnmt import cli, experiments, pipeline
from ewcnmt.checkpoint import Checkpoint
from ewcnmt.config import RunConfig
from ewcnmt.data import collate
from ewcnmt.decoding import BeamHypothesis, beam_search, greedy, greedy_decode, search
from ewcnmt.evaluation import average_checkpoints, bleu, perplexity
from ewcnmt.ewc import AnchorParams, EWCTerm, FisherMap, estimate_fisher_diagonal, ewc_penalty, fisher_diagonal
from ewcnmt.finetune import BatchBundle, RegMode, SideTransfer, TransferPlan, total_loss, transfer_init, transferred_names
from ewcnmt.lm import LMTask, lm_config
from ewcnmt.losses import lm_loss, mt_loss
from ewcnmt.data import MonolingualExample
from ewcnmt.tokenizer import BOS, EOS
from ewcnmt.transformer import ModelConfig, init_parameters, lm_logits, lm_parameter_names, positional_encoding

from conftest import mono_batch, parallel_batch, random_ids

RESULTS: dict[int, tuple[bool, str, str]] = {}


@contextmanager
def criterion(number: int, title: str):
    notes: list[str] = []
    try:
        yield notes
    except BaseException as exc:
        RESULTS[number] = (False, title, "; ".join(notes + [f"{type(exc).__name__}: {exc}".splitlines()[0]]))
        print(f"criterion {number} FAIL: {title}")
        raise
    RESULTS[number] = (True, title, "; ".join(notes))
    print(f"criterion {number} PASS: {title}")


# -- shared experiment fixtures ------------------------------------------------


@pytest.fixture(scope="module")
def task(tmp_path_factory):
    root = tmp_path_factory.mktemp("task")
    return experiments.prepare_task(RunConfig(out_dir=str(root)))


@pytest.fixture(scope="module")
def tgt_lms(task):
    """Decoder-side LM and its Fisher map per seed, trained on first use."""
    cache = {}

    def get(seed):
        if seed not in cache:
            out = Path(task.out_dir) / f"lm-tgt-seed{seed}"
            cache[seed] = experiments.pretrain_with_fisher(task.with_overrides({"seed": seed}), "tgt", task.lm.layers, out)
        return cache[seed]

    return get


# -- 1 ---------------------------------------------------------------------------


def test_criterion_1_gradient_integrity():
    config = ModelConfig(enc_layers=2, dec_layers=2, model_dim=32, ff_dim=64, heads=4, src_vocab=100, tgt_vocab=100)
    worst = {}
    with criterion(1, "analytic gradients match central finite differences (1e-2, 10 seeds)") as notes:
        t0 = time.perf_counter()
        for seed in range(10):
            rng = np.random.default_rng(seed)
            lm_c = lm_config(config, LMTask("tgt", 1))
            lm_p = init_parameters(lm_c, seed + 100, lm_parameter_names(lm_c, "tgt"))
            lm_ck = Checkpoint(lm_p, lm_c, kind="lm", extra={"lm_task": LMTask("tgt", 1).to_dict()})
            params, anchors, _ = transfer_init(config, TransferPlan(tgt=SideTransfer(lm_ck), seed=seed))
            for n in params:
                params[n] = params[n] + rng.normal(scale=0.05, size=params[n].shape).astype(np.float32)
            anchor = anchors["tgt"]
            fisher = FisherMap({n: rng.random(anchor.values[n].shape).astype(np.float32) for n in anchor.keys()})
            batch = parallel_batch(rng, config, n=3, max_len=6)
            mono = {"src": mono_batch(rng, 100, "src", 2, 6), "tgt": mono_batch(rng, 100, "tgt", 2, 6)}
            bundle = BatchBundle(batch, mono)
            cases = {
                "mt_loss": lambda p: mt_loss(p, config, batch),
                "lm_loss_src": lambda p: lm_loss(p, config, mono["src"], side="src"),
                "lm_loss_tgt": lambda p: lm_loss(p, config, mono["tgt"], side="tgt"),
                "total_none": lambda p: total_loss(p, config, bundle, RegMode()),
                "total_ewc": lambda p: total_loss(p, config, bundle, RegMode("ewc", ewc_tgt=EWCTerm(anchor, fisher, 2.0))),
                "total_lm_objective": lambda p: total_loss(
                    p, config, bundle, RegMode("lm_objective", lm_weight=0.7, lm_sides=("src", "tgt"))
                ),
            }
            for name, fn in cases.items():
                err = ad.check_gradients(fn, params, max_coords=3, seed=seed)
                worst[name] = max(worst.get(name, 0.0), err)
        notes.append("worst " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))
        notes.append(f"{time.perf_counter() - t0:.0f}s")
        assert all(v < 1e-2 for v in worst.values()), worst


# -- 2 ---------------------------------------------------------------------------


def _bigram_oracle(w, b, sentences):
    """Per-sentence gradient of sum_t log softmax(W[x_t] + b)[x_{t+1}], by hand."""
    fw, fb = np.zeros_like(w), np.zeros_like(b)
    for s in sentences:
        gw, gb = np.zeros_like(w), np.zeros_like(b)
        for prev, nxt in zip(s, s[1:]):
            z = w[prev] + b
            p = np.exp(z - z.max())
            p /= p.sum()
            e = -p
            e[nxt] += 1.0
            gw[prev] += e
            gb += e
        fw += gw**2
        fb += gb**2
    return fw / len(sentences), fb / len(sentences)


def _numpy_lm_loglik(params, config, ids):
    """Float64 forward pass of a one-layer target LM, written without the tape."""
    d = config.model_dim
    P = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def norm(x, pre):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-6) * P[pre + ".gain"] + P[pre + ".bias"]

    ids = np.asarray(ids)
    L = len(ids)
    x = P["tgt_embed"][ids] * math.sqrt(d) + positional_encoding(L, d).astype(np.float64)
    h = norm(x, "dec.0.norm1")
    q, k, v = h @ P["dec.0.self_attn.q"], h @ P["dec.0.self_attn.k"], h @ P["dec.0.self_attn.v"]
    hd = d // config.heads
    out = np.zeros_like(x)
    for head in range(config.heads):
        sl = slice(head * hd, (head + 1) * hd)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(hd)
        s = np.where(np.tril(np.ones((L, L), dtype=bool)), s, -np.inf)
        a = np.exp(s - s.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        out[:, sl] = a @ v[:, sl]
    x = x + out @ P["dec.0.self_attn.o"]
    h = norm(x, "dec.0.norm3")
    x = x + np.maximum(h @ P["dec.0.ff.w1"] + P["dec.0.ff.b1"], 0.0) @ P["dec.0.ff.w2"] + P["dec.0.ff.b2"]
    logits = x @ P["tgt_embed"].T * d**-0.5 + P["tgt_out_bias"]
    logp = logits - logits.max(-1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(-1, keepdims=True))
    return sum(logp[t, ids[t + 1]] for t in range(L - 1))


def _fd_fisher(params, config, sentences, eps=1e-6):
    out = {n: np.zeros(np.shape(v)) for n, v in params.items()}
    for s in sentences:
        for n in params:
            base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
            flat = base[n].reshape(-1)
            g = np.zeros(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = _numpy_lm_loglik(base, config, s)
                flat[i] = orig - eps
                down = _numpy_lm_loglik(base, config, s)
                flat[i] = orig
                g[i] = (up - down) / (2 * eps)
            out[n] += (g**2).reshape(out[n].shape)
    return {n: v / len(sentences) for n, v in out.items()}


def test_criterion_2_fisher_oracle():
    with criterion(2, "Fisher diagonal equals brute-force per-example squared gradients (1e-6)") as notes:
        t0 = time.perf_counter()

        def logistic(params, x):
            p = ad.sigmoid(params["theta"])
            return ad.sum_all(ad.log(p) if x == 1 else ad.log(p * -1.0 + 1.0))

        f = fisher_diagonal(logistic, {"theta": np.zeros((), dtype=np.float32)}, [1])
        assert abs(float(f["theta"]) - 0.25) <= 1e-6
        notes.append(f"logistic F={float(f['theta']):.7f}")

        rng = np.random.default_rng(0)
        w = rng.normal(size=(2, 2)).astype(np.float32)
        b = rng.normal(size=2).astype(np.float32)
        sentences = [tuple(int(t) for t in rng.integers(0, 2, size=int(rng.integers(2, 7)))) for _ in range(12)]

        def bigram(params, s):
            logits = ad.embedding(params["w"], np.asarray(s[:-1])) + params["b"]
            return ad.cross_entropy(logits, list(s[1:]), reduction="sum") * -1.0

        got = fisher_diagonal(bigram, {"w": w, "b": b}, sentences)
        ow, ob = _bigram_oracle(w.astype(np.float64), b.astype(np.float64), sentences)
        err_bigram = max(np.abs(got["w"] - ow).max(), np.abs(got["b"] - ob).max())
        assert err_bigram <= 1e-6

        config = ModelConfig(enc_layers=0, dec_layers=1, model_dim=2, ff_dim=1, heads=1, src_vocab=0, tgt_vocab=5, dropout=0.1)
        names = lm_parameter_names(config, "tgt")
        params = init_parameters(config, 3, names)
        for n in params:
            params[n] = params[n] + rng.normal(scale=0.3, size=params[n].shape).astype(np.float32)
        count = sum(v.size for v in params.values())
        assert count <= 50
        held = [MonolingualExample(random_ids(rng, 5, k)) for k in (2, 3, 4, 5, 6, 7)]
        ck = Checkpoint(params, config, kind="lm", extra={"lm_task": LMTask("tgt", 1).to_dict()})
        est = estimate_fisher_diagonal(ck, held)
        oracle = _fd_fisher(params, config, [ex.ids for ex in held])
        err_lm = max(float(np.abs(est.values[n] - oracle[n]).max()) for n in names)
        assert err_lm <= 1e-6
        notes.append(f"bigram max err {err_bigram:.1e}, {count}-parameter LM max err {err_lm:.1e}, {time.perf_counter() - t0:.1f}s")


# -- 3 ---------------------------------------------------------------------------


def test_criterion_3_penalty_exactness():
    with criterion(3, "EWC penalty values, gradient lambda*F*(theta - theta*), zero outside the anchor") as notes:
        def value(theta, anchor, fisher, lam):
            params = ad.parameters({"w": np.array([theta]), "free": np.ones(3)})
            p = ewc_penalty(params, AnchorParams({"w": [anchor]}), FisherMap({"w": np.array([fisher], dtype=np.float32)}), lam)
            return params, p

        _, p = value(3.0, 0.0, 1.0, 2.0)
        assert abs(p.item() - 9.0) <= 1e-7
        _, p0 = value(0.25, 0.25, 1.0, 2.0)
        assert p0.item() == 0.0

        rng = np.random.default_rng(0)
        anchor = {"a": rng.normal(size=(4, 3)).astype(np.float32), "b": rng.normal(size=5).astype(np.float32)}
        fisher = {n: rng.random(v.shape).astype(np.float32) for n, v in anchor.items()}
        current = {n: v + rng.normal(size=v.shape).astype(np.float32) for n, v in anchor.items()}
        current["free"] = rng.normal(size=(3, 3)).astype(np.float32)
        lam = 0.37
        tensors = ad.parameters(current)
        # the free parameter joins the graph so a stray gradient would be visible
        loss = ewc_penalty(tensors, AnchorParams(anchor), FisherMap(fisher), lam) + ad.sum_all(tensors["free"]) * 0.0
        grads = ad.backward(loss)
        worst = 0.0
        for n in anchor:
            expected = np.float32(lam) * fisher[n] * (current[n] - anchor[n])
            worst = max(worst, float(np.abs(grads[n] - expected).max() / np.abs(expected).max()))
        assert worst < 1e-6
        assert not np.any(grads["free"])
        manual = sum(0.5 * lam * float((fisher[n].astype(np.float64) * (current[n] - anchor[n].astype(np.float64)) ** 2).sum()) for n in anchor)
        assert loss.item() == pytest.approx(manual, rel=1e-6)
        notes.append(f"penalty(F=1, lam=2, delta=3)={p.item()}, gradient rel err {worst:.1e}")


# -- 4 ---------------------------------------------------------------------------


def test_criterion_4_transfer_fidelity():
    config = ModelConfig(enc_layers=6, dec_layers=6, model_dim=32, ff_dim=64, heads=4, src_vocab=60, tgt_vocab=70)
    with criterion(4, "3-layer LM into 6-layer stack: bitwise copy, fresh remainder, zero moments, identical LM logits") as notes:
        lms = {}
        for side in ("src", "tgt"):
            c = lm_config(config, LMTask(side, 3))
            p = init_parameters(c, 99, lm_parameter_names(c, side))
            rng = np.random.default_rng(1)
            p = {n: v + rng.normal(scale=0.1, size=v.shape).astype(np.float32) for n, v in p.items()}
            lms[side] = Checkpoint(p, c, kind="lm", extra={"lm_task": LMTask(side, 3).to_dict()})
        plan = TransferPlan(src=SideTransfer(lms["src"]), tgt=SideTransfer(lms["tgt"]), seed=5)
        params, anchors, state = transfer_init(config, plan)
        fresh = init_parameters(config, 5)
        moved = set()
        for side in ("src", "tgt"):
            names = transferred_names(config, side, 3)
            assert sorted(anchors[side].keys()) == names
            for n in names:
                assert params[n].tobytes() == lms[side].params[n].tobytes(), n
                assert anchors[side].values[n].tobytes() == lms[side].params[n].tobytes(), n
            moved |= set(names)
        for n in params:
            if n not in moved:
                assert params[n].tobytes() == fresh[n].tobytes(), n
        assert any(n.startswith("dec.0.cross_attn") for n in params if n not in moved)
        assert "dec.3.self_attn.q" not in moved and "enc.3.self_attn.q" not in moved
        assert state.step == 0 and all(not m.any() for m in state.m.values()) and all(not v.any() for v in state.v.values())

        rng = np.random.default_rng(2)
        checked = 0
        for side, vocab in (("src", 60), ("tgt", 70)):
            c = lms[side].config
            for _ in range(50):
                n, L = int(rng.integers(1, 4)), int(rng.integers(2, 9))
                ids = rng.integers(0, vocab, size=(n, L))
                mask = np.ones((n, L), dtype=bool)
                if L > 2:
                    mask[0, -1] = False
                a = lm_logits(params, c, side, ids, mask).data
                b = lm_logits(lms[side].params, c, side, ids, mask).data
                assert a.tobytes() == b.tobytes()
                checked += 1
        notes.append(f"{len(moved)} transferred tensors, {checked} random inputs bit-identical")


# -- 5 ---------------------------------------------------------------------------


def test_criterion_5_overfitting_direction(task, tgt_lms):
    with criterion(5, "EWC reduces overfitting of the decoder-pretrained translator (3 seeds)") as notes:
        rows = []
        for seed in range(3):
            lm, fisher = tgt_lms(seed)
            curves = {}
            for mode in ("none", "ewc"):
                o = {"seed": seed, "reg.kind": mode, "transfer.tgt_lm": str(lm), "out_dir": str(Path(task.out_dir) / f"c5-{mode}-{seed}")}
                if mode == "ewc":
                    o["reg.fisher"] = [str(fisher)]
                curves[mode] = [p.dev_perplexity for p in pipeline.finetune(task.with_overrides(o)).history]
            none, ewc = curves["none"], curves["ewc"]
            i = int(np.argmin(none))
            rows.append({
                "seed": seed,
                "none_best": min(none), "none_final": none[-1], "none_rise": max(none[i:]) / none[i] - 1.0,
                "ewc_best": min(ewc), "ewc_final": ewc[-1],
            })
        for r in rows:
            notes.append(
                f"seed {r['seed']}: none best {r['none_best']:.3f} final {r['none_final']:.3f} (rise {100 * r['none_rise']:.0f}%), "
                f"ewc best {r['ewc_best']:.3f} final {r['ewc_final']:.3f}"
            )
        assert all(r["none_rise"] >= 0.05 for r in rows), "(a) reg=none does not degrade by 5% after its minimum"
        assert all(r["ewc_final"] <= r["none_final"] for r in rows), "(b) final dev perplexity"
        assert sum(r["ewc_best"] <= r["none_best"] for r in rows) >= 2, "(c) best dev perplexity"


# -- 6 ---------------------------------------------------------------------------


def test_criterion_6_step_cost(task, tgt_lms):
    with criterion(6, "mean step time: lm_objective >= 1.5x ewc, ewc <= 1.1x none") as notes:
        lm, fisher = tgt_lms(0)
        out = Path(task.out_dir) / "c6"
        # modes are interleaved so that drift in machine speed cannot masquerade as cost
        rows = experiments.experiment_step_cost(task.with_overrides({"seed": 0}), lm, fisher, out)
        by_mode = {m: [r for r in rows if r["mode"] == m] for m in experiments.MODES}
        assert all(sum(r["steps"] for r in rs) >= 500 for rs in by_mode.values())
        seen = {m: [r["examples_seen"] for r in rs] for m, rs in by_mode.items()}
        assert seen["none"] == seen["ewc"] == seen["lm_objective"], "example budgets differ"
        ms = {m: float(np.mean([r["mean_step_ms"] for r in rs])) for m, rs in by_mode.items()}
        notes.append(", ".join(f"{m} {v:.1f} ms" for m, v in ms.items()))
        notes.append(f"lm_objective/ewc {ms['lm_objective'] / ms['ewc']:.2f}, ewc/none {ms['ewc'] / ms['none']:.2f}")
        notes.append(f"{sum(r['steps'] for r in by_mode['none'])} steps per mode")
        with open(out / "step_cost.csv") as fh:
            assert next(csv.reader(fh)) == experiments.STEP_COST_FIELDS
        assert ms["lm_objective"] >= 1.5 * ms["ewc"]
        assert ms["ewc"] <= 1.1 * ms["none"]


# -- 7 ---------------------------------------------------------------------------


_OPENED: list[str] | None = None


def _audit(event, args):
    if _OPENED is not None and event == "open" and args and isinstance(args[0], (str, bytes, os.PathLike)):
        _OPENED.append(os.path.realpath(os.fsdecode(args[0])))


sys.addaudithook(_audit)


@contextmanager
def audit_opens():
    global _OPENED
    _OPENED = []
    try:
        yield _OPENED
    finally:
        _OPENED = None


def test_criterion_7_no_monolingual_reads(task, tgt_lms, tmp_path):
    with criterion(7, "finetune --reg ewc never opens the monolingual corpora") as notes:
        lm, fisher = tgt_lms(0)
        d = task.data
        mono = {os.path.realpath(d.mono_src), os.path.realpath(d.mono_tgt)}
        common = [
            "--data-dir", str(Path(d.train_src).parent), "--src-bpe", d.src_bpe, "--tgt-bpe", d.tgt_bpe,
            "--tgt-lm", str(lm), "--max-steps", "40",
        ]
        with audit_opens() as opened:
            code = cli.main(["finetune", "--reg", "ewc", "--fisher", str(fisher), "--out-dir", str(tmp_path / "ewc"), *common])
        assert code == 0
        assert (tmp_path / "ewc" / "checkpoints" / "index.json").exists()
        touched = mono & set(opened)
        notes.append(f"{len(opened)} files opened, monolingual: {sorted(touched) or 'none'}")
        assert not touched
        resolved = yaml.safe_load((tmp_path / "ewc" / "resolved-config").read_text())
        assert resolved["data"]["mono_tgt"] == d.mono_tgt  # configured, yet never read

        # the auditor does see the corpus when the LM-objective baseline needs it
        with audit_opens() as opened:
            code = cli.main(["finetune", "--reg", "lm-objective", "--out-dir", str(tmp_path / "lmo"), *common])
        assert code == 0 and os.path.realpath(d.mono_tgt) in opened


# -- 8 ---------------------------------------------------------------------------


def _table_step(table, vocab):
    def step(prefixes):
        out = []
        for p in prefixes:
            probs = np.full(vocab, 1e-9)
            for t, q in table.get(tuple(p), {EOS: 1.0}).items():
                probs[t] = q
            out.append(np.log(probs / probs.sum()))
        return np.asarray(out)
    return step


def test_criterion_8_decoding_invariants():
    with criterion(8, "beam=1 equals greedy; beam=2 beats greedy on the 3-step example; alpha=1 ranks by mean log-prob") as notes:
        config = ModelConfig(enc_layers=1, dec_layers=1, model_dim=16, ff_dim=32, heads=2, src_vocab=30, tgt_vocab=12)
        rng = np.random.default_rng(0)
        for seed in range(50):
            params = init_parameters(config, seed)
            params["tgt_out_bias"] = rng.normal(scale=2.0, size=12).astype(np.float32)
            src = list(random_ids(rng, 30, int(rng.integers(3, 8))))
            a = beam_search(params, config, src, beam_size=1, max_len=8)
            g = greedy_decode(params, config, src, max_len=8)
            assert a.tokens == g.tokens
        notes.append("50 random models agree")

        table = {
            (BOS,): {4: 0.55, 5: 0.45},
            (BOS, 4): {6: 0.4, 7: 0.3, 8: 0.3},
            (BOS, 5): {9: 0.9, 6: 0.1},
        }
        step = _table_step(table, 10)
        best = max(
            ((BOS, *body, EOS) for body in itertools.product(range(10), repeat=2)),
            key=lambda s: sum(step([s[:i]])[0][s[i]] for i in range(1, len(s))),
        )
        g, b = greedy(step, 3), search(step, 2, 1.0, 3)
        assert b.tokens == best != g.tokens
        notes.append(f"greedy {g.tokens} {g.logprob:.3f}, beam=2 {b.tokens} {b.logprob:.3f}")

        hyps = [BeamHypothesis((BOS, *range(4, 4 + n), EOS), float(lp), True) for n, lp in ((0, -1.0), (2, -2.5), (4, -4.0))]
        by_score = sorted(hyps, key=lambda h: h.score(1.0))
        by_mean = sorted(hyps, key=lambda h: h.logprob / (len(h.tokens) - 1))
        assert by_score == by_mean
        long_table = {
            (BOS,): {EOS: 0.25, 4: 0.4, 5: 0.35},
            (BOS, 4): {6: 0.9, EOS: 0.1},
            (BOS, 4, 6): {7: 0.9, EOS: 0.1},
            (BOS, 4, 6, 7): {EOS: 0.9, 6: 0.1},
        }
        step = _table_step(long_table, 8)
        assert search(step, 4, 0.0, 6).tokens == (BOS, 5, EOS)  # ln .35 beats ln(.4 * .9 ** 3)
        assert search(step, 4, 1.0, 6).tokens == (BOS, 4, 6, 7, EOS)


# -- 9 ---------------------------------------------------------------------------


def test_criterion_9_evaluation_oracles():
    with criterion(9, "BLEU 100 on identical text, hand BLEU to 1e-4, uniform perplexity = V, average{C,C} = C") as notes:
        lines = ["the cat sat on the mat", "a b c d e f"]
        assert bleu(lines, lines).score == pytest.approx(100.0, abs=1e-9)
        # precisions 4/5, 3/4, 2/3, 1/2, no brevity penalty
        hand = 100 * (0.8 * 0.75 * (2 / 3) * 0.5) ** 0.25
        got = bleu(["a b c d e"], ["a b c d f"]).score
        assert abs(got - hand) <= 1e-4
        bp = bleu(["a b c d"], ["a b c d e f"]).score
        assert abs(bp - 100 * math.exp(1 - 6 / 4)) <= 1e-4

        for vocab in (10, 100):
            config = ModelConfig(enc_layers=0, dec_layers=2, model_dim=16, ff_dim=32, heads=2, src_vocab=0, tgt_vocab=vocab)
            params = init_parameters(config, 0, lm_parameter_names(config, "tgt"))
            params["tgt_embed"][:] = 0.0
            rng = np.random.default_rng(vocab)
            ex = [MonolingualExample(random_ids(rng, vocab, int(rng.integers(3, 9)))) for _ in range(20)]
            ppl = perplexity(params, config, ex, mode="lm")
            assert abs(ppl / vocab - 1.0) <= 0.01
            notes.append(f"uniform V={vocab}: {ppl:.4f}")

        config = ModelConfig(enc_layers=1, dec_layers=1, model_dim=16, ff_dim=32, heads=2, src_vocab=20, tgt_vocab=20)
        c = Checkpoint(init_parameters(config, 3), config)
        avg = average_checkpoints([c, c])
        for n in c.params:
            np.testing.assert_array_max_ulp(avg.params[n], c.params[n], maxulp=1)
        notes.append(f"hand BLEU {got:.4f}")


# -- 10 --------------------------------------------------------------------------

WALL_CLOCK_COLUMNS = {"wall_seconds", "mean_step_ms"}


def _masked_csv(path: Path) -> list[list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    drop = {i for i, name in enumerate(rows[0]) if name in WALL_CLOCK_COLUMNS}
    return [[v for i, v in enumerate(r) if i not in drop] for r in rows]


def _run_pipeline(root: Path, data_dir: Path, config: Path) -> None:
    """Every CLI stage with relative paths, run from ``root``."""
    cwd = os.getcwd()
    os.chdir(root)
    try:
        rel = os.path.relpath(data_dir, root)
        steps = [
            ["train-bpe", "--input", f"{rel}/mono.src", "--vocab-size", "300", "--output", "bpe.src"],
            ["train-bpe", "--input", f"{rel}/mono.tgt", "--vocab-size", "300", "--output", "bpe.tgt"],
            ["pretrain-lm", "--config", str(config), "--side", "src", "--layers", "1", "--bpe", "bpe.src",
             "--mono", f"{rel}/mono.src", "--held-out", f"{rel}/heldout.src", "--out-dir", "lm-src"],
            ["pretrain-lm", "--config", str(config), "--side", "tgt", "--layers", "3", "--bpe", "bpe.tgt",
             "--mono", f"{rel}/mono.tgt", "--held-out", f"{rel}/heldout.tgt", "--out-dir", "lm-tgt"],
            ["estimate-fisher", "--checkpoint", "lm-src", "--bpe", "bpe.src", "--held-out", f"{rel}/heldout.src", "--out-dir", "lm-src"],
            ["estimate-fisher", "--checkpoint", "lm-tgt", "--bpe", "bpe.tgt", "--held-out", f"{rel}/heldout.tgt", "--out-dir", "lm-tgt"],
            ["finetune", "--config", str(config), "--reg", "ewc", "--data-dir", rel, "--src-bpe", "bpe.src", "--tgt-bpe", "bpe.tgt",
             "--src-lm", "lm-src", "--tgt-lm", "lm-tgt", "--fisher", "lm-src/fisher/src", "--fisher", "lm-tgt/fisher/tgt",
             "--out-dir", "ft"],
        ]
        for argv in steps:
            assert cli.main(argv) == 0, argv
        top = sorted(p.name for p in Path("ft/checkpoints").glob("step-*"))
        assert cli.main(["average", "--inputs", *(f"ft/checkpoints/{t}" for t in top), "--output", "avg"]) == 0
        assert cli.main(["translate", "--checkpoint", "avg", "--src-bpe", "bpe.src", "--tgt-bpe", "bpe.tgt",
                         "--input", f"{rel}/test.src", "--output", "hyp.txt", "--beam-size", "2"]) == 0
        assert cli.main(["experiment", "convergence", "--config", str(config), "--data-dir", rel, "--out-dir", "conv"]) == 0
    finally:
        os.chdir(cwd)


def test_criterion_10_determinism(task, tmp_path):
    with criterion(10, "identical seeds give byte-identical artifacts at every stage") as notes:
        config = tmp_path / "small.yaml"
        config.write_text(yaml.safe_dump({
            "seed": 5,
            "lm": {"max_steps": 40, "eval_every": 20},
            "train": {"max_steps": 40, "eval_every": 10},
        }))
        data_dir = Path(task.data.train_src).parent
        roots = [tmp_path / "a", tmp_path / "b"]
        for root in roots:
            root.mkdir()
            _run_pipeline(root, data_dir, config)
        files = sorted(p.relative_to(roots[0]) for p in roots[0].rglob("*") if p.is_file())
        other = sorted(p.relative_to(roots[1]) for p in roots[1].rglob("*") if p.is_file())
        assert files == other
        masked = 0
        for rel in files:
            a, b = roots[0] / rel, roots[1] / rel
            if rel.suffix == ".csv":
                assert _masked_csv(a) == _masked_csv(b), rel
                masked += 1
            else:
                assert a.read_bytes() == b.read_bytes(), rel
        kinds = {"checkpoint manifests": sum(r.name == "manifest" for r in files), "csv (wall clock masked)": masked}
        notes.append(f"{len(files)} files compared: " + ", ".join(f"{v} {k}" for k, v in kinds.items()))
        assert any(str(r).startswith("lm-tgt/fisher/tgt") for r in files)


# -- 11 --------------------------------------------------------------------------


def test_criterion_11_depth_sweep(task):
    with criterion(11, "depth sweep over LM depths 1-3 writes a well-formed CSV with a baseline row") as notes:
        cfg = task.with_overrides({"out_dir": str(Path(task.out_dir) / "sweep")})
        path = experiments.run_depth_sweep(cfg, Path(task.data.train_src).parent)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
            fh.seek(0)
            header = next(csv.reader(fh))
        assert header == experiments.SWEEP_FIELDS
        assert [int(r["depth"]) for r in rows] == [0, 1, 2, 3]
        for r in rows:
            ppl, score, secs = float(r["best_dev_perplexity"]), float(r["bleu"]), float(r["wall_seconds"])
            assert math.isfinite(ppl) and ppl >= 1.0
            assert 0.0 <= score <= 100.0
            assert secs > 0
            notes.append(f"depth {r['depth']}: ppl {ppl:.3f} BLEU {score:.2f}")
