"""Acceptance layer: end-to-end checks with pinned tolerances.

Each test prints one verdict line of the form ``A<n> <name>: PASS/FAIL
(detail)``.  Tolerances and budgets are module constants so the gate is
explicit in one place.
"""

import itertools
import math
import time

import numpy as np

from mitvg.data import (EOS, SPECIAL_TOKENS, DialogueExample, DialogueRound,
                        ImageFeatures, Vocabulary, attach_features, build_vocab,
                        corpus_token_sequences, generate_synthetic, load_features,
                        write_dataset, write_features)
from mitvg.errors import ContractError, DataError, FormatError
from mitvg.evaluation import aggregate_ranks, evaluate, ndcg, rank_of_gt
from mitvg.model import MitvgModel, ModelConfig
from mitvg.tensor import grad_check
from mitvg.train import train

GRAD_TOL = 1e-5           # A1: max relative gradient error
GRAD_BUDGET_S = 120       # A1: wall-clock budget
ROWSUM_TOL = 1e-6         # A2: attention row normalization
PERM_TOL = 1e-6           # A2: grounding permutation equivariance
OVERFIT_STEPS = 400       # A3: within the 500-step allowance
OVERFIT_BUDGET_S = 300    # A3: wall-clock budget
SYNTH_TRAIN = 500         # A4: training dialogues
SYNTH_EVAL = 100          # A4: evaluation dialogues
SYNTH_STEPS = 12000       # A4: within the 20k-step allowance
SYNTH_ACCUM = 2           # A4: gradient accumulation per step
SYNTH_SEEDS = (0, 1, 2)   # A4: seeds for the direction check
MRR_FLOOR = 0.85          # A4: grounded-arm quality bar
SYNTH_BUDGET_S = 2700     # A4: wall-clock budget
AGG_TOL = 1e-9            # A5: real-valued aggregate tolerance
NDCG_HAND_TOL = 1e-4      # A5: hand-derived reference case
FUZZ_MUTATIONS = 100      # A6: corrupt-input trials


def _verdict(tag: str, name: str, ok: bool, detail: str) -> None:
    print(f"{tag} {name}: {'PASS' if ok else 'FAIL'} ({detail})")


# -- A1: gradient fidelity --------------------------------------------------


def _tiny_fixture():
    """20-token vocabulary, K=3 objects, two rounds, float64 tiny shapes."""
    vocab = Vocabulary(SPECIAL_TOKENS + [f"w{i}" for i in range(15)], 1)
    rng = np.random.default_rng(0)
    rounds = [
        DialogueRound(question=["w0", "w1"], answer=["w2", "w3"], grounding=[1]),
        DialogueRound(question=["w4", "w5", "w6"], answer=["w7"], grounding=[0, 2]),
    ]
    feat = ImageFeatures(0, rng.normal(size=(3, 8)).astype(np.float64))
    example = DialogueExample(0, ["w8", "w9", "w10"], rounds, features=feat)
    model = MitvgModel(ModelConfig.tiny(seed=0), vocab)
    return model, example


def test_a1_gradient_fidelity():
    model, example = _tiny_fixture()
    assert len(model.vocab) == 20
    params = model.parameters()
    started = time.monotonic()
    err = grad_check(lambda: model.forward_loss(example, 2), params)
    elapsed = time.monotonic() - started
    ok = err < GRAD_TOL and elapsed < GRAD_BUDGET_S
    _verdict("A1", "gradient fidelity", ok,
             f"max rel err {err:.2e} over {len(params)} tensors, {elapsed:.0f}s")
    assert err < GRAD_TOL
    assert elapsed < GRAD_BUDGET_S


# -- A2: structural invariants ----------------------------------------------


def _all_attentions(model):
    for block in model.grounding.blocks:
        yield block["attn"]
    encoders = [model.encoder]
    if model.final_encoder is not model.encoder:
        encoders.append(model.final_encoder)
    for enc in encoders:
        for layer in enc.layers:
            yield from (layer.self_attn, layer.vis_attn, layer.hist_attn)
    for layer in model.decoder.layers:
        yield from (layer.self_attn, layer.ctx_attn, layer.vis_attn)


def test_a2_structural_invariants():
    model, example = _tiny_fixture()
    failures = []

    # attention rows are distributions after a full forward pass
    c_t, v_g = model.encode_dialogue(example, 2)
    model.decode_teacher_forced([6, 7, 8], c_t, v_g)
    for attn in _all_attentions(model):
        for head in attn.last_weights:
            if not np.allclose(head.sum(axis=1), 1.0, atol=ROWSUM_TOL):
                failures.append("attention row normalization")

    # decoder causality, bit-exact under suffix perturbation
    base = model.decode_teacher_forced([6, 7, 8, 9], c_t, v_g).data
    for z in range(1, 4):
        changed = [6, 7, 8, 9]
        for j in range(z, 4):
            changed[j] = 11
        probs = model.decode_teacher_forced(changed, c_t, v_g).data
        if not np.array_equal(probs[: z + 1], base[: z + 1]):
            failures.append(f"decoder causality at position {z}")

    # incremental causality: a later round cannot reach an earlier state
    variant = DialogueExample(
        example.image_id, example.caption,
        [example.rounds[0],
         DialogueRound(question=["w9"], answer=["w10"], grounding=[2])],
        features=example.features)
    c2a, _ = model.encode_dialogue(example, 1)
    c2b, _ = model.encode_dialogue(variant, 1)
    if not np.array_equal(c2a.values.data, c2b.values.data):
        failures.append("incremental causality")

    # gates strictly inside (0, 1)
    for layer in model.decoder.layers:
        alpha, beta = layer.last_gates
        if not (np.all(alpha > 0) and np.all(alpha < 1)
                and np.all(beta > 0) and np.all(beta < 1)):
            failures.append("gate range")

    # grounding permutation equivariance
    from mitvg.tensor import Tensor
    perm = [2, 0, 1]
    rows = example.features.matrix
    out = model.grounding(Tensor(rows, dtype=np.float64)).data
    out_p = model.grounding(Tensor(rows[perm], dtype=np.float64)).data
    if not np.allclose(out_p, out[perm], atol=PERM_TOL):
        failures.append("grounding permutation equivariance")

    # ablation arm coincides with the empty-grounding fallback, bit-exact
    a = model.grounding.encode(example.features, [1], use_vg=False).data
    b = model.grounding.encode(example.features, [], use_vg=True).data
    if not np.array_equal(a, b):
        failures.append("ablation-arm equivalence")

    ok = not failures
    _verdict("A2", "structural invariants", ok,
             "all six invariants hold" if ok else "; ".join(sorted(set(failures))))
    assert failures == []


# -- A3: single-dialogue overfit --------------------------------------------


def test_a3_overfit_single_dialogue():
    started = time.monotonic()
    examples, features = generate_synthetic(1, 4, seed=7, feature_dim=64)
    attach_features(examples, features)
    vocab = build_vocab(corpus_token_sequences(examples), min_count=1)
    model = MitvgModel(ModelConfig.toy(seed=7), vocab)
    assert model.config.d_model == 64
    train(model, examples, steps=OVERFIT_STEPS, seed=7)

    ex = examples[0]
    total = correct = 0
    greedy_exact = True
    for t in range(1, len(ex.rounds) + 1):
        c_t, v_g = model.encode_dialogue(ex, t)
        ids = model.vocab.encode(ex.rounds[t - 1].answer)
        probs = model.decode_teacher_forced(ids, c_t, v_g)
        pred = np.argmax(probs.data, axis=1)
        targets = np.array(ids + [EOS])
        correct += int((pred == targets).sum())
        total += len(targets)
        if model.generate(c_t, v_g) != ids:
            greedy_exact = False
    accuracy = correct / total
    mrr = evaluate(model, examples).summary["mrr"]
    elapsed = time.monotonic() - started

    ok = accuracy == 1.0 and greedy_exact and mrr == 1.0 and elapsed < OVERFIT_BUDGET_S
    _verdict("A3", "single-dialogue overfit", ok,
             f"{OVERFIT_STEPS} steps, accuracy {accuracy:.3f}, "
             f"greedy exact {greedy_exact}, MRR {mrr:.3f}, {elapsed:.0f}s")
    assert accuracy == 1.0
    assert greedy_exact
    assert mrr == 1.0
    assert elapsed < OVERFIT_BUDGET_S


# -- A4: synthetic-task learning and the grounding direction check ----------


def test_a4_synthetic_task_learning():
    started = time.monotonic()
    train_ex, train_feat = generate_synthetic(SYNTH_TRAIN, 4, seed=0, feature_dim=64)
    eval_ex, eval_feat = generate_synthetic(SYNTH_EVAL, 4, seed=1000, feature_dim=64)
    attach_features(train_ex, train_feat)
    attach_features(eval_ex, eval_feat)
    vocab = build_vocab(corpus_token_sequences(train_ex), min_count=1)

    results = {}
    for seed in SYNTH_SEEDS:
        for use_vg in (True, False):
            model = MitvgModel(ModelConfig.toy(
                seed=seed, use_vg=use_vg, grad_accum=SYNTH_ACCUM), vocab)
            train(model, train_ex, steps=SYNTH_STEPS, seed=seed, use_vg=use_vg)
            summary = evaluate(model, eval_ex, use_vg=use_vg).summary
            results[(seed, use_vg)] = summary["mrr"]
    elapsed = time.monotonic() - started

    floor_ok = all(results[(s, True)] >= MRR_FLOOR for s in SYNTH_SEEDS)
    direction_ok = all(results[(s, True)] > results[(s, False)] for s in SYNTH_SEEDS)
    pairs = ", ".join(
        f"seed {s}: vg {results[(s, True)]:.3f} vs plain {results[(s, False)]:.3f}"
        for s in SYNTH_SEEDS)
    ok = floor_ok and direction_ok and elapsed < SYNTH_BUDGET_S
    _verdict("A4", "synthetic-task learning", ok,
             f"{SYNTH_STEPS} steps x {len(SYNTH_SEEDS)} seeds x 2 arms; {pairs}; "
             f"{elapsed:.0f}s")
    assert floor_ok, pairs
    assert direction_ok, pairs
    assert elapsed < SYNTH_BUDGET_S


# -- A5: metric oracle equivalence ------------------------------------------


def _oracle_rank(scores, gt_index):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order.index(gt_index) + 1


def _oracle_ndcg(scores, relevance):
    k = len([r for r in relevance if r > 0])
    if k == 0:
        return 0.0
    ranked = sorted(zip(scores, range(len(scores))), key=lambda t: (-t[0], t[1]))
    dcg = sum(relevance[idx] / math.log2(p + 1)
              for p, (_, idx) in enumerate(ranked[:k], start=1))
    idcg = sum(r / math.log2(p + 1)
               for p, r in enumerate(sorted(relevance, reverse=True)[:k], start=1))
    return dcg / idcg


def test_a5_metric_oracle_equivalence():
    rng = np.random.default_rng(99)
    rank_mismatches = agg_mismatches = ndcg_mismatches = 0

    for _ in range(1000):
        n = int(rng.integers(2, 101))
        scores = rng.choice([-1.0, 0.0, 0.25, 0.5, 1.0], size=n).tolist()
        gt = int(rng.integers(n))
        if rank_of_gt(scores, gt) != _oracle_rank(scores, gt):
            rank_mismatches += 1
        relevance = rng.choice([0.0, 0.5, 1.0], size=n).tolist()
        if abs(ndcg(scores, relevance) - _oracle_ndcg(scores, relevance)) > AGG_TOL:
            ndcg_mismatches += 1

    exhaustive = 0
    for n in range(1, 7):
        for combo in itertools.product([0.0, 0.5, 1.0], repeat=n):
            for gt in range(n):
                exhaustive += 1
                if rank_of_gt(list(combo), gt) != _oracle_rank(list(combo), gt):
                    rank_mismatches += 1

    for _ in range(200):
        ranks = rng.integers(1, 101, size=int(rng.integers(1, 50))).tolist()
        agg = aggregate_ranks(ranks)
        arr = np.asarray(ranks, dtype=np.float64)
        if (abs(agg["mrr"] - float(np.mean(1.0 / arr))) > AGG_TOL
                or abs(agg["mean"] - float(np.mean(arr))) > AGG_TOL
                or any(abs(agg[f"r{k}"] - float(np.mean(arr <= k))) > AGG_TOL
                       for k in (1, 5, 10))):
            agg_mismatches += 1

    hand = ndcg([2.0, 1.0, 3.0], [1.0, 0.0, 0.5])
    hand_ok = abs(hand - 0.8597) < NDCG_HAND_TOL

    ok = (rank_mismatches == 0 and agg_mismatches == 0 and ndcg_mismatches == 0
          and hand_ok)
    _verdict("A5", "metric oracle equivalence", ok,
             f"1000 random + {exhaustive} exhaustive rank cases, 200 aggregate "
             f"cases, hand NDCG {hand:.5f}")
    assert rank_mismatches == 0
    assert agg_mismatches == 0
    assert ndcg_mismatches == 0
    assert hand_ok


# -- A6: determinism and file formats ---------------------------------------


def _pipeline_bytes(root, seed):
    data_dir = root / f"data{seed}"
    data_dir.mkdir()
    examples, features = generate_synthetic(3, 4, seed=11, feature_dim=12)
    write_dataset(examples, data_dir / "dialogues.jsonl")
    write_features(features, data_dir / "features.bin")

    attach_features(examples, features)
    vocab = build_vocab(corpus_token_sequences(examples), min_count=1)
    model = MitvgModel(ModelConfig.toy(
        seed=13, d_model=16, heads=2, d_ff=32, feature_dim=12), vocab)
    train(model, examples, steps=5, seed=13)
    ckpt = data_dir / "model.ckpt"
    model.save(ckpt)

    report = evaluate(MitvgModel.load(ckpt), examples)
    report_text = repr(sorted(report.summary.items())) + repr(
        [(d.image_id, d.round, d.rank, d.ndcg, d.gt_score) for d in report.details])
    return ((data_dir / "dialogues.jsonl").read_bytes(),
            (data_dir / "features.bin").read_bytes(),
            ckpt.read_bytes(),
            report_text.encode())


def _mutate(blob, rng):
    choice = int(rng.integers(4))
    if choice == 0 and len(blob) > 1:
        return blob[: int(rng.integers(1, len(blob)))]
    if choice == 1:
        pos = int(rng.integers(len(blob)))
        return blob[:pos] + bytes([int(rng.integers(256))]) + blob[pos + 1:]
    if choice == 2:
        return blob + bytes(rng.integers(0, 256, size=int(rng.integers(1, 9))).tolist())
    pos = int(rng.integers(len(blob)))
    return blob[:pos] + blob[pos + 1:]


def test_a6_determinism_and_formats(tmp_path):
    first = _pipeline_bytes(tmp_path, 0)
    second = _pipeline_bytes(tmp_path, 1)
    deterministic = first == second

    # round trips are bit-exact
    _, feature_blob, ckpt_blob, _ = first
    ft_path = tmp_path / "rt.bin"
    ft_path.write_bytes(feature_blob)
    loaded = load_features(ft_path)
    ft2 = tmp_path / "rt2.bin"
    write_features([loaded[k] for k in sorted(loaded)], ft2)
    roundtrip_ok = ft2.read_bytes() == feature_blob
    ck_path = tmp_path / "rt.ckpt"
    ck_path.write_bytes(ckpt_blob)
    model = MitvgModel.load(ck_path)
    ck2 = tmp_path / "rt2.ckpt"
    model.save(ck2)
    roundtrip_ok = roundtrip_ok and ck2.read_bytes() == ckpt_blob

    # corrupt inputs always fail with structured errors
    from mitvg.data import load_dataset
    rng = np.random.default_rng(21)
    dataset_blob = first[0]
    crashes = 0
    loaders = [(dataset_blob, load_dataset), (feature_blob, load_features),
               (ckpt_blob, MitvgModel.load)]
    for i in range(FUZZ_MUTATIONS):
        blob, loader = loaders[i % 3]
        target = tmp_path / f"fuzz{i}"
        target.write_bytes(_mutate(blob, rng))
        try:
            loader(target)
        except (DataError, FormatError, ContractError):
            pass
        except Exception:
            crashes += 1

    ok = deterministic and roundtrip_ok and crashes == 0
    _verdict("A6", "determinism and formats", ok,
             f"pipeline byte-identical {deterministic}, round-trips {roundtrip_ok}, "
             f"{FUZZ_MUTATIONS} mutations with {crashes} crashes")
    assert deterministic
    assert roundtrip_ok
    assert crashes == 0


# -- A7: hyperparameter conformance -----------------------------------------


def test_a7_hyperparameter_conformance():
    cfg = ModelConfig()
    checks = {
        "layer counts 3/3/3": (cfg.vg_layers, cfg.encoder_layers,
                               cfg.decoder_layers) == (3, 3, 3),
        "heads 8": cfg.heads == 8,
        "width 512": cfg.d_model == 512,
        "filter 2048": cfg.d_ff == 2048,
        "truncation 40/20/20": (cfg.max_caption_len, cfg.max_question_len,
                                cfg.max_answer_len) == (40, 20, 20),
        "vocab min count 5": cfg.vocab_min_count == 5,
    }
    failed = [name for name, good in checks.items() if not good]
    ok = not failed
    _verdict("A7", "hyperparameter conformance", ok,
             "default config matches reference shapes" if ok else ", ".join(failed))
    assert failed == []
