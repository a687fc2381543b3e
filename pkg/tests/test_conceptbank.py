import copy
import json

import numpy as np
import pytest

from conceptmil import diffkernel as dk
from conceptmil.conceptbank import (FrozenEncoder, TokenConfig, embed_bank, encode_concept, expert_ctx_name,
                                    init_concept_tensors, load_bank, parse_bank, tokenize)
from conceptmil.errors import DegenerateInputError, ParseError, ValidationError

from conftest import central_diff, rel_err


def make_doc(n_expert=2, n_dd=1, d=8, classes=("tumor", "normal")):
    return {
        "task": "toy",
        "d": d,
        "classes": [
            {
                "name": name,
                "class_prompt": f"a slide of {name} tissue",
                "expert_concepts": [
                    {"text": f"{name} feature {i}", "source": {"title": f"Atlas {i}", "locator": f"doi:{i}"}}
                    for i in range(n_expert)
                ],
                "n_data_driven": n_dd,
            }
            for name in classes
        ],
    }


def test_load_bank_with_26_expert_concepts(tmp_path):
    path = tmp_path / "bank.json"
    path.write_text(json.dumps(make_doc(n_expert=26, n_dd=4)))
    bank = load_bank(path, expert_concepts_per_class=26)
    assert bank.class_names == ["tumor", "normal"]
    assert [c.m for c in bank.classes] == [30, 30]
    assert bank.classes[0].expert_concepts[3].text == "tumor feature 3"


def test_pure_data_driven_bank_is_valid():
    bank = parse_bank(make_doc(n_expert=0, n_dd=2))
    assert [c.m for c in bank.classes] == [2, 2]


def test_class_without_any_concept_is_rejected():
    with pytest.raises(ValidationError):
        parse_bank(make_doc(n_expert=0, n_dd=0))


def test_unknown_class_reference_is_rejected():
    doc = make_doc()
    doc["classes"][0]["expert_concepts"][0]["class"] = "X"
    with pytest.raises(ValidationError, match="unknown class 'X'"):
        parse_bank(doc)


def test_missing_source_fails_validation():
    doc = make_doc()
    del doc["classes"][1]["expert_concepts"][0]["source"]
    with pytest.raises(ParseError, match=r"classes\[1\].expert_concepts\[0\].source"):
        parse_bank(doc)
    doc = make_doc()
    doc["classes"][0]["expert_concepts"][0]["source"]["title"] = " "
    with pytest.raises(ValidationError):
        parse_bank(doc)


@pytest.mark.parametrize("mutate, err", [
    (lambda d: d.pop("task"), ParseError),
    (lambda d: d.update(d=0), ValidationError),
    (lambda d: d["classes"].pop(), ValidationError),
    (lambda d: d["classes"][1].update(name="tumor"), ValidationError),
    (lambda d: d["classes"][0]["expert_concepts"][0].update(text=""), ValidationError),
    (lambda d: d["classes"][0].update(n_data_driven="2"), ParseError),
    (lambda d: d["classes"][0]["expert_concepts"][0].update(embedding=[1.0]), ParseError),
])
def test_schema_violations(mutate, err):
    doc = make_doc()
    mutate(doc)
    with pytest.raises(err):
        parse_bank(doc)


def test_invalid_json_file(tmp_path):
    p = tmp_path / "b.json"
    p.write_text("{not json")
    with pytest.raises(ParseError):
        load_bank(p)


def test_n_data_driven_override():
    bank = parse_bank(make_doc(n_dd=1), n_data_driven=6)
    assert all(c.n_data_driven == 6 for c in bank.classes)


def test_tokenize():
    assert tokenize("") == []
    assert tokenize("Signet-ring cells") == tokenize("signet ring CELLS")
    assert tokenize("nuclear pleomorphism") == tokenize("nuclear pleomorphism")
    ids = tokenize("a b c d e f", vocab_size=16)
    assert len(ids) == 6 and all(0 <= i < 16 for i in ids)


def test_encoder_is_seed_deterministic_and_frozen():
    a, b = FrozenEncoder(8, seed=3), FrozenEncoder(8, seed=3)
    assert a.table.tobytes() == b.table.tobytes()
    assert a.projection.tobytes() == b.projection.tobytes()
    assert FrozenEncoder(8, seed=4).table.tobytes() != a.table.tobytes()
    with pytest.raises(ValueError):
        a.table[0, 0] = 1.0


def test_encode_concept_unit_norm_and_deterministic(rng):
    enc = FrozenEncoder(8, vocab_size=64, token_dim=6, seed=0)
    ctx = rng.normal(0, 0.1, (4, 6))
    ids = tokenize("tumor infiltrating lymphocytes", 64)
    e1 = encode_concept(ids, ctx, enc).data
    e2 = encode_concept(ids, ctx, enc).data
    np.testing.assert_array_equal(e1, e2)
    assert np.linalg.norm(e1) == pytest.approx(1.0, abs=1e-9)
    assert encode_concept([], ctx, enc).shape == (1, 8)
    assert encode_concept(ids, None, enc).shape == (1, 8)
    with pytest.raises(DegenerateInputError):
        encode_concept([], None, enc)


def test_encode_concept_gradient_matches_finite_differences(rng):
    enc = FrozenEncoder(8, vocab_size=64, token_dim=6, seed=0)
    ids = tokenize("gland formation", 64)
    ctx = rng.normal(0, 0.3, (4, 6))
    probe = rng.standard_normal((1, 8))

    def f(c):
        return float((encode_concept(ids, c, enc).data * probe).sum())

    tape = dk.Tape()
    leaf = tape.param(ctx, "ctx")
    emb = encode_concept(ids, leaf, enc)
    loss = dk.matmul(emb, dk.Matrix(probe.T))
    g = dk.backward(tape, loss)["ctx"]
    assert rel_err(g, central_diff(f, ctx)) < 1e-4


def test_embed_bank_row_order_and_norms():
    doc = make_doc(n_expert=2, n_dd=1)
    bank = parse_bank(doc)
    enc = FrozenEncoder(bank.d, vocab_size=128, token_dim=8, seed=1)
    tensors = init_concept_tensors(bank, enc, TokenConfig(4, 4), np.random.default_rng(0))
    embs = embed_bank(bank, enc, tensors)
    assert embs[0].concepts.shape == (3, 8)
    np.testing.assert_allclose(np.linalg.norm(embs[0].concepts.data, axis=1), 1.0, atol=1e-9)
    # expert rows first in file order
    first = encode_concept(tokenize("tumor feature 0", 128), tensors[expert_ctx_name(0)], enc).data
    np.testing.assert_array_equal(embs[0].concepts.data[0], first[0])


def test_same_text_different_context_gives_different_embeddings():
    doc = make_doc(n_expert=1, n_dd=0)
    doc["classes"][1]["expert_concepts"][0]["text"] = doc["classes"][0]["expert_concepts"][0]["text"]
    bank = parse_bank(doc)
    enc = FrozenEncoder(bank.d, vocab_size=128, token_dim=8, seed=1)
    tensors = init_concept_tensors(bank, enc, TokenConfig(4, 4, init_std=0.5), np.random.default_rng(0))
    embs = embed_bank(bank, enc, tensors)
    a, b = embs[0].concepts.data, embs[1].concepts.data
    assert not np.allclose(a, b)
    # with equal contexts they coincide
    tensors[expert_ctx_name(1)] = tensors[expert_ctx_name(0)]
    embs = embed_bank(bank, enc, tensors)
    np.testing.assert_array_equal(embs[0].concepts.data, embs[1].concepts.data)


def test_precomputed_embeddings_path():
    doc = make_doc(n_expert=1, n_dd=1, d=4)
    doc["classes"][0]["expert_concepts"][0]["embedding"] = [2.0, 0.0, 0.0, 0.0]
    doc["classes"][0]["class_prompt_embedding"] = [0.0, 3.0, 0.0, 0.0]
    bank = parse_bank(doc)
    enc = FrozenEncoder(4, vocab_size=64, token_dim=4, seed=0)
    tensors = init_concept_tensors(bank, enc, TokenConfig(2, 2), np.random.default_rng(0))
    assert "class0.expert0.delta" in tensors and "class0.prompt_delta" in tensors
    assert "class0.expert_context" not in tensors
    embs = embed_bank(bank, enc, tensors)
    np.testing.assert_allclose(embs[0].concepts.data[0], [1.0, 0.0, 0.0, 0.0])
    np.testing.assert_allclose(embs[0].prompt.data[0], [0.0, 1.0, 0.0, 0.0])
    # bank round-trips through JSON including embeddings
    assert parse_bank(json.loads(json.dumps(bank.to_json()))) == bank


def test_no_gradient_reaches_frozen_tables():
    bank = parse_bank(make_doc(n_expert=2, n_dd=1))
    enc = FrozenEncoder(bank.d, vocab_size=128, token_dim=8, seed=1)
    table_before = enc.table.tobytes()
    tensors = init_concept_tensors(bank, enc, TokenConfig(4, 4), np.random.default_rng(0))
    tape = dk.Tape()
    leaves = {k: tape.param(v, k) for k, v in tensors.items()}
    embs = embed_bank(bank, enc, leaves)
    grads = dk.backward(tape, dk.sum_all(dk.vstack([e.concepts for e in embs])))
    assert set(grads) == set(tensors)  # only learnable tensors are ever differentiated
    assert enc.table.tobytes() == table_before


def test_bank_is_unchanged_by_copying():
    bank = parse_bank(make_doc())
    assert copy.deepcopy(bank) == bank
