import math

import numpy as np
import pytest

from evidrank.corpus import Claim, Modality
from evidrank.errors import IntegrityError, MissingEmbeddingError, ParseError
from evidrank.index import (
    EmbeddingRecord,
    RetrievalConfig,
    Space,
    VectorIndex,
    cosine,
    load_embeddings,
    load_embeddings_binary,
    retrieve_image,
    retrieve_text,
    save_embeddings_binary,
)


def record(item_id, vector, space=Space.TEXT):
    return EmbeddingRecord(id=item_id, space=space, vector=np.asarray(vector, dtype=np.float32))


def make_claim(claim_id="c1"):
    return Claim(claim_id=claim_id, text="claim text")


class TestCosine:
    def test_identical_vectors(self):
        assert cosine([1.0, 0.0], [1.0, 0.0]) == 1.0

    def test_orthogonal_vectors(self):
        assert cosine([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_forty_five_degrees(self):
        assert cosine([1.0, 1.0], [1.0, 0.0]) == pytest.approx(1.0 / math.sqrt(2.0), abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(IntegrityError):
            cosine([1.0, 0.0], [1.0, 0.0, 0.0])

    def test_zero_norm(self):
        with pytest.raises(IntegrityError):
            cosine([0.0, 0.0], [1.0, 0.0])

    def test_symmetry_and_scaling_invariance(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            u = rng.normal(size=8)
            v = rng.normal(size=8)
            alpha = float(rng.uniform(0.1, 10.0))
            assert cosine(u, v) == pytest.approx(cosine(v, u), abs=1e-6)
            assert cosine(alpha * u, v) == pytest.approx(cosine(u, v), abs=1e-6)

    def test_clamped_against_rounding(self):
        u = np.full(64, 0.1)
        assert cosine(u, u) <= 1.0


class TestEmbeddingRecord:
    def test_rejects_nonfinite(self):
        with pytest.raises(IntegrityError):
            record("x", [1.0, float("nan")])

    def test_rejects_zero_norm(self):
        with pytest.raises(IntegrityError):
            record("x", [0.0, 0.0])

    def test_index_rejects_dimension_mismatch(self):
        with pytest.raises(IntegrityError, match="dimension"):
            VectorIndex([record("a", [1.0, 0.0]), record("b", [1.0, 0.0, 0.0])])

    def test_index_rejects_duplicate_id_in_space(self):
        with pytest.raises(IntegrityError, match="duplicate"):
            VectorIndex([record("a", [1.0, 0.0]), record("a", [0.0, 1.0])])

    def test_same_id_in_both_spaces_is_fine(self):
        index = VectorIndex([record("a", [1.0, 0.0]), record("a", [0.0, 1.0], Space.CROSSMODAL)])
        assert index.has(Space.TEXT, "a") and index.has(Space.CROSSMODAL, "a")


class TestRetrieve:
    def build(self, scores_by_id, claim_vec=(1.0, 0.0), space=Space.TEXT):
        # Candidate with target cosine s against (1, 0): vector (s, sqrt(1-s^2)).
        records = [record("c1", claim_vec, space)]
        for cid, s in scores_by_id.items():
            records.append(record(cid, [s, math.sqrt(1.0 - s * s)], space))
        return VectorIndex(records)

    def test_top_n_truncation_and_order(self):
        index = self.build({"s1": 0.9, "s2": 0.2, "s3": 0.5})
        config = RetrievalConfig(n=2, k_values=(1, 2), k_evidence=1)
        result = retrieve_text(make_claim(), index, config, ["s1", "s2", "s3"])
        assert [c.candidate_id for c in result] == ["s1", "s3"]
        assert [c.initial_rank for c in result] == [1, 2]

    def test_n_larger_than_corpus_returns_all_sorted(self):
        index = self.build({"s1": 0.9, "s2": 0.2, "s3": 0.5})
        config = RetrievalConfig(n=100, k_values=(1,), k_evidence=1)
        result = retrieve_text(make_claim(), index, config, ["s1", "s2", "s3"])
        assert [c.candidate_id for c in result] == ["s1", "s3", "s2"]

    def test_equal_scores_tie_break_by_id(self):
        index = self.build({"sb": 0.5, "sa": 0.5})
        config = RetrievalConfig(n=10, k_values=(1,), k_evidence=1)
        result = retrieve_text(make_claim(), index, config, ["sb", "sa"])
        assert [c.candidate_id for c in result] == ["sa", "sb"]

    def test_image_retrieval_sorts_crossmodal_space(self):
        index = self.build({"i1": 0.1, "i2": 0.8}, space=Space.CROSSMODAL)
        config = RetrievalConfig(n=100, k_values=(1,), k_evidence=1)
        result = retrieve_image(make_claim(), index, config, ["i1", "i2"])
        assert [c.candidate_id for c in result] == ["i2", "i1"]
        assert all(c.modality is Modality.IMAGE for c in result)

    def test_empty_candidate_set_gives_empty_list(self):
        index = VectorIndex([record("c1", [1.0, 0.0], Space.CROSSMODAL)])
        config = RetrievalConfig(n=5, k_values=(1,), k_evidence=1)
        assert retrieve_image(make_claim(), index, config, []) == []

    def test_missing_claim_embedding_is_lookup_error(self):
        index = self.build({"i1": 0.5}, space=Space.CROSSMODAL)
        config = RetrievalConfig(n=5, k_values=(1,), k_evidence=1)
        with pytest.raises(MissingEmbeddingError):
            retrieve_image(make_claim("c-unknown"), index, config, ["i1"])

    def test_scores_are_clamped_and_in_range(self):
        index = self.build({"s1": 1.0})
        config = RetrievalConfig(n=5, k_values=(1,), k_evidence=1)
        [top] = retrieve_text(make_claim(), index, config, ["s1"])
        assert -1.0 <= top.initial_score <= 1.0


class TestRetrievalConfig:
    def test_k_exceeding_n_rejected(self):
        with pytest.raises(IntegrityError, match="K exceeds N"):
            RetrievalConfig(n=10, k_values=(20,), k_evidence=5)

    def test_k_evidence_bounded_by_n(self):
        with pytest.raises(IntegrityError):
            RetrievalConfig(n=10, k_values=(5,), k_evidence=11)


class TestEmbeddingFiles:
    def test_jsonl_loader_parses_and_validates(self, tmp_path):
        path = tmp_path / "emb.jsonl"
        path.write_text(
            '{"id": "a", "space": "text", "vector": [1.0, 2.0]}\n'
            '{"id": "b", "space": "crossmodal", "vector": [0.5, 0.25, 0.125]}\n',
            encoding="utf-8",
        )
        records = load_embeddings(path)
        assert [r.id for r in records] == ["a", "b"]
        assert records[0].vector.dtype == np.float32

    def test_jsonl_loader_reports_bad_line(self, tmp_path):
        path = tmp_path / "emb.jsonl"
        path.write_text('{"id": "a", "space": "warp", "vector": [1.0]}\n', encoding="utf-8")
        with pytest.raises(ParseError, match=":1"):
            load_embeddings(path)

    def test_binary_sidecar_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(11)
        records = [
            record(f"t{i}", rng.normal(size=6)) for i in range(5)
        ] + [record(f"x{i}", rng.normal(size=4), Space.CROSSMODAL) for i in range(3)]
        vec_path, man_path = tmp_path / "emb.f32", tmp_path / "emb.manifest.jsonl"
        save_embeddings_binary(records, vec_path, man_path)
        loaded = load_embeddings_binary(vec_path, man_path)
        assert [(r.id, r.space) for r in loaded] == [(r.id, r.space) for r in records]
        for original, reloaded in zip(records, loaded):
            assert original.vector.tobytes() == reloaded.vector.tobytes()

    def test_binary_and_jsonl_loaders_agree_bit_exactly(self, tmp_path):
        values = [[0.1, -2.5, 3.25], [1e-8, 7.0, -0.333333]]
        jsonl = tmp_path / "emb.jsonl"
        jsonl.write_text(
            "".join(
                f'{{"id": "v{i}", "space": "text", "vector": {list(v)}}}\n'.replace("'", '"')
                for i, v in enumerate(values)
            ),
            encoding="utf-8",
        )
        from_json = load_embeddings(jsonl)
        vec_path, man_path = tmp_path / "emb.f32", tmp_path / "emb.manifest.jsonl"
        save_embeddings_binary(from_json, vec_path, man_path)
        from_binary = load_embeddings_binary(vec_path, man_path)
        for a, b in zip(from_json, from_binary):
            assert a.vector.tobytes() == b.vector.tobytes()

    def test_truncated_binary_file_is_rejected(self, tmp_path):
        records = [record("a", [1.0, 2.0])]
        vec_path, man_path = tmp_path / "emb.f32", tmp_path / "emb.manifest.jsonl"
        save_embeddings_binary(records, vec_path, man_path)
        vec_path.write_bytes(vec_path.read_bytes()[:-2])
        with pytest.raises(ParseError, match="truncated"):
            load_embeddings_binary(vec_path, man_path)


class TestDeterminism:
    def test_identical_inputs_identical_rankings(self):
        rng = np.random.default_rng(3)
        records = [record("c1", rng.normal(size=8))]
        ids = [f"s{i:03d}" for i in range(50)]
        records += [record(i, rng.normal(size=8)) for i in ids]
        index = VectorIndex(records)
        config = RetrievalConfig(n=20, k_values=(5,), k_evidence=5)
        first = retrieve_text(make_claim(), index, config, ids)
        second = retrieve_text(make_claim(), index, config, ids)
        assert first == second
