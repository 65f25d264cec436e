import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmemn2n.corpus import (
    BOT,
    NIL,
    USER,
    CandidateSet,
    CorpusFormatError,
    KnowledgeBaseIndex,
    Vocabulary,
    build_vocab,
    extract_match_features,
    find_dialog_files,
    find_qa_files,
    format_qa_examples,
    parse_candidates,
    parse_dialog_task,
    parse_kb,
    parse_qa_task,
    split_validation,
    tokenize,
)
from synthetic import dialog_candidates, dialog_text, kb_text, qa_task_text, write_dialog_task, write_qa_task

TABLE_STORY = """1 Fred took the football there.
2 Fred journeyed to the hallway.
3 Fred passed the football to Mary.
4 Mary dropped the football.
5 Who gave the football?\tFred\t3
"""


class TestTokenize:
    def test_lowercase_and_punctuation(self):
        assert tokenize("Where is Mary?") == ["where", "is", "mary"]
        assert tokenize("Fred took the football there.") == ["fred", "took", "the", "football", "there"]

    def test_inner_punctuation_kept(self):
        assert tokenize("i'm on it") == ["i'm", "on", "it"]


class TestParseQa:
    def test_argument_relation_story(self):
        (ex,) = parse_qa_task(TABLE_STORY)
        assert len(ex.sentences) == 4
        assert ex.answers == ["fred"]
        assert ex.question == ["who", "gave", "the", "football"]
        assert ex.supporting == [3]
        assert ex.sentences[2] == ["fred", "passed", "the", "football", "to", "mary"]

    def test_minimal_story(self):
        exs = parse_qa_task("1 Mary went home.\n2 Where is Mary?\thome\t1\n")
        assert len(exs) == 1 and len(exs[0].sentences) == 1

    def test_questions_see_only_earlier_statements(self):
        text = "1 a b.\n2 q1?\tx\t1\n3 c d.\n4 q2?\ty\t3\n"
        e1, e2 = parse_qa_task(text)
        assert e1.sentences == [["a", "b"]]
        assert e2.sentences == [["a", "b"], ["c", "d"]]
        assert e2.supporting == [2]

    def test_id_reset_starts_new_story(self):
        text = "1 a.\n2 q?\tx\t1\n1 b.\n2 q?\ty\t1\n"
        _, e2 = parse_qa_task(text)
        assert e2.sentences == [["b"]]

    def test_multi_word_answers(self):
        (ex,) = parse_qa_task("1 John took the apple.\n2 John took the milk.\n3 What is John carrying?\tapple,milk\t1 2\n")
        assert ex.answers == ["apple", "milk"]
        assert ex.answer == "apple,milk"

    def test_non_monotone_ids(self):
        with pytest.raises(CorpusFormatError, match="line 2"):
            parse_qa_task("1 a.\n3 b.\n")

    def test_question_without_answer(self):
        with pytest.raises(CorpusFormatError, match="line 2"):
            parse_qa_task("1 a.\n2 where?\t\t1\n")

    def test_bad_supporting_id(self):
        with pytest.raises(CorpusFormatError, match="line 2"):
            parse_qa_task("1 a.\n2 where?\tx\t5\n")
        with pytest.raises(CorpusFormatError):
            parse_qa_task("1 a.\n2 where?\tx\tz\n")

    def test_non_numeric_id(self):
        with pytest.raises(CorpusFormatError, match="line 1"):
            parse_qa_task("x a.\n")

    def test_count_matches_line_scan(self):
        text = qa_task_text(1, 1000, seed=3)
        # independent count: question lines are exactly the tab-bearing lines
        n_questions = sum("\t" in line for line in text.splitlines())
        exs = parse_qa_task(text)
        assert len(exs) == n_questions == 1000

    def test_supporting_indices_precede_question(self):
        for task in (1, 12, 17):
            for ex in parse_qa_task(qa_task_text(task, 200, seed=task)):
                assert ex.answers
                assert all(1 <= s <= len(ex.sentences) for s in ex.supporting)

    @pytest.mark.parametrize("task", [1, 12, 17])
    def test_round_trip(self, task):
        exs = parse_qa_task(qa_task_text(task, 100, seed=0))
        assert parse_qa_task(format_qa_examples(exs)) == exs

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.lists(st.sampled_from(["mary", "john", "went", "to", "garden", "the"]), min_size=1, max_size=5),
                    min_size=1, max_size=6), st.data())
    def test_round_trip_property(self, sents, data):
        text = "".join(f"{i} {' '.join(s)}.\n" for i, s in enumerate(sents, 1))
        sup = data.draw(st.lists(st.integers(1, len(sents)), min_size=1, max_size=2))
        text += f"{len(sents) + 1} where?\tgarden\t{' '.join(map(str, sup))}\n"
        exs = parse_qa_task(text)
        assert parse_qa_task(format_qa_examples(exs)) == exs


def _cands(*texts):
    return CandidateSet.from_texts(texts)


class TestParseDialog:
    def test_one_turn(self):
        (ex,) = parse_dialog_task("1 hi\thello\n", _cands("hello"))
        assert ex.history == [] and ex.query == ["hi"] and ex.gold_response == "hello"

    def test_three_turns_history_lengths(self):
        text = "1 hi\thello\n2 table please\tsure\n3 thanks\tbye\n"
        exs = parse_dialog_task(text, _cands("hello", "sure", "bye"))
        assert [len(e.history) for e in exs] == [0, 2, 4]
        assert [s for s, _ in exs[2].history] == [USER, BOT, USER, BOT]
        assert exs[2].history_turns == [1, 1, 2, 2]

    def test_blank_line_separates_dialogs(self):
        text = "1 hi\thello\n2 x\tbye\n\n1 hey\thello\n"
        exs = parse_dialog_task(text, _cands("hello", "bye"))
        assert [e.dialog_id for e in exs] == [0, 0, 1]
        assert exs[2].history == []

    def test_kb_result_lines_are_bot_memories(self):
        text = "1 hi\thello\n2 resto_1 R_cuisine thai\n3 ok\tbye\n"
        exs = parse_dialog_task(text, _cands("hello", "bye"))
        assert len(exs) == 2
        assert exs[1].history[-1] == (BOT, ["resto_1", "r_cuisine", "thai"])

    def test_unknown_response_names_utterance(self):
        with pytest.raises(CorpusFormatError, match="what now"):
            parse_dialog_task("1 hi\twhat now\n", _cands("hello"))

    def test_whitespace_normalised_membership(self):
        (ex,) = parse_dialog_task("1 hi\thello   there \n", _cands("hello there"))
        assert ex.gold_index == 0

    def test_synthetic_corpus_alternation(self):
        cands = CandidateSet.from_texts(dialog_candidates())
        exs = parse_dialog_task(dialog_text(50, 0), cands)
        for ex in exs:
            assert len(ex.history) % 2 == 0
            assert all(s == (USER if i % 2 == 0 else BOT) for i, (s, _) in enumerate(ex.history))
            assert cands.texts[ex.gold_index] == ex.gold_response


class TestCandidatesAndKb:
    def test_parse_candidates(self):
        c = parse_candidates("1 hello there\n1 api_call thai rome\n")
        assert c.texts == ["hello there", "api_call thai rome"]
        assert c.index_of("api_call  thai rome") == 1

    def test_duplicates_rejected(self):
        with pytest.raises(CorpusFormatError):
            parse_candidates("1 a\n1 a\n")

    def test_parse_kb(self):
        kb = parse_kb("1 resto_rome_1 R_location rome\n1 resto_rome_1 R_cuisine thai\nresto_2 R_location paris\n")
        assert kb.property_names == ["r_location", "r_cuisine"]
        assert kb.properties["r_location"] == {"rome", "paris"}

    def test_synthetic_kb_has_seven_types(self):
        assert len(parse_kb(kb_text()).properties) == 7

    def test_bad_kb_line(self):
        with pytest.raises(CorpusFormatError, match="line 1"):
            parse_kb("1 resto_only\n")


class TestMatchFeatures:
    KB = KnowledgeBaseIndex({"location": {"rome", "paris"}, "cuisine": {"thai"}, "price": {"cheap"}})

    def test_exact_match_bit(self):
        bits = extract_match_features({"rome", "table"}, ["api_call", "thai", "rome"], self.KB)
        np.testing.assert_array_equal(bits, [1, 0, 0])

    def test_no_kb_values(self):
        np.testing.assert_array_equal(extract_match_features({"rome"}, ["hello"], self.KB), [0, 0, 0])

    def test_value_absent_from_context(self):
        bits = extract_match_features({"hello"}, ["thai"], self.KB)
        assert bits[1] == 0

    def test_missing_kb_all_zero(self, caplog):
        bits = extract_match_features({"rome"}, ["rome"], None)
        assert bits.shape == (7,) and not bits.any()


class TestVocab:
    def test_empty(self):
        assert build_vocab([]).size == 1
        assert Vocabulary().index_to_word == [NIL]

    def test_shared_words_same_vocab(self):
        a = parse_qa_task("1 mary went home.\n2 where is mary?\thome\t1\n")
        b = parse_qa_task("1 mary went home.\n2 mary went home.\n3 where is mary?\thome\t1\n")
        assert build_vocab(a) == build_vocab(b)

    def test_extras_follow_nil(self):
        v = build_vocab(parse_qa_task(TABLE_STORY), ["$user", "$bot"])
        assert v.index_to_word[:3] == [NIL, "$user", "$bot"]

    def test_first_occurrence_order_and_bijection(self):
        v = build_vocab(parse_qa_task(TABLE_STORY))
        assert v.index_to_word[1:4] == ["fred", "took", "the"]
        assert all(v.word_to_index[w] == i for i, w in enumerate(v.index_to_word))

    def test_oov_lookup_maps_to_nil(self, caplog):
        assert Vocabulary(["a"]).lookup(["a", "zzz"]) == [1, 0]
        assert "zzz" in caplog.text

    def test_stable_size_across_runs(self, tmp_path):
        sizes = {build_vocab(parse_qa_task(qa_task_text(1, 1000, 0))).size for _ in range(2)}
        assert len(sizes) == 1


class TestSplit:
    def test_thousand(self):
        tr, va = split_validation(list(range(1000)), 0.1, 0)
        assert (len(tr), len(va)) == (900, 100)

    def test_ten_rounds(self):
        tr, va = split_validation(list(range(10)), 0.1, 0)
        assert (len(tr), len(va)) == (9, 1)

    def test_small_fraction_keeps_one(self):
        assert len(split_validation(list(range(5)), 0.01, 0)[1]) == 1

    def test_deterministic_disjoint_exhaustive(self):
        a = split_validation(list(range(57)), 0.1, 4)
        assert a == split_validation(list(range(57)), 0.1, 4)
        assert sorted(a[0] + a[1]) == list(range(57))
        assert not set(a[0]) & set(a[1])

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            split_validation([1, 2], 1.0)


class TestFileDiscovery:
    def test_qa(self, tmp_path):
        write_qa_task(tmp_path, 1, 10, 10)
        f = find_qa_files(tmp_path, 1)
        assert f["train"].name.endswith("_train.txt") and f["test"].name.endswith("_test.txt")
        with pytest.raises(FileNotFoundError):
            find_qa_files(tmp_path, 2)

    def test_dialog(self, tmp_path):
        write_dialog_task(tmp_path, 5, 2, 2)
        f = find_dialog_files(tmp_path, 1)
        assert set(f) == {"train", "valid", "test", "candidates", "kb"}
        with pytest.raises(FileNotFoundError):
            find_dialog_files(tmp_path, 3)
