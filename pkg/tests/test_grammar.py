import json
import string

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapediff import grammar
from shapediff.grammar import (
    PLACEHOLDER,
    AlreadyMultimodal,
    AmbiguousEdit,
    ArityMismatch,
    ImageSlot,
    NoMatch,
    RuleAnnotator,
    TextSpan,
    TranscriptRecorder,
    TranscriptReplayer,
    extract_subject_and_template,
    parse,
    parse_rule_table,
    reformulate_edit_text,
    serialize,
    validate_arity,
)


class TestParse:
    def test_two_slot_template(self):
        instr = parse("Add <imagehere> to the left of <imagehere>")
        assert instr.segments == (
            TextSpan("Add "),
            ImageSlot(0),
            TextSpan(" to the left of "),
            ImageSlot(1),
        )
        assert instr.n_slots == 2

    def test_empty_is_distinguished_valid_value(self):
        instr = parse("")
        assert instr.segments == ()
        assert instr.n_slots == 0
        assert instr.is_empty

    def test_plain_text_is_single_span(self):
        instr = parse("no placeholder here")
        assert instr.segments == (TextSpan("no placeholder here"),)
        assert instr.n_slots == 0
        assert not instr.is_empty

    def test_slot_ordinals_consecutive_from_zero(self):
        instr = parse("<imagehere><imagehere>x<imagehere>")
        slots = [s.index for s in instr.segments if isinstance(s, ImageSlot)]
        assert slots == [0, 1, 2]

    def test_adjacent_placeholders_no_empty_spans(self):
        instr = parse("<imagehere><imagehere>")
        assert all(not isinstance(s, TextSpan) or s.text for s in instr.segments)
        assert serialize(instr) == "<imagehere><imagehere>"

    def test_partial_placeholder_is_text(self):
        raw = "<imagehere and <image here> and imagehere>"
        instr = parse(raw)
        assert instr.n_slots == 0
        assert serialize(instr) == raw

    def test_text_property_drops_slots(self):
        assert parse("a <imagehere> b").text == "a  b"

    @given(st.text(max_size=200))
    @settings(max_examples=300)
    def test_roundtrip_arbitrary_text(self, s):
        assert serialize(parse(s)) == s

    @given(
        st.lists(
            st.one_of(st.just(PLACEHOLDER), st.text(alphabet=string.printable, max_size=12)),
            max_size=12,
        )
    )
    @settings(max_examples=300)
    def test_roundtrip_with_injected_placeholders(self, parts):
        s = "".join(parts)
        instr = parse(s)
        assert serialize(instr) == s
        # parsing is idempotent through one round trip
        assert serialize(parse(serialize(instr))) == s


class TestArity:
    def test_match_ok(self):
        validate_arity(parse("a <imagehere> b <imagehere>"), 2)

    def test_zero_zero_ok(self):
        validate_arity(parse("pure text"), 0)

    def test_mismatch_raises_with_counts(self):
        with pytest.raises(ArityMismatch) as ei:
            validate_arity(parse("a <imagehere> b <imagehere>"), 1)
        assert ei.value.slots == 2
        assert ei.value.images == 1


class TestReformulate:
    def test_to_the_image_rewritten_in_place(self):
        assert reformulate_edit_text("add a hat to the image", "local") == "add a hat to<imagehere>"

    def test_in_the_image_rewritten_in_place(self):
        out = reformulate_edit_text("remove the dog in the image", "local")
        assert out == "remove the dog in<imagehere>"

    def test_global_append(self):
        assert reformulate_edit_text("make it a sketch", "global") == "make it a sketch of<imagehere>"

    def test_local_append(self):
        out = reformulate_edit_text("recolor the square red", "local")
        assert out == "recolor the square red in<imagehere>"

    def test_phrase_rewrite_wins_over_append(self):
        out = reformulate_edit_text("brighten the sky in the image", "global")
        assert out == "brighten the sky in<imagehere>"
        assert "of<imagehere>" not in out

    def test_already_multimodal_rejected(self):
        with pytest.raises(AlreadyMultimodal):
            reformulate_edit_text("add a hat to<imagehere>", "local")

    def test_reformulation_not_applied_twice(self):
        once = reformulate_edit_text("make it brighter", "global")
        with pytest.raises(AlreadyMultimodal):
            reformulate_edit_text(once, "global")

    def test_double_image_mention_rejected(self):
        with pytest.raises(AmbiguousEdit):
            reformulate_edit_text("add a hat to the image and a dog in the image", "local")

    def test_bad_scope_rejected(self):
        with pytest.raises(ValueError):
            reformulate_edit_text("x", "sideways")

    @given(st.text(alphabet=string.ascii_lowercase + " ", max_size=60), st.sampled_from(["global", "local"]))
    @settings(max_examples=200)
    def test_output_always_one_slot(self, text, scope):
        try:
            out = reformulate_edit_text(text, scope)
        except (AlreadyMultimodal, AmbiguousEdit):
            return
        assert parse(out).n_slots == 1

    def test_rule_table_parsing(self):
        table = "\n".join(
            [
                "# comment",
                "",
                "passthrough\tin the image\tin<imagehere>",
                "global_edit\t\t of<imagehere>",
            ]
        )
        rules = parse_rule_table(table)
        assert len(rules) == 2
        assert rules[0].pattern == "in the image"
        assert rules[1].pattern == ""
        assert rules[1].replacement == " of<imagehere>"

    def test_rule_table_bad_scope(self):
        with pytest.raises(grammar.GrammarError):
            parse_rule_table("weird\ta\tb")

    def test_custom_rules_apply(self):
        rules = parse_rule_table("local_edit\t\t within<imagehere>")
        out = reformulate_edit_text("shrink it", "local", rules)
        assert out == "shrink it within<imagehere>"

    def test_no_match_rule_returns_input_unchanged(self):
        rule = grammar.ReformulationRule("in the image", "in<imagehere>", "passthrough")
        assert rule.apply_once("nothing relevant") == "nothing relevant"


class TestExtraction:
    # the six published example pairs, verbatim
    CASES = [
        ("replace", "replace one woman with a man", "a man", "replace one woman with <imagehere>"),
        ("replace", "replace the castle with another castle", "castle", "replace the castle with <imagehere>"),
        (
            "replace",
            "replace the desk with a white one in the bottom middle",
            "desk",
            "replace the desk with <imagehere> in the bottom middle",
        ),
        (
            "add",
            "add human over the stone in the bottom left",
            "human",
            "add <imagehere> over the stone in the bottom left",
        ),
        ("add", "add a car on the road at the bottom", "a car", "add <imagehere> on the road at the bottom"),
        ("add", "Add an owl on the left shoulder", "an owl", "Add <imagehere> on the left shoulder"),
    ]

    @pytest.mark.parametrize("task,text,subject,template", CASES)
    def test_published_examples_verbatim(self, task, text, subject, template):
        got_subject, got_template = extract_subject_and_template(text, task)
        assert got_subject == subject
        assert got_template == template

    def test_no_locative_tail_add(self):
        subject, template = extract_subject_and_template("add a dog", "add")
        assert subject == "a dog"
        assert template == "add <imagehere>"

    def test_substitution_roundtrip_for_verbatim_subjects(self):
        # when the subject is carried verbatim, splicing it back into the
        # template slot reproduces the original text
        for task, text in [
            ("replace", "replace one woman with a man"),
            ("add", "add a car on the road at the bottom"),
            ("replace", "replace the red circle with a blue square"),
        ]:
            subject, template = extract_subject_and_template(text, task)
            assert template.replace(PLACEHOLDER, subject) == text

    def test_template_has_exactly_one_slot(self):
        for task, text, _, _ in self.CASES:
            _, template = extract_subject_and_template(text, task)
            assert parse(template).n_slots == 1

    def test_unrelated_text_no_match(self):
        with pytest.raises(NoMatch):
            extract_subject_and_template("brighten the sky", "add")
        with pytest.raises(NoMatch):
            extract_subject_and_template("brighten the sky", "replace")

    def test_bad_task_rejected(self):
        with pytest.raises(ValueError):
            extract_subject_and_template("add a dog", "remove")

    def test_replace_requires_with(self):
        with pytest.raises(NoMatch):
            extract_subject_and_template("replace the lamp", "replace")


class TestAnnotator:
    def test_rule_annotator_extraction(self):
        ann = RuleAnnotator()
        resp = json.loads(ann.annotate("extract_replace", "replace one woman with a man"))
        assert resp == {"subject": "a man", "template": "replace one woman with <imagehere>"}

    def test_rule_annotator_reformulation(self):
        ann = RuleAnnotator()
        resp = json.loads(ann.annotate("reformulate_local", "recolor the square red"))
        assert resp == {"text": "recolor the square red in<imagehere>"}

    def test_unknown_template_id(self):
        with pytest.raises(grammar.GrammarError):
            RuleAnnotator().annotate("summarize", "x")

    def test_record_then_replay(self, tmp_path):
        path = tmp_path / "transcript.jsonl"
        rec = TranscriptRecorder(RuleAnnotator(), path)
        r1 = rec.annotate("extract_add", "add a car on the road at the bottom")
        r2 = rec.annotate("reformulate_global", "make it warmer")

        rep = TranscriptReplayer(path)
        assert rep.annotate("extract_add", "add a car on the road at the bottom") == r1
        assert rep.annotate("reformulate_global", "make it warmer") == r2

    def test_replay_misses_loudly(self, tmp_path):
        path = tmp_path / "transcript.jsonl"
        TranscriptRecorder(RuleAnnotator(), path).annotate("extract_add", "add a dog")
        rep = TranscriptReplayer(path)
        with pytest.raises(KeyError):
            rep.annotate("extract_add", "add a cat")
