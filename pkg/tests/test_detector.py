import io

import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from markpick.dataset import Box
from markpick.detector import (
    BackendDescriptor,
    Candidate,
    DetectionRequest,
    MockDetectorBackend,
    _parse_detection_payload,
    assign_marks,
    dedup_candidates,
    detect,
    image_content_hash,
)
from markpick.errors import BackendContractError, BackendError
from markpick.metrics import iou
from markpick.mllm import SubjectSet


def png_bytes(w=100, h=80, color=(200, 30, 30)):
    buf = io.BytesIO()
    Image.new("RGB", (w, h), color).save(buf, format="PNG")
    return buf.getvalue()


def cand(coords, score, label="thing", subject_index=1):
    return Candidate(Box.from_seq(coords), score, label, subject_index)


class Cfg:
    box_threshold = 0.25
    text_threshold = 0.25
    max_detections = 20
    dedup_iou = 0.9


def subjects(*phrases):
    return SubjectSet(tuple(phrases), raw_reply="")


def backend_for(image, mapping, **descriptor_kwargs):
    key = image_content_hash(image)
    return MockDetectorBackend(
        {key: mapping}, BackendDescriptor(backend_id="mock", **descriptor_kwargs)
    )


def response(boxes, scores, labels=None):
    labels = labels or ["thing"] * len(boxes)
    return {"boxes": boxes, "scores": scores, "labels": labels}


class TestDedup:
    def test_identical_boxes_keep_higher_score(self):
        a = cand([0, 0, 10, 10], 0.9)
        b = cand([0, 0, 10, 10], 0.8)
        assert dedup_candidates([b, a], 0.9) == [a]

    def test_disjoint_all_kept(self):
        a = cand([0, 0, 10, 10], 0.9)
        b = cand([20, 20, 30, 30], 0.8)
        assert dedup_candidates([a, b], 0.9) == [a, b]

    def test_greedy_hand_trace(self):
        # B overlaps A at IoU 0.95 (suppressed); C clear of both (kept).
        a = cand([0, 0, 10, 10], 0.9)
        b = cand([0, 0, 10, 9.5], 0.8)
        c = cand([12, 0, 22, 10], 0.7)
        assert iou(a.box, b.box) == pytest.approx(0.95)
        assert dedup_candidates([c, b, a], 0.9) == [a, c]

    def test_threshold_domain(self):
        with pytest.raises(ValueError):
            dedup_candidates([], 0.0)

    @given(
        st.lists(
            st.builds(
                cand,
                st.tuples(
                    st.integers(0, 50), st.integers(0, 50), st.integers(51, 120), st.integers(51, 120)
                ),
                st.floats(0.25, 1.0),
            ),
            max_size=12,
        ),
        st.floats(0.2, 1.0),
    )
    def test_no_kept_pair_reaches_threshold(self, candidates, threshold):
        kept = dedup_candidates(candidates, threshold)
        for i, a in enumerate(kept):
            for b in kept[i + 1 :]:
                assert iou(a.box, b.box) < threshold

    @given(
        st.lists(
            st.builds(
                cand,
                st.tuples(
                    st.integers(0, 50), st.integers(0, 50), st.integers(51, 120), st.integers(51, 120)
                ),
                st.floats(0.25, 1.0),
            ),
            max_size=12,
        )
    )
    def test_suppressed_only_by_stronger(self, candidates):
        kept = dedup_candidates(candidates, 0.5)
        kept_set = set(id(c) for c in kept)
        for c in candidates:
            if id(c) in kept_set:
                continue
            suppressors = [k for k in kept if iou(k.box, c.box) >= 0.5]
            # at least one overlapping kept candidate is as strong as the one dropped
            assert suppressors and any(k.score >= c.score for k in suppressors)


class TestAssignMarks:
    def test_marks_are_positions(self):
        dset = assign_marks([cand([0, 0, 10, 10], 0.9), cand([20, 20, 30, 30], 0.5)])
        assert dset.marks == (1, 2)
        assert dset.candidate_for_mark(1).score == 0.9

    def test_empty_set(self):
        dset = assign_marks([])
        assert dset.marks == ()

    def test_score_tie_breaks_on_origin(self):
        low_origin = cand([1, 1, 11, 11], 0.5)
        high_origin = cand([5, 5, 15, 15], 0.5)
        dset = assign_marks([high_origin, low_origin])
        assert dset.candidates[0] == low_origin  # mark 1 = lexicographically smaller origin

    def test_contiguous_marks_property(self):
        for n in range(5):
            cands = [cand([i * 20, 0, i * 20 + 10, 10], 0.9 - i * 0.1) for i in range(n)]
            assert assign_marks(cands).marks == tuple(range(1, n + 1))


class TestDetect:
    def test_single_subject_two_boxes(self):
        image = png_bytes(w=640, h=480)
        boxes = [[92.34, 169.19, 412.26, 348.67], [0.51, 0.25, 252.76, 383.72]]
        backend = backend_for(image, {"plant": response(boxes, [0.8, 0.6])})
        dset = detect(subjects("plant"), image, Cfg, backend)
        assert dset.marks == (1, 2)
        assert [c.score for c in dset.candidates] == [0.8, 0.6]
        assert [c.box.as_list() for c in dset.candidates] == boxes  # in-frame, unclipped
        assert all(c.subject_index == 1 for c in dset.candidates)

    def test_empty_result_is_legal(self):
        image = png_bytes()
        backend = backend_for(image, {"unicorn": response([], [])})
        dset = detect(subjects("unicorn"), image, Cfg, backend)
        assert dset.candidates == ()
        assert dset.marks == ()

    def test_cross_subject_duplicate_attributed_to_higher_score(self):
        image = png_bytes()
        backend = backend_for(
            image,
            {
                "bear": response([[10, 10, 40, 40]], [0.9], ["bear"]),
                "bee": response([[10, 10, 40, 40]], [0.7], ["bee"]),
            },
        )
        dset = detect(subjects("bear", "bee"), image, Cfg, backend)
        assert len(dset.candidates) == 1
        assert dset.candidates[0].subject_index == 1
        assert dset.candidates[0].label == "bear"

    def test_one_call_per_subject(self):
        image = png_bytes()
        backend = backend_for(
            image,
            {"bear": response([], []), "bee": response([], [])},
        )
        detect(subjects("bear", "bee"), image, Cfg, backend)
        assert backend.calls == 2
        assert [prompt for _, prompt in backend.call_log] == ["bear", "bee"]

    def test_single_prompt_backend_gets_joined_form(self):
        image = png_bytes()
        backend = backend_for(
            image,
            {"bear . bee": response([[10, 10, 40, 40]], [0.9], ["bee"])},
            single_prompt_only=True,
        )
        dset = detect(subjects("bear", "bee"), image, Cfg, backend)
        assert backend.calls == 1
        assert dset.candidates[0].subject_index == 2  # attributed by label match

    def test_truncates_to_max_detections(self):
        image = png_bytes()
        boxes = [[i * 3, 0, i * 3 + 2, 10] for i in range(30)]
        scores = [0.9 - i * 0.01 for i in range(30)]
        backend = backend_for(image, {"thing": response(boxes, scores)})

        class SmallCfg(Cfg):
            max_detections = 5

        dset = detect(subjects("thing"), image, SmallCfg, backend)
        assert len(dset.candidates) == 5
        assert dset.marks == (1, 2, 3, 4, 5)

    def test_degenerate_after_clip_dropped_and_counted(self):
        image = png_bytes(w=100, h=80)
        backend = backend_for(
            image,
            {"thing": response([[150, 150, 200, 200], [10, 10, 20, 20]], [0.9, 0.8])},
        )
        dset = detect(subjects("thing"), image, Cfg, backend)
        assert len(dset.candidates) == 1
        assert dset.dropped_degenerate == 1

    def test_out_of_frame_boxes_clipped(self):
        image = png_bytes(w=100, h=80)
        backend = backend_for(image, {"thing": response([[-5, -5, 10, 10]], [0.9])})
        dset = detect(subjects("thing"), image, Cfg, backend)
        assert dset.candidates[0].box == Box(0, 0, 10, 10)

    def test_below_threshold_score_violates_contract(self):
        image = png_bytes()
        backend = backend_for(image, {"thing": response([[0, 0, 10, 10]], [0.1])})
        with pytest.raises(BackendContractError):
            detect(subjects("thing"), image, Cfg, backend)

    def test_missing_fixture_is_backend_error(self):
        image = png_bytes()
        backend = backend_for(image, {})
        with pytest.raises(BackendError):
            detect(subjects("thing"), image, Cfg, backend)

    def test_deterministic_given_deterministic_backend(self):
        image = png_bytes()
        mapping = {
            "a": response([[0, 0, 30, 30], [40, 0, 70, 30]], [0.7, 0.9]),
            "b": response([[0, 40, 30, 70]], [0.8]),
        }
        first = detect(subjects("a", "b"), image, Cfg, backend_for(image, mapping))
        second = detect(subjects("a", "b"), image, Cfg, backend_for(image, mapping))
        assert first == second
        # sorted by descending score across subjects
        assert [c.score for c in first.candidates] == [0.9, 0.8, 0.7]


class TestWireParsing:
    def test_length_mismatch_rejected(self):
        with pytest.raises(BackendContractError):
            _parse_detection_payload({"boxes": [[0, 0, 1, 1]], "scores": [], "labels": []})

    def test_missing_key_rejected(self):
        with pytest.raises(BackendContractError):
            _parse_detection_payload({"boxes": [], "scores": []})

    def test_extra_metadata_tolerated(self):
        raw = _parse_detection_payload(
            {"boxes": [[0, 0, 1, 1]], "scores": [0.5], "labels": ["x"], "thresholds_applied": {}}
        )
        assert raw.scores == (0.5,)


class TestDetectionRequest:
    def test_threshold_domain(self):
        with pytest.raises(ValueError):
            DetectionRequest(image=b"x", prompt="p", box_threshold=1.5)

    def test_prompt_required(self):
        with pytest.raises(ValueError):
            DetectionRequest(image=b"x", prompt="  ")
