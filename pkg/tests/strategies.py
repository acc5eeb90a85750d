"""Hypothesis strategies shared by the test modules."""

from __future__ import annotations

from hypothesis import strategies as st

from mifc.core import DataSample, LanguageTag, SampleKind

# Letters from several scripts plus the characters JSON and JSONL care about.
TEXT_ALPHABET = st.characters(
    blacklist_categories=("Cs",),
    min_codepoint=1,
)
texts = st.text(TEXT_ALPHABET, min_size=1, max_size=40).filter(lambda s: s.strip() != "")
cjk_texts = st.text(st.sampled_from("胰岛素血糖糖尿病の治療薬천식흡입기  \u0085\"\\\n"), min_size=1, max_size=20).filter(
    lambda s: s.strip() != ""
)
ids = st.text("abcdefghijklmnopqrstuvwxyz0123456789-_", min_size=1, max_size=12)
scalars = st.one_of(
    st.none(),
    st.booleans(),
    st.integers(min_value=-(2**53), max_value=2**53),
    st.floats(allow_nan=False, allow_infinity=False),
    st.text(max_size=20),
)
annotation_maps = st.dictionaries(st.text(min_size=1, max_size=10), scalars, max_size=4)


@st.composite
def samples(draw, kind: SampleKind | None = None) -> DataSample:
    kind = kind or draw(st.sampled_from(list(SampleKind)))
    body = st.one_of(texts, cjk_texts)
    common = dict(
        id=draw(ids),
        lang=draw(st.sampled_from(list(LanguageTag))),
        kind=kind,
        source=draw(st.text(max_size=10)),
        annotations=draw(annotation_maps),
    )
    if kind is SampleKind.RAW_TEXT:
        return DataSample(raw_text=draw(body), **common)
    if kind is SampleKind.SHORT_ANSWER_QA:
        return DataSample(question=draw(body), answer=draw(body), **common)
    labels = draw(st.lists(st.sampled_from("ABCDEFGH"), min_size=2, max_size=5, unique=True))
    options = tuple((label, draw(body)) for label in labels)
    return DataSample(
        question=draw(body),
        options=options,
        rationale=draw(st.one_of(st.none(), body)),
        answer=draw(st.sampled_from(labels)),
        **common,
    )
