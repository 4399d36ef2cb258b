"""Conversion pipeline: paths, GV post-filter, carriers, batch output, report."""

import json

import numpy as np
import pytest

from cdvae.conversion import (
    batch_convert,
    convert_utterance,
    gv_postfilter,
    parse_path,
    speaker_f0_stats,
    speaker_gv_stats,
)
from cdvae.errors import ConfigError, PathUnavailableError
from cdvae.evaluation import gv, load_conversion_manifest, report, format_report_table
from cdvae.featureio import Domain, load_archive, load_utterance, make_sequence, split_energy
from cdvae.modes import Mode

from conftest import fresh_state


@pytest.fixture(scope="module")
def bundle_and_stats(tiny_corpus, tiny_data):
    state, _ = fresh_state(tiny_corpus, tiny_data, Mode.CDVAE, seed=3)
    return state.bundle, state.norm_stats


def test_parse_path():
    assert parse_path("MCC_MCC") == ("MCC", "MCC")
    assert parse_path("sp_mcc") == ("SP", "MCC")
    with pytest.raises(ConfigError):
        parse_path("MCC")
    with pytest.raises(ConfigError):
        parse_path("MCC_XXX")


def test_speaker_f0_stats_cover_all_speakers(tiny_corpus):
    stats = speaker_f0_stats(tiny_corpus)
    assert sorted(stats) == tiny_corpus.speaker_ids
    assert stats["spk00"].mean > stats["spk01"].mean  # F above M in log-F0
    assert all(s.std > 0 for s in stats.values())


def test_speaker_gv_stats_match_direct_computation(tiny_corpus):
    stats = speaker_gv_stats(tiny_corpus, "MCC")
    train = [e for e in tiny_corpus.split("train") if e.speaker == "spk02"]
    seqs = [split_energy(load_utterance(tiny_corpus, e.id, Domain.MCC, 40.0)) for e in train]
    assert np.allclose(stats["spk02"], gv(seqs), atol=1e-12)


def test_gv_postfilter_matches_target_variance_exactly():
    rng = np.random.default_rng(30)
    frames = rng.normal(size=(40, 5)) * 0.3
    mask = np.ones(40, dtype=bool)
    mask[:3] = False
    target = np.array([1.0, 0.5, 2.0, 0.25, 0.9])
    out = gv_postfilter(frames, target, mask)
    got = out[mask].var(axis=0)
    assert np.allclose(got, target, rtol=1e-9)
    # silent frames and the masked mean are untouched
    assert np.array_equal(out[~mask], frames[~mask])
    assert np.allclose(out[mask].mean(axis=0), frames[mask].mean(axis=0), atol=1e-12)


def test_gv_postfilter_degenerate_dim_passes_through():
    frames = np.column_stack([np.full(10, 2.0), np.linspace(0, 1, 10)])
    out = gv_postfilter(frames, np.array([4.0, 4.0]), np.ones(10, dtype=bool))
    assert np.array_equal(out[:, 0], frames[:, 0])
    assert out[:, 1].var() == pytest.approx(4.0, rel=1e-9)


def test_gv_postfilter_all_silent_is_identity():
    frames = np.random.default_rng(31).normal(size=(5, 2))
    out = gv_postfilter(frames, np.ones(2), np.zeros(5, dtype=bool))
    assert np.array_equal(out, frames)


def test_convert_utterance_carrier_invariants(tiny_corpus, bundle_and_stats):
    bundle, stats = bundle_and_stats
    entry = tiny_corpus.split("test")[0]
    out = convert_utterance(bundle, stats, tiny_corpus, entry.id, "spk03",
                            path=("MCC", "MCC"))
    src = load_utterance(tiny_corpus, entry.id, Domain.MCC, 40.0)
    assert out.domain == Domain.MCC
    assert out.n_frames == src.n_frames
    assert out.n_dims == src.n_dims
    # raw energy rides along from the source's own output-domain view
    src_split = split_energy(src)
    assert np.allclose(out.frames[:, 0], src_split.energy, atol=1e-12)
    assert np.array_equal(out.silence_mask, src.silence_mask)
    assert out.utterance_id == f"{entry.id}__spk03"
    assert out.speaker_id == "spk03"


def test_convert_utterance_f0_is_mapped(tiny_corpus, bundle_and_stats):
    bundle, stats = bundle_and_stats
    f0_stats = speaker_f0_stats(tiny_corpus)
    entry = next(e for e in tiny_corpus.split("test") if e.speaker == "spk01")  # M source
    out = convert_utterance(bundle, stats, tiny_corpus, entry.id, "spk00",
                            path=("MCC", "MCC"), f0_stats=f0_stats)
    src = load_utterance(tiny_corpus, entry.id, Domain.MCC, 40.0)
    voiced = src.f0 > 0
    assert np.array_equal(out.f0 == 0, src.f0 == 0)  # unvoiced passthrough
    assert np.median(out.f0[voiced]) > np.median(src.f0[voiced])  # M -> F raises F0


def test_convert_utterance_cross_domain_uses_target_view_energy(tiny_corpus, bundle_and_stats):
    bundle, stats = bundle_and_stats
    entry = tiny_corpus.split("test")[0]
    out = convert_utterance(bundle, stats, tiny_corpus, entry.id, "spk02",
                            path=("SP", "MCC"))
    mcc_view = load_utterance(tiny_corpus, entry.id, Domain.MCC, 40.0)
    assert out.domain == Domain.MCC
    assert np.allclose(out.frames[:, 0], split_energy(mcc_view).energy, atol=1e-12)


def test_convert_utterance_path_unavailable(tiny_corpus, tiny_data):
    state, _ = fresh_state(tiny_corpus, tiny_data, Mode.VAE, seed=3)
    with pytest.raises(PathUnavailableError):
        convert_utterance(state.bundle, state.norm_stats, tiny_corpus,
                          tiny_corpus.split("test")[0].id, "spk01", path=("MCC", "MCC"))


def test_convert_utterance_gv_needs_stats(tiny_corpus, bundle_and_stats):
    bundle, stats = bundle_and_stats
    with pytest.raises(ConfigError):
        convert_utterance(bundle, stats, tiny_corpus, tiny_corpus.split("test")[0].id,
                          "spk01", apply_gv=True, gv_stats=None)


def test_batch_convert_layout_and_determinism(tiny_corpus, bundle_and_stats, tmp_path):
    bundle, stats = bundle_and_stats
    pairs = [("spk00", "spk01"), ("spk02", "spk03")]
    doc1 = batch_convert(bundle, stats, tiny_corpus, pairs, tmp_path / "a", system="t")
    doc2 = batch_convert(bundle, stats, tiny_corpus, pairs, tmp_path / "b", system="t")

    per_speaker_test = len([e for e in tiny_corpus.split("test") if e.speaker == "spk00"])
    assert len(doc1["entries"]) == 2 * per_speaker_test
    assert (tmp_path / "a/manifest.json").read_text() == (tmp_path / "b/manifest.json").read_text()
    for e1 in doc1["entries"]:
        rel = e1["path"]["MCC"]
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
        assert e1["domain"] == "MCC" and e1["split"] == "test"
        seq = load_archive(tmp_path / "a" / rel)
        assert seq.domain == Domain.MCC

    loaded = load_conversion_manifest(tmp_path / "a/manifest.json")
    assert loaded["system"] == "t"
    assert loaded["conversion_path"] == "MCC_MCC"
    assert loaded["gv_postfilter"] is False


def test_batch_convert_applies_gv(tiny_corpus, bundle_and_stats, tmp_path):
    bundle, stats = bundle_and_stats
    doc = batch_convert(bundle, stats, tiny_corpus, [("spk00", "spk01")], tmp_path,
                        apply_gv=True, system="gv")
    gv_target = speaker_gv_stats(tiny_corpus, "MCC")["spk01"]
    for entry in doc["entries"]:
        seq = load_archive(tmp_path / entry["path"]["MCC"])
        from cdvae.featureio import detect_silence

        seq = seq.replace(silence_mask=detect_silence(seq.energy, 40.0))
        net = split_energy(seq)
        got = net.frames[net.silence_mask].var(axis=0)
        # float32 storage broadens the tolerance a touch
        assert np.allclose(got, gv_target, rtol=1e-4)


# ---------------------------------------------------------------------------
# report over batch output
# ---------------------------------------------------------------------------

def test_report_structure_and_averages(tiny_corpus, bundle_and_stats, tmp_path):
    bundle, stats = bundle_and_stats
    pairs = [("spk00", "spk01"), ("spk01", "spk00")]
    doc = batch_convert(bundle, stats, tiny_corpus, pairs, tmp_path, system="sys")
    rep = report(tiny_corpus, doc, bundle, stats)

    assert rep["system"] == "sys"
    assert rep["domain"] == "MCC"
    assert sorted(rep["pairs"]) == ["spk00->spk01", "spk01->spk00"]
    assert rep["unmatched"] == []
    for vals in rep["pairs"].values():
        for key in ("mcd", "msd", "gv_ratio", "dem_SP", "dem_MCC"):
            assert key in vals, key
        assert vals["mcd"] > 0
    assert rep["pairs"]["spk00->spk01"]["class"] == "F-M"
    assert rep["pairs"]["spk01->spk00"]["class"] == "M-F"
    # class and overall means are plain averages over member pairs
    assert rep["classes"]["F-M"]["mcd"] == pytest.approx(rep["pairs"]["spk00->spk01"]["mcd"])
    want_overall = np.mean([rep["pairs"][p]["mcd"] for p in rep["pairs"]])
    assert rep["overall"]["mcd"] == pytest.approx(want_overall)

    table = format_report_table(rep)
    assert "[mcd]" in table and "F-M" in table and "sys" in table


def test_report_copy_conversion_scores_zero(tiny_corpus, bundle_and_stats, tmp_path):
    """A 'conversion' that is byte-for-byte the target reference scores 0."""
    bundle, stats = bundle_and_stats
    test_entries = [e for e in tiny_corpus.split("test") if e.speaker == "spk01"]
    entries = []
    for e in test_entries:
        src_id = e.id.replace("spk01", "spk00")
        raw = (tiny_corpus.root / e.path["MCC"]).read_bytes()
        rel = f"spk00_to_spk01/{src_id}__spk01.cdvf"
        out = tmp_path / rel
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_bytes(raw)
        entries.append({"id": f"{src_id}__spk01", "source": src_id,
                        "source_speaker": "spk00", "target_speaker": "spk01",
                        "domain": "MCC", "split": "test", "path": {"MCC": rel}})
    doc = {"system": "copy", "entries": entries, "_root": str(tmp_path)}
    rep = report(tiny_corpus, doc, metrics=("mcd", "msd", "gv"))
    vals = rep["pairs"]["spk00->spk01"]
    assert vals["mcd"] == 0.0
    assert vals["msd"] == 0.0
    assert vals["gv_ratio"] == pytest.approx(1.0, rel=1e-6)


def test_report_flags_unmatched_conversions(tiny_corpus, tmp_path):
    doc = {"system": "x", "_root": str(tmp_path),
           "entries": [{"id": "ghost", "source": "not_a_real_utt",
                        "source_speaker": "spk00", "target_speaker": "spk01",
                        "domain": "MCC", "split": "test", "path": {"MCC": "ghost.cdvf"}}]}
    rep = report(tiny_corpus, doc, metrics=("mcd",))
    assert rep["pairs"] == {}
    assert rep["unmatched"] == ["ghost"]


def test_report_empty_manifest(tiny_corpus):
    rep = report(tiny_corpus, {"system": "none", "entries": [], "_root": "."})
    assert rep["pairs"] == {} and rep["overall"] == {} and rep["unmatched"] == []


def test_report_is_deterministic(tiny_corpus, bundle_and_stats, tmp_path):
    bundle, stats = bundle_and_stats
    doc = batch_convert(bundle, stats, tiny_corpus, [("spk00", "spk03")], tmp_path, system="d")
    r1 = report(tiny_corpus, doc, bundle, stats)
    r2 = report(tiny_corpus, doc, bundle, stats)
    assert json.dumps(r1, sort_keys=True) == json.dumps(r2, sort_keys=True)
