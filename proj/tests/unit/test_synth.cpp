#include <gtest/gtest.h>

#include <set>

#include "oracles.hpp"
#include "sedforge/annotations.hpp"
#include "sedforge/features.hpp"
#include "sedforge/manifest.hpp"
#include "sedforge/synth.hpp"

using namespace sedforge;

namespace {

BankConfig small_bank() {
  BankConfig b;
  b.instances_per_class = 10;
  b.min_seconds = 1.5;
  b.max_seconds = 2.5;
  return b;
}

SynthConfig small_synth(std::uint64_t seed = 3) {
  SynthConfig s;
  s.num_mixtures = 10;
  s.mixture_seconds = 8.0;
  s.events_per_mixture = 6;
  s.min_cut_seconds = 0.5;
  s.max_cut_seconds = 2.0;
  s.seed = seed;
  return s;
}

EventBank two_sample_bank() {
  EventBank bank;
  bank.classes = {"a", "b"};
  for (int c = 0; c < 2; ++c) {
    EventSample s;
    s.id = c ? "b0" : "a0";
    s.class_name = bank.classes[c];
    s.clip.sample_rate = 100;
    for (int i = 0; i < 50; ++i) s.clip.samples.push_back(c ? -0.01f * i : 0.01f * i);
    bank.samples.push_back(s);
  }
  return bank;
}

}  // namespace

TEST(Annotations, ParsesTabSeparatedLines) {
  const auto ev = parse_annotations("0.50\t2.75\tdog_barking\n\n1.0\t1.5\tcar\n", "x.tsv");
  ASSERT_EQ(ev.size(), 2u);
  EXPECT_DOUBLE_EQ(ev[0].onset, 0.5);
  EXPECT_DOUBLE_EQ(ev[0].offset, 2.75);
  EXPECT_EQ(ev[0].class_name, "dog_barking");
  EXPECT_EQ(ev[0].source_file, "x.tsv");
  EXPECT_EQ(ev[1].class_name, "car");
  EXPECT_TRUE(parse_annotations("").empty());
}

TEST(Annotations, RejectsBadLines) {
  EXPECT_THROW(parse_annotations("3.0\t1.0\tx\n"), ValidationError);
  EXPECT_THROW(parse_annotations("1.0\t1.0\tx\n"), ValidationError);
  try {
    parse_annotations("0\t1\ta\n0\tone\tb\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  EXPECT_THROW(parse_annotations("0\t1\n"), ParseError);
}

TEST(Annotations, FormatRoundTrip) {
  const std::vector<EventAnnotation> ev = {{"a", 0.25, 1.5, ""}, {"b", 2.0, 3.125, ""}};
  EXPECT_EQ(parse_annotations(format_annotations(ev)), ev);
}

TEST(TargetMatrix, EmptyAnnotationsGiveZeroRoll) {
  const auto r = build_target_matrix({}, {"a", "b"}, 10, 0.02);
  for (auto v : r.activity.values()) EXPECT_EQ(v, 0);
}

TEST(TargetMatrix, OverlappingClassesAreBothActive) {
  const auto r = build_target_matrix({{"a", 0.1, 0.3, ""}, {"b", 0.1, 0.3, ""}}, {"a", "b"}, 20, 0.02);
  for (std::size_t t = 5; t < 15; ++t) {
    EXPECT_EQ(r.at(0, t), 1);
    EXPECT_EQ(r.at(1, t), 1);
  }
}

TEST(TargetMatrix, FrameSpanIntersectionRule) {
  const auto r = build_target_matrix({{"a", 0.05, 0.10, ""}}, {"a"}, 10, 0.02);
  std::vector<std::size_t> active;
  for (std::size_t t = 0; t < 10; ++t)
    if (r.at(0, t)) active.push_back(t);
  EXPECT_EQ(active, (std::vector<std::size_t>{2, 3, 4}));
}

TEST(TargetMatrix, MatchesIntervalIntersectionOracle) {
  Rng rng(21);
  const double hop = 0.02;
  for (int trial = 0; trial < 200; ++trial) {
    const double on = uniform(rng, 0, 1.5), off = on + uniform(rng, 0.001, 0.8);
    const auto r = build_target_matrix({{"a", on, off, ""}}, {"a"}, 100, hop);
    for (std::size_t t = 0; t < 100; ++t) {
      const double lo = t * hop, hi = (t + 1) * hop;
      const double overlap = std::min(hi, off) - std::max(lo, on);
      if (std::abs(overlap) < 1e-9) continue;  // boundary within round-off
      EXPECT_EQ(r.at(0, t), overlap > 0 ? 1 : 0) << on << " " << off << " frame " << t;
    }
  }
}

TEST(TargetMatrix, UnknownClassIsListed) {
  try {
    build_target_matrix({{"zebra", 0, 1, ""}}, {"a"}, 10, 0.02);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("zebra"), std::string::npos);
  }
}

TEST(Mixture, SingleEventIsTheCut) {
  const auto bank = two_sample_bank();
  MixtureRecipe r;
  r.sample_rate = 100;
  r.total_length = 30;
  r.events = {{0, 10, 30, 0, 1.0}};
  const auto m = synthesize_mixture(bank, r);
  for (std::size_t i = 0; i < 30; ++i) EXPECT_EQ(m.audio.samples[i], bank.samples[0].clip.samples[10 + i]);
  ASSERT_EQ(m.annotations.size(), 1u);
  EXPECT_DOUBLE_EQ(m.annotations[0].onset, 0.0);
  EXPECT_DOUBLE_EQ(m.annotations[0].offset, 0.3);
  EXPECT_EQ(m.annotations[0].class_name, "a");
}

TEST(Mixture, DisjointEventsAreSampleExactAndOverlapsAdd) {
  const auto bank = two_sample_bank();
  MixtureRecipe r;
  r.sample_rate = 100;
  r.total_length = 100;
  r.events = {{0, 0, 20, 0, 1.0}, {1, 5, 20, 50, 1.0}, {1, 0, 10, 10, 1.0}};
  const auto m = synthesize_mixture(bank, r);
  const auto& a = bank.samples[0].clip.samples;
  const auto& b = bank.samples[1].clip.samples;
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(m.audio.samples[i], a[i]);
  for (std::size_t i = 10; i < 20; ++i) EXPECT_FLOAT_EQ(m.audio.samples[i], a[i] + b[i - 10]);
  for (std::size_t i = 20; i < 50; ++i) EXPECT_EQ(m.audio.samples[i], 0.f);
  for (std::size_t i = 50; i < 70; ++i) EXPECT_EQ(m.audio.samples[i], b[5 + i - 50]);
}

TEST(Mixture, LoudSumIsPeakNormalized) {
  auto bank = two_sample_bank();
  for (auto& s : bank.samples[0].clip.samples) s = 0.8f;
  MixtureRecipe r;
  r.sample_rate = 100;
  r.total_length = 20;
  r.events = {{0, 0, 20, 0, 1.0}, {0, 0, 10, 0, 1.0}};
  const auto m = synthesize_mixture(bank, r);
  float peak = 0;
  for (float v : m.audio.samples) peak = std::max(peak, std::abs(v));
  EXPECT_NEAR(peak, 0.9f, 1e-6);
  EXPECT_NEAR(m.audio.samples[15], 0.9f * 0.8f / 1.6f, 1e-6);
}

TEST(Mixture, BadRecipesAreRejected) {
  const auto bank = two_sample_bank();
  MixtureRecipe r;
  r.sample_rate = 100;
  r.total_length = 100;
  r.events = {{0, 40, 20, 0, 1.0}};
  EXPECT_THROW(synthesize_mixture(bank, r), RecipeError);
  r.events = {{0, 0, 20, 90, 1.0}};
  EXPECT_THROW(synthesize_mixture(bank, r), RecipeError);
  r.events = {{7, 0, 20, 0, 1.0}};
  EXPECT_THROW(synthesize_mixture(bank, r), RecipeError);
}

TEST(EventBank, HasThreeClassesWithDeclaredRms) {
  const auto bank = builtin_event_bank(1, small_bank());
  ASSERT_EQ(bank.classes.size(), 3u);
  for (const auto& c : bank.classes) EXPECT_GE(bank.instances_of(c).size(), 10u);
  for (const auto& s : bank.samples) {
    const double r = rms(s.clip.samples);
    EXPECT_GE(r, bank.rms_lo - 1e-6) << s.id;
    EXPECT_LE(r, bank.rms_hi + 1e-6) << s.id;
  }
}

TEST(EventBank, SpectralPeakLiesInTheDeclaredBand) {
  const auto bank = builtin_event_bank(2, small_bank());
  const FeatureConfig fc;
  const auto fb = build_mel_filterbank(fc.num_bands, fc.sample_rate, fc.frame_length());
  for (const auto& s : bank.samples) {
    const auto fm = extract_features(s.clip, fc);
    std::size_t best = 0;
    double best_energy = -1;
    for (std::size_t f = 0; f < fm.num_bands(); ++f) {
      double e = 0;
      for (std::size_t t = 0; t < fm.num_frames(); ++t) e += std::exp(double(fm.values.at(f, t)));
      if (e > best_energy) {
        best_energy = e;
        best = f;
      }
    }
    EXPECT_GE(fb.edges_hz[best + 2], s.band_lo_hz) << s.id;
    EXPECT_LE(fb.edges_hz[best], s.band_hi_hz) << s.id;
  }
}

TEST(EventBank, SeedsChangeWaveforms) {
  const auto a = builtin_event_bank(1, small_bank()), b = builtin_event_bank(2, small_bank());
  EXPECT_NE(a.samples[0].clip.samples, b.samples[0].clip.samples);
  EXPECT_EQ(a.samples[0].clip.samples, builtin_event_bank(1, small_bank()).samples[0].clip.samples);
}

TEST(Dataset, SplitCountsFollowFractions) {
  SynthConfig s;
  s.num_mixtures = 100;
  EXPECT_EQ(partition_counts(s), (std::array<std::size_t, 3>{60, 20, 20}));
  s.val_fraction = 0.3;
  EXPECT_THROW(partition_counts(s), ConfigError);
}

TEST(Dataset, PartitionsUseDisjointInstances) {
  const auto bank = builtin_event_bank(4, small_bank());
  const auto ds = generate_dataset(bank, small_synth());
  std::array<std::set<std::size_t>, 3> used;
  for (const auto& gm : ds.mixtures)
    for (const auto& e : gm.recipe.events) used[static_cast<int>(gm.partition)].insert(e.sample);
  for (int p = 0; p < 3; ++p) {
    EXPECT_FALSE(used[p].empty());
    for (int q = p + 1; q < 3; ++q)
      for (auto i : used[p]) EXPECT_EQ(used[q].count(i), 0u) << "sample " << i;
  }
}

TEST(Dataset, PolyphonyCapAndCutLengthsHold) {
  const auto bank = builtin_event_bank(5, small_bank());
  for (std::size_t cap : {1u, 2u}) {
    auto cfg = small_synth(7);
    cfg.polyphony_cap = cap;
    const auto ds = generate_dataset(bank, cfg);
    for (const auto& gm : ds.mixtures) {
      const std::size_t T = 400;
      const auto roll = build_target_matrix(gm.mixture.annotations, ds.classes, T, 0.02);
      EXPECT_LE(max_concurrency(gm.recipe.events, 0, gm.recipe.total_length), cap);
      for (const auto& e : gm.recipe.events) {
        EXPECT_GE(e.cut_length, 22050u);
        EXPECT_LE(e.cut_length, 2u * 44100);
        EXPECT_LE(e.placement + e.cut_length, gm.recipe.total_length);
      }
      // Frame-level polyphony never exceeds the cap by more than the shared boundary frame.
      for (std::size_t t = 0; t < T; ++t) {
        std::size_t n = 0;
        for (std::size_t k = 0; k < roll.num_classes(); ++k) n += roll.at(k, t);
        EXPECT_LE(n, cap + 1);
      }
    }
  }
}

TEST(Dataset, AnnotationsMatchPlacementsExactly) {
  const auto bank = builtin_event_bank(6, small_bank());
  const auto ds = generate_dataset(bank, small_synth(8));
  for (const auto& gm : ds.mixtures) {
    ASSERT_EQ(gm.mixture.annotations.size(), gm.recipe.events.size());
    for (std::size_t i = 0; i < gm.recipe.events.size(); ++i) {
      const auto& e = gm.recipe.events[i];
      const auto& a = gm.mixture.annotations[i];
      EXPECT_DOUBLE_EQ(a.onset, e.placement / 44100.0);
      EXPECT_DOUBLE_EQ(a.offset, (e.placement + e.cut_length) / 44100.0);
      EXPECT_EQ(a.class_name, bank.samples[e.sample].class_name);
      // Roundtrip to frames: exactly the frames whose span meets the cut.
      const auto roll = build_target_matrix({a}, ds.classes, 400, 0.02);
      const auto k = std::find(ds.classes.begin(), ds.classes.end(), a.class_name) - ds.classes.begin();
      for (std::size_t t = 0; t < 400; ++t) {
        const std::size_t lo = t * 882, hi = (t + 1) * 882;
        const bool meets = lo < e.placement + e.cut_length && e.placement < hi;
        EXPECT_EQ(roll.at(k, t), meets ? 1 : 0);
      }
    }
  }
}

TEST(Dataset, SameSeedWritesIdenticalFiles) {
  const auto bank = builtin_event_bank(9, small_bank());
  oracle::TempDir a("synth_a"), b("synth_b");
  write_dataset(a.path, bank, generate_dataset(bank, small_synth(11)), "s");
  write_dataset(b.path, bank, generate_dataset(bank, small_synth(11)), "s");
  std::size_t files = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(a.path)) {
    if (!e.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(e.path(), a.path);
    EXPECT_EQ(read_file_bytes(e.path()), read_file_bytes(b.path / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 2u * 10 + 2);
  const auto m = read_manifest(a.path / "manifest.txt");
  EXPECT_NO_THROW(validate_manifest(m));
  EXPECT_EQ(m.folds.size(), 1u);
  EXPECT_EQ(m.folds[0].train.size(), 6u);
}

TEST(Dataset, TooFewInstancesIsAnError) {
  BankConfig b = small_bank();
  b.instances_per_class = 2;
  EXPECT_THROW(generate_dataset(builtin_event_bank(1, b), small_synth()), ConfigError);
}

TEST(Manifest, RoundTripAndValidation) {
  DatasetManifest m;
  m.classes = {"a", "b"};
  for (int i = 0; i < 6; ++i)
    m.recordings.push_back({"r" + std::to_string(i), "audio/r.wav", "ann/r.tsv", i < 3 ? "home" : "street"});
  std::vector<std::string> ids;
  for (const auto& r : m.recordings) ids.push_back(r.id);
  m.folds = make_kfold(ids, 3, 0.25, 5);
  EXPECT_NO_THROW(validate_manifest(m));
  EXPECT_EQ(parse_manifest(format_manifest(m)), m);
  for (const auto& f : m.folds) {
    EXPECT_EQ(f.test.size(), 2u);
    for (const auto& t : f.test) {
      EXPECT_EQ(std::count(f.train.begin(), f.train.end(), t), 0);
      EXPECT_EQ(std::count(f.val.begin(), f.val.end(), t), 0);
    }
  }
  auto bad = m;
  bad.folds[0].val.push_back(bad.folds[0].test.front());
  EXPECT_THROW(validate_manifest(bad), ValidationError);
  EXPECT_THROW(parse_manifest("not a manifest"), Error);
}

TEST(Chunks, FixedLengthWithClippedAnnotations) {
  AudioClip a;
  a.sample_rate = 100;
  a.samples.assign(1050, 0.f);
  const auto chunks = chunk_recording("r", a, {{"x", 3.5, 4.5, ""}, {"y", 9.0, 10.5, ""}}, 4.0);
  ASSERT_EQ(chunks.size(), 2u);
  EXPECT_EQ(chunks[0].id, "r_c00");
  ASSERT_EQ(chunks[0].annotations.size(), 1u);
  EXPECT_DOUBLE_EQ(chunks[0].annotations[0].offset, 4.0);
  ASSERT_EQ(chunks[1].annotations.size(), 1u);
  EXPECT_DOUBLE_EQ(chunks[1].annotations[0].onset, 0.0);
  EXPECT_DOUBLE_EQ(chunks[1].annotations[0].offset, 0.5);
}
