#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "aclf/toy_scenes.hpp"

using namespace aclf;

TEST(GenerateScene, DeterministicPerSeed) {
  for (std::uint64_t seed : {1ull, 42ull, 987654321ull}) {
    const Scene a = generate_scene(seed, 8, 8);
    const Scene b = generate_scene(seed, 8, 8);
    EXPECT_EQ(a, b);
  }
}

TEST(GenerateScene, SmallGridRejected) {
  EXPECT_THROW(generate_scene(1, 3, 8), std::invalid_argument);
  EXPECT_THROW(generate_scene(1, 8, 2), std::invalid_argument);
}

TEST(GenerateScene, BlobsInBoundsAndDisjointOverManySeeds) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const Scene s = generate_scene(seed, 8, 8);
    ASSERT_GE(s.blobs.size(), 1u);
    ASSERT_LE(s.blobs.size(), 3u);
    for (std::size_t i = 0; i < s.blobs.size(); ++i) {
      const Blob& b = s.blobs[i];
      ASSERT_GE(b.top, 0);
      ASSERT_GE(b.left, 0);
      ASSERT_LE(b.top + b.height, 8);
      ASSERT_LE(b.left + b.width, 8);
      for (std::size_t j = i + 1; j < s.blobs.size(); ++j)
        ASSERT_FALSE(b.overlaps(s.blobs[j])) << "seed " << seed;
    }
  }
}

TEST(SceneFeatures, OneHotColorsAndZeroBackground) {
  const Scene s = generate_scene(7, 8, 8);
  const Tensor f = scene_to_features(s);
  ASSERT_EQ(f.shape(), (std::vector<std::size_t>{64, 8}));
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) {
      const double* row = f.data() + (r * 8 + c) * kSceneFeatureDim;
      const Blob* owner = nullptr;
      for (const Blob& b : s.blobs)
        if (b.contains(r, c)) owner = &b;
      for (int col = 0; col < 6; ++col) {
        const double expected =
            owner != nullptr && owner->color == col ? 1.0 : 0.0;
        ASSERT_EQ(row[col], expected);
      }
      ASSERT_GT(row[6], 0.0);
      ASSERT_LT(row[6], 1.0);
    }
}

TEST(GenerateCaption, GrammarForSingleSmallBlob) {
  Scene s;
  s.grid_h = 9;
  s.grid_w = 9;
  s.blobs = {Blob{0, 0, 0, 1, 1}};  // red 1x1 at the top-left corner
  const auto words = caption_words(s);
  const std::vector<std::string> expected = {"a",  "small", "red", "block",
                                             "at", "top",   "left"};
  EXPECT_EQ(words, expected);
}

TEST(GenerateCaption, BandsFollowCenterThirds) {
  Scene s;
  s.grid_h = 9;
  s.grid_w = 9;
  s.blobs = {Blob{2, 4, 4, 1, 1}};  // center cell of a 9x9 grid
  const auto words = caption_words(s);
  EXPECT_EQ(words[5], "middle");
  EXPECT_EQ(words[6], "center");
  s.blobs = {Blob{3, 7, 7, 2, 2}};  // bottom-right region, area 4 -> big
  const auto words2 = caption_words(s);
  EXPECT_EQ(words2[1], "big");
  EXPECT_EQ(words2[5], "bottom");
  EXPECT_EQ(words2[6], "right");
}

TEST(GenerateCaption, TwoBlobsJoinedByExactlyOneAnd) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const Scene s = generate_scene(seed, 8, 8);
    if (s.blobs.size() != 2) continue;
    const auto words = caption_words(s);
    EXPECT_EQ(std::count(words.begin(), words.end(), "and"), 1);
  }
}

TEST(GenerateCaption, SortedByTopThenLeft) {
  Scene s;
  s.grid_h = 8;
  s.grid_w = 8;
  s.blobs = {Blob{1, 5, 1, 1, 1}, Blob{2, 0, 6, 1, 1}};
  const auto words = caption_words(s);
  EXPECT_EQ(words[2], "blue");   // the (0,6) blob renders first
  EXPECT_EQ(words[10], "green");
}

TEST(GenerateCaption, BosEosWrappedAndWithinLengthBudget) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto ids = generate_caption(generate_scene(seed, 8, 8));
    ASSERT_EQ(ids.front(), kBosId);
    ASSERT_EQ(ids.back(), kEosId);
    ASSERT_LE(ids.size(), 32u);
  }
}

TEST(Tokens, RoundTripThroughVocabulary) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const Scene s = generate_scene(seed, 8, 8);
    const auto words = caption_words(s);
    std::vector<int> ids;
    for (const auto& w : words) ids.push_back(token_id(w));
    EXPECT_EQ(detokenize(ids), words);
  }
}

TEST(Tokens, CaptionIsPureFunctionOfScene) {
  const Scene s = generate_scene(33, 8, 8);
  EXPECT_EQ(generate_caption(s), generate_caption(s));
}

TEST(Vocabulary, NoDeadTokensInLargeCorpus) {
  std::set<int> seen = {kPadId};  // padding never appears inside a caption
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    for (int id : generate_caption(generate_scene(seed, 8, 8))) seen.insert(id);
    if (seen.size() == vocabulary().size()) break;
  }
  EXPECT_EQ(seen.size(), vocabulary().size());
}

TEST(Dataset, SplitCountsMatchRatios) {
  const std::string dir = ::testing::TempDir() + "/ds_counts";
  std::filesystem::create_directories(dir);
  const auto files = build_dataset(5, 100, {0.8, 0.1, 0.1}, 8, 8, dir);
  EXPECT_EQ(files.counts[0], 80u);
  EXPECT_EQ(files.counts[1], 10u);
  EXPECT_EQ(files.counts[2], 10u);
  const auto files2 = build_dataset(5, 101, {0.8, 0.1, 0.1}, 8, 8, dir);
  EXPECT_LE(std::abs(static_cast<int>(files2.counts[0]) - 81), 1);
}

TEST(Dataset, RereadReconstructsIdenticalSamples) {
  const std::string dir = ::testing::TempDir() + "/ds_roundtrip";
  std::filesystem::create_directories(dir);
  build_dataset(9, 60, {0.5, 0.25, 0.25}, 8, 8, dir);
  std::size_t checked = 0;
  for (const std::string file : {"train.jsonl", "val.jsonl", "test.jsonl"}) {
    for (const ToySample& s : load_dataset(dir + "/" + file)) {
      const ToySample regenerated = make_sample(s.seed, 8, 8);
      ASSERT_EQ(s.scene, regenerated.scene);
      ASSERT_EQ(s.caption, regenerated.caption);
      ++checked;
    }
  }
  EXPECT_EQ(checked, 60u);
}

TEST(Dataset, SplitsAreDisjointBySeed) {
  const std::string dir = ::testing::TempDir() + "/ds_disjoint";
  std::filesystem::create_directories(dir);
  build_dataset(13, 90, {0.6, 0.2, 0.2}, 8, 8, dir);
  std::set<std::uint64_t> seen;
  std::size_t total = 0;
  for (const std::string file : {"train.jsonl", "val.jsonl", "test.jsonl"}) {
    for (const ToySample& s : load_dataset(dir + "/" + file)) {
      EXPECT_TRUE(seen.insert(s.seed).second) << "duplicate seed " << s.seed;
      ++total;
    }
  }
  EXPECT_EQ(total, 90u);
}

TEST(Dataset, BadRatiosRejected) {
  EXPECT_THROW(build_dataset(1, 10, {0.5, 0.2, 0.2}, 8, 8, "."),
               std::invalid_argument);
}

TEST(Dataset, UnwritablePathReported) {
  EXPECT_THROW(build_dataset(1, 10, {0.8, 0.1, 0.1}, 8, 8,
                             "/nonexistent_dir/nested"),
               IoError);
}

TEST(Dataset, SchemaFieldPresent) {
  const std::string dir = ::testing::TempDir() + "/ds_schema";
  std::filesystem::create_directories(dir);
  build_dataset(21, 10, {0.8, 0.1, 0.1}, 6, 7, dir);
  std::ifstream is(dir + "/train.jsonl");
  std::string line;
  ASSERT_TRUE(std::getline(is, line));
  const auto j = nlohmann::json::parse(line);
  EXPECT_EQ(j.at("schema").get<int>(), 1);
  EXPECT_EQ(j.at("grid").at(0).get<int>(), 6);
  EXPECT_EQ(j.at("grid").at(1).get<int>(), 7);
  EXPECT_TRUE(j.contains("blobs"));
  EXPECT_TRUE(j.contains("caption"));
  EXPECT_TRUE(j.contains("seed"));
}
