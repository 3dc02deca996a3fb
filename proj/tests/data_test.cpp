/*
 * kepler: iterative keypoint and pose estimation with heatmap-conditioned
 *         cascade regressors
 * File: tests/data_test.cpp
 *
 * Copyright 2026 The kepler authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "kepler/data.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <numbers>
#include <sstream>

using namespace kepler;
using kepler::test::Gen;

namespace {

std::vector<AnnotationRecord> records_with_yaw(std::size_t n, std::uint64_t seed)
{
    Gen gen(seed);
    std::vector<AnnotationRecord> out(n);
    for (auto& r : out) {
        r.face = gen.face(300.0);
        r.face.split_tag.clear();
    }
    return out;
}

std::string line_of(const AnnotationRecord& r)
{
    return format_annotation(r);
}

} // namespace

TEST(Annotation, EmptyInputGivesEmptySequence)
{
    std::istringstream is("");
    EXPECT_TRUE(read_annotations(is).empty());
    std::istringstream blank("\n  \n");
    EXPECT_TRUE(read_annotations(blank).empty());
}

TEST(Annotation, RoundTripOfRandomRecords)
{
    Gen gen(31);
    std::vector<AnnotationRecord> recs(100);
    for (auto& r : recs) {
        r.face = gen.face(500.0);
        if (gen.coin()) {
            std::array<double, kNumLandmarks> c{};
            for (auto& x : c) x = gen.uniform(0.0, 1.0);
            r.confidence = c;
        }
    }
    std::stringstream ss;
    for (const auto& r : recs) ss << format_annotation(r) << '\n';
    EXPECT_EQ(read_annotations(ss), recs);

    const auto dir = test::scratch_dir("annotations");
    save_annotations(recs, dir / "a.jsonl");
    EXPECT_EQ(load_annotations(dir / "a.jsonl"), recs);
}

TEST(Annotation, TwentyLandmarksErrorNamesLine)
{
    Gen gen(32);
    AnnotationRecord good{gen.face(200.0), std::nullopt};
    std::string bad = line_of(good);
    // Drop the last landmark entry.
    const auto cut = bad.rfind(",{\"i\":20");
    ASSERT_NE(cut, std::string::npos);
    const auto end = bad.find('}', cut);
    bad.erase(cut, end - cut + 1);
    std::stringstream ss;
    ss << line_of(good) << '\n' << line_of(good) << '\n' << bad << '\n';
    try {
        read_annotations(ss, "faces.jsonl");
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        const std::string what = e.what();
        EXPECT_NE(what.find("line 3"), std::string::npos) << what;
        EXPECT_NE(what.find("faces.jsonl"), std::string::npos) << what;
        EXPECT_NE(what.find("20"), std::string::npos) << what;
    }
}

TEST(Annotation, RejectsInvariantViolations)
{
    Gen gen(33);
    AnnotationRecord r{gen.face(200.0), std::nullopt};
    r.face.visibility[0] = 1.0;
    r.face.shape[0] = {5.0, 5.0};
    const std::string ok = line_of(r);
    EXPECT_NO_THROW(parse_annotation(ok, 1));

    std::string visible_without_xy = ok;
    const auto at = visible_without_xy.find(",\"x\":");
    ASSERT_NE(at, std::string::npos);
    visible_without_xy.erase(at, visible_without_xy.find('}', at) - at);
    EXPECT_THROW(parse_annotation(visible_without_xy, 4), DataError);

    EXPECT_THROW(parse_annotation("{not json", 2), DataError);
    EXPECT_THROW(parse_annotation("[1, 2]", 2), DataError);
    std::string zero_box = ok;
    zero_box.replace(zero_box.find("\"box\":[") + 7, zero_box.find(']', zero_box.find("\"box\":[")) - zero_box.find("\"box\":[") - 7,
                     "0,0,0,10");
    EXPECT_THROW(parse_annotation(zero_box, 5), DataError);
}

TEST(Protocols, NamesRoundTrip)
{
    for (Protocol p : {Protocol::pifa, Protocol::full, Protocol::all_variants, Protocol::afw})
        EXPECT_EQ(parse_protocol(protocol_name(p)), p);
    EXPECT_THROW(parse_protocol("cofw"), ConfigError);
}

TEST(SplitPifa, CountsDeterminismAndEqualGroups)
{
    const auto recs = records_with_yaw(5000, 34);
    const ProtocolSplit a = split_pifa(recs, 7, 1000);
    EXPECT_EQ(a.train.size(), 4000u);
    EXPECT_EQ(a.test.size(), 1000u);
    ASSERT_EQ(a.groups.size(), 3u);
    for (const auto& g : a.groups) EXPECT_GE(g.size(), 333u);
    std::size_t exact = 0;
    for (const auto& g : a.groups) exact += g.size() == 333u ? 1 : 0;
    EXPECT_GE(exact, 2u);

    const ProtocolSplit b = split_pifa(recs, 7, 1000);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.test, b.test);
    EXPECT_NE(split_pifa(recs, 8, 1000).test, a.test);

    std::vector<bool> seen(recs.size(), false);
    for (auto i : a.train) seen[i] = true;
    for (auto i : a.test) {
        EXPECT_FALSE(seen[i]);
        seen[i] = true;
    }
    EXPECT_TRUE(std::all_of(seen.begin(), seen.end(), [](bool s) { return s; }));
    EXPECT_THROW(split_pifa(records_with_yaw(1000, 1), 7, 1000), DataError);
}

TEST(SplitFull, CountsAndFiles)
{
    const auto recs = records_with_yaw(300, 35);
    const ProtocolSplit s = split_full(recs, 3, 100);
    EXPECT_EQ(s.train.size(), 200u);
    EXPECT_EQ(s.test.size(), 100u);
    const auto dir = test::scratch_dir("split");
    write_split(split_pifa(recs, 3, 90), dir);
    for (const char* f : {"train.txt", "test.txt", "yaw_0_30.txt", "yaw_30_60.txt", "yaw_60_90.txt"})
        EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
    std::ifstream is(dir / "test.txt");
    std::size_t lines = 0;
    for (std::string l; std::getline(is, l);) ++lines;
    EXPECT_EQ(lines, 90u);
}

TEST(FilterAfw, Examples)
{
    auto recs = records_with_yaw(3, 36);
    const std::array<double, 3> heights = {100, 151, 200};
    for (std::size_t k = 0; k < 3; ++k) recs[k].face.box.h = heights[k];
    EXPECT_EQ(filter_afw(recs, 150.0).size(), 2u);
    recs[1].face.box.h = 150.0;
    recs[2].face.box.h = 20.0;
    EXPECT_TRUE(filter_afw(recs, 150.0).empty());
}

TEST(Variants, EightPerRecordAndInverseMapping)
{
    const SyntheticFaceSpec spec = SyntheticFaceSpec::defaults();
    const auto synth = generate_synthetic(10, spec, 37);
    std::vector<FaceWithImage> faces;
    for (const auto& s : synth) faces.push_back({s.record, s.image});
    const auto variants = make_all_variants(faces);
    ASSERT_EQ(variants.size(), 80u);

    const double W = spec.image_width, H = spec.image_height;
    const Point2 pivot{0.5 * (W - 1), 0.5 * (H - 1)};
    std::size_t k = 0;
    for (const auto& f : faces) {
        for (bool flip : {false, true}) {
            for (double angle : {15.0, 30.0, 45.0, 60.0}) {
                const AnnotatedFace& v = variants[k++].record.face;
                EXPECT_EQ(v.visibility, transform_annotation(f.record.face, spec.image_width, spec.image_height, angle, flip).visibility);
                const AnnotatedFace full = transform_annotation(f.record.face, spec.image_width, spec.image_height, angle, flip);
                const Point2 offset{full.box.x - v.box.x, full.box.y - v.box.y};
                for (std::size_t i = 0; i < kNumLandmarks; ++i) {
                    const std::size_t src = flip ? kFlipPermutation[i] : i;
                    if (f.record.face.visibility[src] == 0.0) continue;
                    Point2 back = rotate_about(v.shape[i] + offset, pivot, -angle);
                    if (flip) back.x = W - 1 - back.x;
                    EXPECT_LT((back - f.record.face.shape[src]).norm(), 0.5);
                }
            }
        }
    }
    EXPECT_NE(variants[0].record.face.image_path, variants[4].record.face.image_path);
}

TEST(Variants, IncludeOriginalAddsOne)
{
    const auto synth = generate_synthetic(3, SyntheticFaceSpec::defaults(), 38);
    std::vector<FaceWithImage> faces;
    for (const auto& s : synth) faces.push_back({s.record, s.image});
    VariantOptions o;
    o.include_original = true;
    EXPECT_EQ(make_all_variants(faces, o).size(), 27u);
}

TEST(Synthetic, FrontalPoseIsSymmetricAndFullyVisible)
{
    const SyntheticFaceSpec spec = SyntheticFaceSpec::defaults();
    const SyntheticFace f = synthesize_face(spec, {0, 0, 0}, 99, 0);
    EXPECT_EQ(f.record.face.visibility.count_visible(), kNumLandmarks);
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        const Point2 a = f.full_shape[i];
        const Point2 b = f.full_shape[kFlipPermutation[i]];
        EXPECT_NEAR(a.x - f.center.x, f.center.x - b.x, 1e-9) << i;
        EXPECT_NEAR(a.y, b.y, 1e-9) << i;
    }
}

TEST(Synthetic, YawNinetyOcclusionMatchesNormalOracle)
{
    const SyntheticFaceSpec spec = SyntheticFaceSpec::defaults();
    for (double yaw : {90.0, -90.0, 45.0, -60.0}) {
        const double t = yaw * std::numbers::pi / 180.0;
        const SyntheticFace f = synthesize_face(spec, {yaw, 0, 0}, 5, 0);
        std::size_t hidden = 0;
        for (std::size_t i = 0; i < kNumLandmarks; ++i) {
            const auto& n = spec.normals[i];
            // Third row of the yaw rotation about the vertical axis.
            const double z = -std::sin(t) * n[0] + std::cos(t) * n[2];
            EXPECT_EQ(f.record.face.visibility[i], z < 0.0 ? 0.0 : 1.0) << "yaw " << yaw << " point " << i;
            hidden += z < 0.0 ? 1 : 0;
        }
        if (std::abs(yaw) == 90.0) EXPECT_GT(hidden, 0u);
    }
}

TEST(Synthetic, BlobCentroidRecoversKeypoint)
{
    const SyntheticFaceSpec spec = SyntheticFaceSpec::defaults();
    const auto faces = generate_synthetic(20, spec, 39);
    std::size_t checked = 0;
    for (const auto& f : faces) {
        for (std::size_t i = 0; i < kNumLandmarks; ++i) {
            if (f.record.face.visibility[i] == 0.0) continue;
            const Point2 p = f.full_shape[i];
            const double reach = 4.0 * spec.blob_sigma * f.scale;
            if (p.x < reach || p.y < reach || p.x > spec.image_width - 1 - reach || p.y > spec.image_height - 1 - reach)
                continue;
            const Image without = render_synthetic_image(spec, f, i);
            double sw = 0, sx = 0, sy = 0;
            for (int v = 0; v < spec.image_height; ++v)
                for (int u = 0; u < spec.image_width; ++u)
                    for (int c = 0; c < 3; ++c) {
                        const double d = std::abs(double(f.image.at(c, v, u)) - without.at(c, v, u));
                        sw += d;
                        sx += d * u;
                        sy += d * v;
                    }
            ASSERT_GT(sw, 0.0);
            EXPECT_LT((Point2{sx / sw, sy / sw} - p).norm(), 1.0) << "face " << f.record.face.image_path << " point " << i;
            ++checked;
        }
    }
    EXPECT_GT(checked, 200u);
}

TEST(Synthetic, DeterministicAndTagged)
{
    const SyntheticFaceSpec spec = SyntheticFaceSpec::defaults();
    const auto a = generate_synthetic(30, spec, 40);
    const auto b = generate_synthetic(30, spec, 40);
    std::size_t test = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        EXPECT_EQ(a[k].record, b[k].record);
        EXPECT_EQ(a[k].image, b[k].image);
        EXPECT_NO_THROW(a[k].record.face.validate());
        test += a[k].record.face.split_tag == "test";
    }
    EXPECT_GT(test, 0u);
    EXPECT_LT(test, a.size());
    // Face k depends only on (seed, k).
    EXPECT_EQ(generate_synthetic(5, spec, 40)[4].record, a[4].record);
}

TEST(Synthetic, SpecValidation)
{
    SyntheticFaceSpec s = SyntheticFaceSpec::defaults();
    s.yaw_range = {-100, 10};
    EXPECT_THROW(s.validate(), ConfigError);
    s = SyntheticFaceSpec::defaults();
    s.scale_range = {5, 2};
    EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Dataset, SaveLoadRoundTrip)
{
    const auto synth = generate_synthetic(4, SyntheticFaceSpec::defaults(), 41);
    std::vector<FaceWithImage> faces;
    for (const auto& s : synth) faces.push_back({s.record, s.image});
    const auto dir = test::scratch_dir("dataset");
    save_dataset(faces, dir);
    const auto back = load_dataset(dir / "annotations.jsonl");
    ASSERT_EQ(back.size(), faces.size());
    for (std::size_t k = 0; k < faces.size(); ++k) {
        EXPECT_EQ(back[k].record, faces[k].record);
        EXPECT_EQ(back[k].image, faces[k].image);
    }
}
