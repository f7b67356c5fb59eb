#include "doctest.h"

#include "dlfm/cohort.hpp"
#include "dlfm/rng.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

using namespace dlfm;
using namespace dlfm::cohort;

namespace {

std::filesystem::path temp_dir(const std::string& name)
{
    auto p = std::filesystem::temp_directory_path() / ("dlfm_test_" + name);
    std::filesystem::remove_all(p);
    return p;
}

CohortConfig small_config(std::size_t n, std::uint64_t seed)
{
    CohortConfig c;
    c.n_patients = n;
    c.seed = seed;
    return c;
}

} // namespace

TEST_CASE("render: ventricle mask grows between severity 0 and 2")
{
    auto a = render_scan(11, 0.0, 5, 0.0);
    auto b = render_scan(11, 2.0, 5, 0.0);
    CHECK(b.masks.area(Region::Ventricle) > a.masks.area(Region::Ventricle));
    CHECK(b.masks.area(Region::Hippocampus) <= a.masks.area(Region::Hippocampus));
}

TEST_CASE("render: identical arguments give bitwise-identical output")
{
    auto a = render_scan(99, 1.3, 17, 0.03);
    auto b = render_scan(99, 1.3, 17, 0.03);
    CHECK(a.image == b.image);
    CHECK(a.masks == b.masks);
    auto c = render_scan(99, 1.3, 18, 0.03);
    CHECK_FALSE(a.image == c.image);
}

TEST_CASE("render: mean absolute noise matches the half-normal mean")
{
    const double sigma = 0.05;
    const double expected = sigma * std::sqrt(2.0 / std::numbers::pi);
    auto clean = render_scan(3, 1.0, 8, 0.0);
    auto noisy = render_scan(3, 1.0, 8, sigma);
    double mad = 0.0;
    for (std::size_t i = 0; i < clean.image.size(); ++i) mad += std::abs(noisy.image.pixels[i] - clean.image.pixels[i]);
    mad /= static_cast<double>(clean.image.size());
    CHECK(mad > 0.8 * expected);
    CHECK(mad < 1.2 * expected);
}

TEST_CASE("render: pixels in range and masks partition the image")
{
    Rng rng(4);
    for (int k = 0; k < 30; ++k) {
        auto r = render_scan(rng.next(), rng.uniform(0.0, 12.0), rng.next(), rng.uniform(0.0, 0.1));
        CHECK(r.masks.is_partition());
        for (double p : r.image.pixels) {
            CHECK(p >= 0.0);
            CHECK(p <= 1.0);
        }
    }
}

TEST_CASE("render: out-of-range inputs are clamped")
{
    auto a = render_scan(1, -3.0, 2, 0.0);
    auto b = render_scan(1, 0.0, 2, 0.0);
    CHECK(a.image == b.image);
    auto c = render_scan(1, 1.0, 2, 5.0);
    auto d = render_scan(1, 1.0, 2, 0.1);
    CHECK(c.image == d.image);
}

TEST_CASE("render: shape monotonicity over a 20-point severity grid for 10 anatomies")
{
    Rng rng(2024);
    for (int k = 0; k < 10; ++k) {
        const std::uint64_t seed = rng.next();
        std::size_t prev_vent = 0;
        std::size_t prev_hip = std::numeric_limits<std::size_t>::max();
        Geometry prev_g{};
        for (int i = 0; i < 20; ++i) {
            const double s = 0.5 * i;
            auto r = render_scan(seed, s, 0, 0.0);
            const Geometry g = scan_geometry(seed, s);
            const std::size_t vent = r.masks.area(Region::Ventricle);
            const std::size_t hip = r.masks.area(Region::Hippocampus);
            CHECK(hip >= 2);
            if (i > 0) {
                // Pixel counts are quantized; the ellipse itself must grow strictly.
                CHECK(vent >= prev_vent);
                CHECK(hip <= prev_hip);
                CHECK(g.ventricle_area() > prev_g.ventricle_area());
                CHECK(g.hippocampus_area() < prev_g.hippocampus_area());
                CHECK(g.cortex_thickness < prev_g.cortex_thickness);
            }
            prev_vent = vent;
            prev_hip = hip;
            prev_g = g;
        }
        CHECK(prev_vent > render_scan(seed, 0.0, 0, 0.0).masks.area(Region::Ventricle));
    }
}

TEST_CASE("generate: deterministic for a fixed seed")
{
    auto a = generate_cohort(small_config(10, 7));
    auto b = generate_cohort(small_config(10, 7));
    CHECK(a == b);
    auto c = generate_cohort(small_config(10, 8));
    CHECK_FALSE(a == c);
}

TEST_CASE("generate: visit ages and severities strictly increase")
{
    auto c = generate_cohort(small_config(40, 3));
    for (const auto& p : c.patients) {
        CHECK(p.progression_rate > 0.0);
        REQUIRE(p.visits.size() >= 2);
        CHECK(p.visits.front().age == p.baseline_age);
        for (std::size_t i = 1; i < p.visits.size(); ++i) {
            CHECK(p.visits[i].age - p.visits[i - 1].age >= 0.5 - 1e-12);
            CHECK(p.visits[i].severity > p.visits[i - 1].severity);
            CHECK(p.visits[i].age - p.baseline_age <= c.config.span_years + 1e-9);
        }
        for (const auto& v : p.visits) CHECK(v.severity >= 0.0);
    }
}

TEST_CASE("generate: 64 patients with 4-8 visits give 256-512 scans")
{
    auto c = generate_cohort(small_config(64, 7));
    REQUIRE(c.patients.size() == 64);
    std::size_t count = 0;
    for (const auto& p : c.patients) {
        CHECK(p.visits.size() >= 4);
        CHECK(p.visits.size() <= 8);
        count += p.visits.size();
    }
    CHECK(count == c.scan_count());
    CHECK(count >= 256);
    CHECK(count <= 512);
}

TEST_CASE("generate: status follows baseline severity terciles")
{
    auto c = generate_cohort(small_config(60, 12));
    std::array<int, 3> counts{};
    for (const auto& p : c.patients) {
        REQUIRE((p.status == 0 || p.status == 3 || p.status == 6));
        ++counts[static_cast<std::size_t>(p.status / 3)];
    }
    for (int n : counts) CHECK(n == 20);
    // Higher status never has lower baseline severity.
    for (const auto& p : c.patients)
        for (const auto& q : c.patients)
            if (p.status < q.status) CHECK(p.visits.front().severity <= q.visits.front().severity);
}

TEST_CASE("generate: piecewise mode bends the trajectory after the midpoint")
{
    CohortConfig cfg = small_config(1, 1);
    cfg.late_rate_factor = 2.0;
    CHECK(severity_at(cfg, 1.0, 0.5, 70.0, 74.0) == doctest::Approx(3.0));
    CHECK(severity_at(cfg, 1.0, 0.5, 70.0, 78.0) == doctest::Approx(1.0 + 2.5 + 3.0));
}

TEST_CASE("generate: infeasible ranges are rejected")
{
    CohortConfig cfg = small_config(5, 1);
    cfg.max_visits = 10;
    cfg.min_gap_years = 1.5;
    CHECK_THROWS_AS(generate_cohort(cfg), ValidationError);
    cfg = small_config(5, 1);
    cfg.min_visits = 6;
    cfg.max_visits = 5;
    CHECK_THROWS_AS(generate_cohort(cfg), ValidationError);
    cfg = small_config(5, 1);
    cfg.min_rate = 0.9;
    cfg.max_rate = 0.1;
    CHECK_THROWS_AS(generate_cohort(cfg), ValidationError);
}

TEST_CASE("split: 20 patients give 16/1/3")
{
    auto c = generate_cohort(small_config(20, 7));
    auto s = split_cohort(c, {}, 42);
    CHECK(s.train.size() == 16);
    CHECK(s.val.size() == 1);
    CHECK(s.test.size() == 3);
    std::set<std::int64_t> all;
    for (auto* v : {&s.train, &s.val, &s.test}) all.insert(v->begin(), v->end());
    CHECK(all.size() == 20);
    auto s2 = split_cohort(c, {}, 42);
    CHECK(s2.train == s.train);
    CHECK(s2.test == s.test);
}

TEST_CASE("split: everything to train and too-small cohorts")
{
    auto c = generate_cohort(small_config(7, 7));
    auto s = split_cohort(c, {1.0, 0.0, 0.0}, 1);
    CHECK(s.train.size() == 7);
    CHECK(s.val.empty());
    CHECK(s.test.empty());
    auto tiny = generate_cohort(small_config(2, 7));
    CHECK_THROWS_AS(split_cohort(tiny, {}, 1), ValidationError);
    CHECK_THROWS_AS(split_cohort(c, {0.5, 0.2, 0.2}, 1), ValidationError);
}

TEST_CASE("io: save and load round-trip every field")
{
    auto c = generate_cohort(small_config(6, 21));
    auto dir = temp_dir("roundtrip");
    save_cohort(c, dir);
    auto back = load_cohort(dir);
    CHECK(back == c);
    std::filesystem::remove_all(dir);
}

TEST_CASE("io: corrupt payload byte is reported")
{
    auto c = generate_cohort(small_config(3, 5));
    auto dir = temp_dir("corrupt");
    save_cohort(c, dir);
    {
        std::fstream f(dir / "scans.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(100);
        char b = 0;
        f.read(&b, 1);
        f.seekp(100);
        b = static_cast<char>(b ^ 0x5A);
        f.write(&b, 1);
    }
    CHECK_THROWS_WITH_AS(load_cohort(dir), doctest::Contains("checksum"), IoError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("io: truncated payload and version mismatch")
{
    auto c = generate_cohort(small_config(3, 5));
    auto dir = temp_dir("truncated");
    save_cohort(c, dir);
    const auto size = std::filesystem::file_size(dir / "scans.bin");
    std::filesystem::resize_file(dir / "scans.bin", size - 4);
    CHECK_THROWS_WITH_AS(load_cohort(dir), doctest::Contains("truncated"), IoError);

    save_cohort(c, dir);
    std::ifstream in(dir / "cohort.json");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    const auto pos = text.find("\"format_version\": 1");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 19, "\"format_version\": 9");
    std::ofstream(dir / "cohort.json") << text;
    CHECK_THROWS_WITH_AS(load_cohort(dir), doctest::Contains("format_version"), IoError);
    CHECK_THROWS_AS(load_cohort(dir / "missing"), IoError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("io: empty cohort")
{
    auto c = generate_cohort(small_config(0, 5));
    CHECK(c.patients.empty());
    auto dir = temp_dir("empty");
    save_cohort(c, dir);
    auto back = load_cohort(dir);
    CHECK(back.patients.empty());
    CHECK(back == c);
    std::filesystem::remove_all(dir);
}

TEST_CASE("io: mask run-length encoding")
{
    std::vector<std::uint8_t> m = {1, 1, 0, 0, 0, 1, 0};
    auto runs = rle_encode(m);
    CHECK(runs == std::vector<std::uint32_t>{0, 2, 3, 1, 1});
    CHECK(rle_decode(runs, m.size()) == m);
    CHECK_THROWS_AS(rle_decode(runs, 5), IoError);
}

TEST_CASE("io: split file round-trip")
{
    auto c = generate_cohort(small_config(20, 7));
    auto s = split_cohort(c, {}, 3);
    auto dir = temp_dir("split");
    std::filesystem::create_directories(dir);
    save_split(s, dir / "split.json");
    auto b = load_split(dir / "split.json");
    CHECK(b.train == s.train);
    CHECK(b.val == s.val);
    CHECK(b.test == s.test);
    CHECK(b.seed == s.seed);
    std::filesystem::remove_all(dir);
}
