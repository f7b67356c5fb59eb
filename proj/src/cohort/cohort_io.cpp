#include "dlfm/cohort.hpp"

#include "json.hpp"
#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dlfm::cohort {

using nlohmann::json;
namespace fs = std::filesystem;

std::vector<std::uint32_t> rle_encode(const std::vector<std::uint8_t>& mask)
{
    std::vector<std::uint32_t> runs;
    std::uint8_t cur = 0;
    std::uint32_t len = 0;
    for (auto m : mask) {
        const std::uint8_t b = m ? 1 : 0;
        if (b != cur) {
            runs.push_back(len);
            cur = b;
            len = 0;
        }
        ++len;
    }
    runs.push_back(len);
    return runs;
}

std::vector<std::uint8_t> rle_decode(const std::vector<std::uint32_t>& runs, std::size_t n)
{
    std::vector<std::uint8_t> out;
    out.reserve(n);
    std::uint8_t cur = 0;
    for (auto r : runs) {
        if (out.size() + r > n) throw IoError("cohort: mask run-length exceeds image size");
        out.insert(out.end(), r, cur);
        cur ^= 1;
    }
    if (out.size() != n) throw IoError("cohort: mask run-length does not cover the image");
    return out;
}

namespace {

static_assert(std::endian::native == std::endian::little, "scan payload IO assumes a little-endian host");

json config_json(const CohortConfig& c)
{
    return json{{"n_patients", c.n_patients},
                {"min_visits", c.min_visits},
                {"max_visits", c.max_visits},
                {"min_baseline_age", c.min_baseline_age},
                {"max_baseline_age", c.max_baseline_age},
                {"span_years", c.span_years},
                {"min_gap_years", c.min_gap_years},
                {"min_rate", c.min_rate},
                {"max_rate", c.max_rate},
                {"max_baseline_severity", c.max_baseline_severity},
                {"late_rate_factor", c.late_rate_factor},
                {"noise_std", c.noise_std},
                {"image_size", c.image_size},
                {"seed", c.seed}};
}

CohortConfig config_from(const json& j)
{
    CohortConfig c;
    c.n_patients = j.at("n_patients").get<std::size_t>();
    c.min_visits = j.at("min_visits").get<int>();
    c.max_visits = j.at("max_visits").get<int>();
    c.min_baseline_age = j.at("min_baseline_age").get<double>();
    c.max_baseline_age = j.at("max_baseline_age").get<double>();
    c.span_years = j.at("span_years").get<double>();
    c.min_gap_years = j.at("min_gap_years").get<double>();
    c.min_rate = j.at("min_rate").get<double>();
    c.max_rate = j.at("max_rate").get<double>();
    c.max_baseline_severity = j.at("max_baseline_severity").get<double>();
    c.late_rate_factor = j.at("late_rate_factor").get<double>();
    c.noise_std = j.at("noise_std").get<double>();
    c.image_size = j.at("image_size").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

std::uint32_t crc32_of(const std::string& bytes)
{
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
    return static_cast<std::uint32_t>(crc);
}

std::string read_file(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, const std::string& bytes)
{
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + p.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + p.string());
}

} // namespace

void save_cohort(const Cohort& cohort, const fs::path& dir)
{
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());

    const std::size_t w = cohort.config.image_size;
    std::string payload;
    payload.reserve(cohort.scan_count() * w * w * sizeof(float));
    json patients = json::array();
    for (const auto& p : cohort.patients) {
        json visits = json::array();
        for (const auto& v : p.visits) {
            if (v.image.width != w || v.image.height != w) throw ValidationError("cohort: scan size mismatch");
            for (double px : v.image.pixels) {
                const float f = static_cast<float>(px);
                char buf[sizeof(float)];
                std::memcpy(buf, &f, sizeof f);
                payload.append(buf, sizeof buf);
            }
            json masks = json::object();
            for (std::size_t r = 0; r < kRegionCount; ++r) masks[kRegionNames[r]] = rle_encode(v.masks.masks[r]);
            visits.push_back({{"age", v.age}, {"severity", v.severity}, {"masks", masks}});
        }
        patients.push_back({{"id", p.id},
                            {"sex", p.sex},
                            {"baseline_age", p.baseline_age},
                            {"status", p.status},
                            {"progression_rate", p.progression_rate},
                            {"anatomy_seed", p.anatomy_seed},
                            {"visits", visits}});
    }
    json meta{{"format_version", kCohortFormatVersion},
              {"image_width", w},
              {"image_height", w},
              {"scan_count", cohort.scan_count()},
              {"scans_crc32", crc32_of(payload)},
              {"generator", config_json(cohort.config)},
              {"patients", patients}};
    write_file(dir / "scans.bin", payload);
    write_file(dir / "cohort.json", meta.dump(1));
}

Cohort load_cohort(const fs::path& dir)
{
    json meta;
    try {
        meta = json::parse(read_file(dir / "cohort.json"));
    } catch (const json::parse_error& e) {
        throw IoError(std::string("cohort.json: ") + e.what());
    }
    try {
        if (meta.at("format_version").get<int>() != kCohortFormatVersion)
            throw IoError("cohort.json: unsupported format_version " + meta.at("format_version").dump());
        Cohort cohort;
        cohort.config = config_from(meta.at("generator"));
        const auto w = meta.at("image_width").get<std::size_t>();
        const auto h = meta.at("image_height").get<std::size_t>();
        if (w != cohort.config.image_size || h != w) throw IoError("cohort.json: inconsistent image size");
        const auto n_scans = meta.at("scan_count").get<std::size_t>();

        const std::string payload = read_file(dir / "scans.bin");
        if (payload.size() != n_scans * w * h * sizeof(float))
            throw IoError("scans.bin: truncated or oversized payload (" + std::to_string(payload.size()) + " bytes)");
        if (crc32_of(payload) != meta.at("scans_crc32").get<std::uint32_t>())
            throw IoError("scans.bin: checksum mismatch");

        std::size_t off = 0;
        for (const auto& jp : meta.at("patients")) {
            PatientRecord p;
            p.id = jp.at("id").get<std::int64_t>();
            p.sex = jp.at("sex").get<int>();
            p.baseline_age = jp.at("baseline_age").get<double>();
            p.status = jp.at("status").get<int>();
            p.progression_rate = jp.at("progression_rate").get<double>();
            p.anatomy_seed = jp.at("anatomy_seed").get<std::uint64_t>();
            for (const auto& jv : jp.at("visits")) {
                Visit v;
                v.age = jv.at("age").get<double>();
                v.severity = jv.at("severity").get<double>();
                if (off + w * h > n_scans * w * h) throw IoError("cohort.json: more visits than scan_count");
                v.image = ScanImage(w, h);
                for (std::size_t i = 0; i < w * h; ++i, ++off) {
                    float f;
                    std::memcpy(&f, payload.data() + off * sizeof(float), sizeof f);
                    v.image.pixels[i] = static_cast<double>(f);
                }
                v.masks.width = w;
                v.masks.height = h;
                for (std::size_t r = 0; r < kRegionCount; ++r)
                    v.masks.masks[r] = rle_decode(jv.at("masks").at(kRegionNames[r]).get<std::vector<std::uint32_t>>(),
                                                  w * h);
                p.visits.push_back(std::move(v));
            }
            cohort.patients.push_back(std::move(p));
        }
        if (off != n_scans * w * h) throw IoError("cohort.json: fewer visits than scan_count");
        return cohort;
    } catch (const json::exception& e) {
        throw IoError(std::string("cohort.json: ") + e.what());
    }
}

void save_split(const CohortSplit& split, const fs::path& file)
{
    json j{{"fractions", {split.fractions.train, split.fractions.val, split.fractions.test}},
           {"seed", split.seed},
           {"train", split.train},
           {"val", split.val},
           {"test", split.test}};
    write_file(file, j.dump(1));
}

CohortSplit load_split(const fs::path& file)
{
    try {
        const json j = json::parse(read_file(file));
        CohortSplit s;
        const auto f = j.at("fractions").get<std::vector<double>>();
        if (f.size() != 3) throw IoError("split: expected three fractions");
        s.fractions = {f[0], f[1], f[2]};
        s.seed = j.at("seed").get<std::uint64_t>();
        s.train = j.at("train").get<std::vector<std::int64_t>>();
        s.val = j.at("val").get<std::vector<std::int64_t>>();
        s.test = j.at("test").get<std::vector<std::int64_t>>();
        return s;
    } catch (const json::exception& e) {
        throw IoError("split " + file.string() + ": " + e.what());
    }
}

} // namespace dlfm::cohort
