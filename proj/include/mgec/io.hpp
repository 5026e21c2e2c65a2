#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "mgec/data.hpp"
#include "mgec/errors.hpp"
#include "mgec/synthetic.hpp"

namespace mgec {

static_assert(std::endian::native == std::endian::little,
              "grid-binary format is little-endian; big-endian hosts are unsupported");

enum class DatasetFormat { csv, grid_binary };

namespace ioutil {

// Shortest round-trip formatting; parsing the result recovers the same bits.
inline std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& context) {
    double v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw ParseError(context + ": bad float '" + std::string(s) + "'");
    return v;
}

inline long long parse_int(std::string_view s, const std::string& context) {
    long long v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw ParseError(context + ": bad integer '" + std::string(s) + "'");
    return v;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t pos = 0;
    while (true) {
        const std::size_t comma = line.find(',', pos);
        if (comma == std::string_view::npos) {
            out.push_back(line.substr(pos));
            break;
        }
        out.push_back(line.substr(pos, comma - pos));
        pos = comma + 1;
    }
    return out;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& p, const char* ext) {
    std::filesystem::path out = p;
    out.replace_extension(ext);
    return out;
}

inline nlohmann::json load_json_file(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw ParseError("cannot open " + p.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(p.string() + ": " + e.what());
    }
}

inline void write_text_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw ParseError("cannot open " + p.string() + " for writing");
    out << text;
    if (!out) throw ParseError("write failed for " + p.string());
}

inline nlohmann::json matrix_to_json(const Matrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < m.rows; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (double v : m.row(i)) row.push_back(v);
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j, const std::string& context) {
    if (!j.is_array() || j.empty()) throw ParseError(context + ": expected a non-empty array");
    Matrix m(j.size(), j.front().size());
    for (std::size_t i = 0; i < m.rows; ++i) {
        const auto& row = j.at(i);
        if (row.size() != m.cols) throw ParseError(context + ": ragged rows");
        for (std::size_t k = 0; k < m.cols; ++k) m.at(i, k) = row.at(k).get<double>();
    }
    return m;
}

} // namespace ioutil

// --- flat CSV format --------------------------------------------------------
// header: domain_id,label,t_index,f0,...,f{d-1}; JSON sidecar with the same
// basename holds {"class_count", "dim"}.

inline void save_dataset_csv(const Dataset& ds, const std::filesystem::path& csv_path) {
    std::ostringstream out;
    const std::size_t d = ds.feature_dim();
    out << "domain_id,label,t_index";
    for (std::size_t i = 0; i < d; ++i) out << ",f" << i;
    out << "\n";
    for (const Sample& s : ds.samples) {
        out << s.domain_id << ',' << s.label << ',' << s.t_index;
        for (double v : s.features) out << ',' << ioutil::format_double(v);
        out << "\n";
    }
    ioutil::write_text_file(csv_path, out.str());
    nlohmann::json sidecar{{"class_count", ds.class_count}, {"dim", d}};
    ioutil::write_text_file(ioutil::sidecar_path(csv_path, ".json"), sidecar.dump(2) + "\n");
}

inline Dataset load_dataset_csv(const std::filesystem::path& csv_path) {
    const auto sidecar = ioutil::load_json_file(ioutil::sidecar_path(csv_path, ".json"));
    Dataset ds;
    ds.class_count = sidecar.at("class_count").get<int>();
    const auto dim = sidecar.at("dim").get<std::size_t>();

    std::ifstream in(csv_path);
    if (!in) throw ParseError("cannot open " + csv_path.string());
    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line)) throw ParseError(csv_path.string() + ": empty file");
    ++line_no;
    {
        std::string expected = "domain_id,label,t_index";
        for (std::size_t i = 0; i < dim; ++i) expected += ",f" + std::to_string(i);
        if (line != expected)
            throw ParseError(csv_path.string() + ":1: unexpected header '" + line + "'");
    }
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string ctx = csv_path.string() + ":" + std::to_string(line_no);
        const auto fields = ioutil::split_csv(line);
        if (fields.size() != dim + 3)
            throw ParseError(ctx + ": expected " + std::to_string(dim + 3) + " fields, got " +
                             std::to_string(fields.size()));
        Sample s;
        s.domain_id = static_cast<int>(ioutil::parse_int(fields[0], ctx));
        s.label = static_cast<int>(ioutil::parse_int(fields[1], ctx));
        s.t_index = ioutil::parse_int(fields[2], ctx);
        if (s.label < 0 || s.label >= ds.class_count)
            throw ParseError(ctx + ": label " + std::to_string(s.label) +
                             " out of range for class_count " + std::to_string(ds.class_count));
        s.features.resize(dim);
        for (std::size_t i = 0; i < dim; ++i)
            s.features[i] = ioutil::parse_double(fields[i + 3], ctx);
        ds.samples.push_back(std::move(s));
    }
    ds.rebuild_index();
    ds.validate();
    return ds;
}

// --- grid binary format -----------------------------------------------------
// <base>.bin: little-endian float32, sample-major, then electrode, then time.
// <base>.json sidecar: {"class_count","electrodes","timesteps","count"}.
// <base>.index.csv: one domain_id,label,t_index row per sample.

inline void save_dataset_grid(const Dataset& ds, const std::filesystem::path& bin_path) {
    if (ds.samples.empty() || !ds.samples.front().is_grid())
        throw ConfigError("grid save: dataset has no grid samples");
    const std::size_t e = ds.samples.front().electrodes;
    const std::size_t t = ds.samples.front().timesteps;
    std::ofstream out(bin_path, std::ios::binary);
    if (!out) throw ParseError("cannot open " + bin_path.string() + " for writing");
    for (const Sample& s : ds.samples) {
        if (s.electrodes != e || s.timesteps != t)
            throw ConfigError("grid save: mixed grid shapes");
        for (double v : s.features) {
            const float f = static_cast<float>(v);
            out.write(reinterpret_cast<const char*>(&f), sizeof(f));
        }
    }
    if (!out) throw ParseError("write failed for " + bin_path.string());
    out.close();

    nlohmann::json sidecar{{"class_count", ds.class_count},
                           {"electrodes", e},
                           {"timesteps", t},
                           {"count", ds.samples.size()}};
    ioutil::write_text_file(ioutil::sidecar_path(bin_path, ".json"), sidecar.dump(2) + "\n");

    std::ostringstream idx;
    idx << "domain_id,label,t_index\n";
    for (const Sample& s : ds.samples)
        idx << s.domain_id << ',' << s.label << ',' << s.t_index << "\n";
    ioutil::write_text_file(ioutil::sidecar_path(bin_path, ".index.csv"), idx.str());
}

inline Dataset load_dataset_grid(const std::filesystem::path& bin_path) {
    const auto sidecar = ioutil::load_json_file(ioutil::sidecar_path(bin_path, ".json"));
    Dataset ds;
    ds.class_count = sidecar.at("class_count").get<int>();
    const auto e = sidecar.at("electrodes").get<std::size_t>();
    const auto t = sidecar.at("timesteps").get<std::size_t>();
    const auto count = sidecar.at("count").get<std::size_t>();

    const auto index_path = ioutil::sidecar_path(bin_path, ".index.csv");
    std::ifstream idx(index_path);
    if (!idx) throw ParseError("cannot open " + index_path.string());
    std::string line;
    if (!std::getline(idx, line) || line != "domain_id,label,t_index")
        throw ParseError(index_path.string() + ":1: bad index header");

    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw ParseError("cannot open " + bin_path.string());

    std::size_t line_no = 1;
    std::vector<float> buf(e * t);
    for (std::size_t i = 0; i < count; ++i) {
        if (!std::getline(idx, line))
            throw ParseError(index_path.string() + ": expected " + std::to_string(count) + " rows");
        ++line_no;
        const std::string ctx = index_path.string() + ":" + std::to_string(line_no);
        const auto fields = ioutil::split_csv(line);
        if (fields.size() != 3) throw ParseError(ctx + ": expected 3 fields");
        Sample s;
        s.domain_id = static_cast<int>(ioutil::parse_int(fields[0], ctx));
        s.label = static_cast<int>(ioutil::parse_int(fields[1], ctx));
        s.t_index = ioutil::parse_int(fields[2], ctx);
        if (s.label < 0 || s.label >= ds.class_count)
            throw ParseError(ctx + ": label " + std::to_string(s.label) + " out of range");
        s.electrodes = e;
        s.timesteps = t;
        bin.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * sizeof(float)));
        if (!bin) throw ParseError(bin_path.string() + ": truncated at sample " + std::to_string(i));
        s.features.assign(buf.begin(), buf.end());
        ds.samples.push_back(std::move(s));
    }
    ds.rebuild_index();
    ds.validate();
    return ds;
}

inline Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format) {
    return format == DatasetFormat::csv ? load_dataset_csv(path) : load_dataset_grid(path);
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path, DatasetFormat format) {
    if (format == DatasetFormat::csv) save_dataset_csv(ds, path);
    else save_dataset_grid(ds, path);
}

// --- teacher record ---------------------------------------------------------

inline void save_teacher(const TeacherRecord& t, const std::filesystem::path& path) {
    nlohmann::json j;
    j["lambda"] = t.lambda;
    j["class_count"] = t.class_count;
    j["dim"] = t.dim;
    j["w_inv"] = ioutil::matrix_to_json(t.w_inv);
    nlohmann::json wd = nlohmann::json::array();
    for (const auto& m : t.w_domain) wd.push_back(ioutil::matrix_to_json(m));
    j["w_domain"] = std::move(wd);
    j["domain_group"] = t.domain_group;
    j["seed_requested"] = t.seed_requested;
    j["seed_used"] = t.seed_used;
    j["balance_retries"] = t.balance_retries;
    j["class_fractions"] = t.class_fractions;
    ioutil::write_text_file(path, j.dump(2) + "\n");
}

inline TeacherRecord load_teacher(const std::filesystem::path& path) {
    const auto j = ioutil::load_json_file(path);
    TeacherRecord t;
    t.lambda = j.at("lambda").get<double>();
    t.class_count = j.at("class_count").get<int>();
    t.dim = j.at("dim").get<std::size_t>();
    t.w_inv = ioutil::matrix_from_json(j.at("w_inv"), path.string() + ":w_inv");
    for (const auto& m : j.at("w_domain"))
        t.w_domain.push_back(ioutil::matrix_from_json(m, path.string() + ":w_domain"));
    t.domain_group = j.at("domain_group").get<std::vector<int>>();
    t.seed_requested = j.at("seed_requested").get<std::uint64_t>();
    t.seed_used = j.at("seed_used").get<std::uint64_t>();
    t.balance_retries = j.at("balance_retries").get<int>();
    t.class_fractions = j.at("class_fractions").get<std::vector<double>>();
    return t;
}

inline std::filesystem::path teacher_path_for(const std::filesystem::path& dataset_path) {
    return ioutil::sidecar_path(dataset_path, ".teacher.json");
}

} // namespace mgec
