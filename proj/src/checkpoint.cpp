#include "cladapt/checkpoint.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "cladapt/errors.hpp"

namespace cladapt::io {

namespace {

constexpr const char* kMagic = "cladapt-params";
constexpr int kVersion = 1;

std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

std::vector<std::size_t> split_sizes(const std::string& s) {
    std::vector<std::size_t> out;
    if (s.empty() || s == "-") return out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoull(item));
    return out;
}

}  // namespace

const std::vector<double>& ParameterRecord::vector(const std::string& name) const {
    for (const auto& [n, v] : vectors)
        if (n == name) return v;
    throw IntegrityError("parameter record has no vector '" + name + "'");
}

const std::string& ParameterRecord::meta(const std::string& key) const {
    auto it = metadata.find(key);
    if (it == metadata.end()) throw IntegrityError("parameter record has no metadata '" + key + "'");
    return it->second;
}

std::string format_hex(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::hex);
    return std::string(buf, res.ptr);
}

double parse_hex(const std::string& s) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v, std::chars_format::hex);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw IntegrityError("malformed hexadecimal float '" + s + "'");
    return v;
}

void write_record(const std::filesystem::path& path, const ParameterRecord& record) {
    for (const auto& [name, v] : record.vectors) {
        if (v.size() != record.layout.total_size())
            throw ShapeError("vector '" + name + "' does not match record layout");
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << kMagic << ' ' << kVersion << '\n';
    out << "kind " << record.kind << '\n';
    for (const auto& [k, v] : record.metadata) out << "meta " << k << ' ' << v << '\n';
    for (const auto& e : record.layout.entries()) out << "tensor " << e.name << ' ' << e.rows << ' ' << e.cols << '\n';
    for (const auto& [name, v] : record.vectors) {
        out << "vector " << name << ' ' << v.size() << '\n';
        for (double x : v) out << format_hex(x) << '\n';
    }
    out << "end\n";
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

ParameterRecord read_record(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IntegrityError("cannot open parameter record " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw IntegrityError("empty parameter record");
    {
        std::istringstream head(line);
        std::string magic;
        int version = 0;
        head >> magic >> version;
        if (magic != kMagic) throw IntegrityError("not a parameter record: " + path.string());
        if (version != kVersion) throw IntegrityError("unsupported parameter record version " + std::to_string(version));
    }
    ParameterRecord rec;
    std::vector<nn::TensorShape> shapes;
    bool ended = false;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "kind") {
            ls >> rec.kind;
        } else if (tag == "meta") {
            std::string key, value;
            ls >> key;
            std::getline(ls >> std::ws, value);
            rec.metadata[key] = value;
        } else if (tag == "tensor") {
            nn::TensorShape s;
            ls >> s.name >> s.rows >> s.cols;
            if (!ls) throw IntegrityError("malformed tensor line: " + line);
            shapes.push_back(s);
        } else if (tag == "vector") {
            std::string name;
            std::size_t n = 0;
            ls >> name >> n;
            if (!ls) throw IntegrityError("malformed vector line: " + line);
            std::vector<double> values;
            values.reserve(n);
            for (std::size_t i = 0; i < n; ++i) {
                if (!std::getline(in, line)) throw IntegrityError("truncated vector '" + name + "'");
                values.push_back(parse_hex(line));
            }
            rec.vectors.emplace_back(name, std::move(values));
        } else if (tag == "end") {
            ended = true;
            break;
        } else {
            throw IntegrityError("unexpected line in parameter record: " + line);
        }
    }
    if (!ended) throw IntegrityError("truncated parameter record " + path.string());
    rec.layout = nn::ParameterLayout(std::move(shapes));
    for (const auto& [name, v] : rec.vectors) {
        if (v.size() != rec.layout.total_size())
            throw IntegrityError("vector '" + name + "' does not match record layout");
    }
    return rec;
}

void save_model(const nn::MlpModel& model, const std::filesystem::path& path) {
    ParameterRecord rec;
    rec.kind = "model";
    rec.layout = model.layout();
    const auto& arch = model.architecture();
    rec.metadata["activation"] = "tanh";
    rec.metadata["clamp_eps"] = format_hex(nn::kClampEps);
    rec.metadata["hidden"] = arch.hidden.empty() ? "-" : join_sizes(arch.hidden);
    rec.metadata["input_dim"] = std::to_string(arch.input_dim);
    rec.metadata["output_dim"] = std::to_string(arch.output_dim);
    rec.metadata["seed"] = std::to_string(model.seed());
    auto params = model.get_parameters();
    rec.vectors.emplace_back("theta", std::vector<double>(params.values().begin(), params.values().end()));
    write_record(path, rec);
}

nn::MlpModel load_model(const std::filesystem::path& path) {
    const auto rec = read_record(path);
    if (rec.kind != "model") throw IntegrityError("record " + path.string() + " is not a model checkpoint");
    if (parse_hex(rec.meta("clamp_eps")) != nn::kClampEps)
        throw IntegrityError("checkpoint clamp epsilon differs from this build");
    nn::MlpArchitecture arch;
    arch.input_dim = std::stoull(rec.meta("input_dim"));
    arch.output_dim = std::stoull(rec.meta("output_dim"));
    arch.hidden = split_sizes(rec.meta("hidden"));
    const auto seed = std::stoull(rec.meta("seed"));
    nn::MlpModel model(arch, seed);
    if (!(model.layout() == rec.layout)) throw IntegrityError("checkpoint layout inconsistent with its architecture");
    model.set_parameters(nn::ParameterVector(rec.layout, rec.vector("theta")));
    return model;
}

}  // namespace cladapt::io
