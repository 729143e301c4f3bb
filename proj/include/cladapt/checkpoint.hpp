#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cladapt/nn.hpp"

namespace cladapt::io {

// Text record of one or more vectors aligned to a parameter layout.
// Values are written as hexadecimal floats so a write/read cycle is bit-exact.
//
//   cladapt-params 1
//   kind <kind>
//   meta <key> <value>          (zero or more, sorted by key)
//   tensor <name> <rows> <cols> (one per layout entry)
//   vector <name> <length>
//   <value>                     (one per line)
//   end
struct ParameterRecord {
    std::string kind;
    nn::ParameterLayout layout;
    std::map<std::string, std::string> metadata;
    std::vector<std::pair<std::string, std::vector<double>>> vectors;

    const std::vector<double>& vector(const std::string& name) const;
    const std::string& meta(const std::string& key) const;
};

void write_record(const std::filesystem::path& path, const ParameterRecord& record);
ParameterRecord read_record(const std::filesystem::path& path);

std::string format_hex(double v);
double parse_hex(const std::string& s);

// Model checkpoint: layout, parameters, clamp epsilon, and init seed.
void save_model(const nn::MlpModel& model, const std::filesystem::path& path);
nn::MlpModel load_model(const std::filesystem::path& path);

}  // namespace cladapt::io
