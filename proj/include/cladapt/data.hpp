#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cladapt/nn.hpp"

namespace cladapt::data {

// Union label space: 7 shared findings, 7 unique to domain A, 7 unique to domain B.
inline constexpr std::size_t kGroupSize = 7;
inline constexpr std::size_t kLabelCount = 3 * kGroupSize;

enum class Domain : std::uint8_t { A = 0, B = 1 };

char domain_letter(Domain d);
Domain parse_domain(std::string_view s);

std::vector<std::size_t> shared_labels();
std::vector<std::size_t> unique_labels(Domain d);
// The 14 labels annotated in domain `d`.
nn::LabelMask domain_mask(Domain d);
nn::LabelMask shared_mask();
std::string label_name(std::size_t label);

struct Sample {
    std::vector<double> features;
    std::vector<std::uint8_t> labels;
    nn::LabelMask presence;
    std::int64_t sample_id = 0;
    std::int64_t group_id = 0;
    Domain domain = Domain::A;
};

// Group-structured multi-label samples stored column-block wise for batching.
struct Dataset {
    Matrix features;  // N x d
    Matrix labels;    // N x 21, 0/1; 0 outside the presence mask
    Matrix presence;  // N x 21, 0/1
    std::vector<std::int64_t> sample_ids;
    std::vector<std::int64_t> group_ids;
    std::vector<Domain> domains;

    std::size_t size() const { return sample_ids.size(); }
    bool empty() const { return sample_ids.empty(); }
    std::size_t feature_dim() const { return static_cast<std::size_t>(features.cols()); }

    Sample sample(std::size_t i) const;
    Dataset rows(std::span<const std::size_t> indices) const;
    // Rows whose group id is in `groups`, in original order.
    Dataset select_groups(std::span<const std::int64_t> groups) const;
    // Distinct group ids in order of first appearance.
    std::vector<std::int64_t> groups() const;

    bool operator==(const Dataset& other) const;
};

Dataset concat(const Dataset& first, const Dataset& second);

struct BenchmarkSpec {
    std::size_t feature_dim = 32;
    std::size_t groups_per_domain = 600;
    std::size_t min_group_size = 1;
    std::size_t max_group_size = 3;
    // Share of feature variance explained by the per-group latent offset.
    double group_variance = 0.3;
    // Scale of ground-truth logits (std of G_l . x before bias).
    double signal_scale = 3.0;
    // Fraction of coordinates mixed by the domain-B rotation.
    double rotation_fraction = 0.5;
    // Scales every principal angle of that rotation; 1 keeps the uniformly drawn rotation.
    double rotation_strength = 0.5;
    double translation = 1.0;
    // Overrides the generated rotation when present (d x d).
    std::optional<Matrix> mixing_override;
    std::uint64_t seed = 20200101;

    void validate() const;
    nlohmann::json to_json() const;
    static BenchmarkSpec from_json(const nlohmann::json& j);
    // Hash of the canonical JSON form.
    std::string hash() const;
};

// Hidden quantities drawn from the spec's seed.
struct GroundTruth {
    Matrix weights;  // 21 x d
    Vector biases;   // 21
    Matrix mixing;   // d x d, invertible
    Vector translation;
};

GroundTruth make_ground_truth(const BenchmarkSpec& spec);

struct DomainPair {
    Dataset a;
    Dataset b;
};

DomainPair generate(const BenchmarkSpec& spec);

struct SplitSpec {
    double test_fraction = 0.2;
    double validation_fraction = 0.1;  // of the training pool
    std::uint64_t base_seed = 0;       // fixes the test split

    void validate() const;
};

struct Splits {
    Dataset train;
    Dataset validation;
    Dataset test;
};

// Group-level partition: test depends only on base_seed, validation on repetition_seed.
Splits split(const Dataset& dataset, const SplitSpec& spec, std::uint64_t repetition_seed);

// CSV with a leading "#"-comment carrying spec hash, seed, row count and payload checksum.
void save_dataset(const Dataset& dataset, const std::filesystem::path& path, const std::string& spec_hash,
                  std::uint64_t seed);
// Throws IntegrityError on truncation, checksum mismatch or (if given) spec hash mismatch.
Dataset load_dataset(const std::filesystem::path& path, const std::optional<std::string>& expected_spec_hash = {});

}  // namespace cladapt::data
