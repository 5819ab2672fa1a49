#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace hvgg {

/// Two-level label tree: every fine class has exactly one coarse parent.
struct ClassHierarchy {
  std::vector<std::string> coarse_names;
  std::vector<std::string> fine_names;
  std::vector<std::size_t> parent;  // fine index -> coarse index

  /// Duodenum {Celiac, EE, Normal}, Esophagus {EoE, Normal}, Ileum {Crohn's, Normal}.
  static ClassHierarchy gastrointestinal();

  /// Parses "Coarse:fine|fine;Coarse:fine|...".
  static ClassHierarchy parse(std::string_view text);
  std::string to_string() const;

  std::size_t coarse_count() const { return coarse_names.size(); }
  std::size_t fine_count() const { return fine_names.size(); }
  std::vector<std::size_t> children(std::size_t coarse) const;

  std::optional<std::size_t> coarse_index(std::string_view name) const;
  std::optional<std::size_t> fine_index(std::string_view name) const;

  // Throws std::invalid_argument naming the violated invariant.
  void validate() const;

  nlohmann::json to_json() const;
  static ClassHierarchy from_json(const nlohmann::json& j);

  bool operator==(const ClassHierarchy&) const = default;
};

}  // namespace hvgg
