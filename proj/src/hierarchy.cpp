#include "hvgg/hierarchy.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

namespace hvgg {

ClassHierarchy ClassHierarchy::gastrointestinal() {
  ClassHierarchy h;
  h.coarse_names = {"Duodenum", "Esophagus", "Ileum"};
  h.fine_names = {"Celiac", "EE", "Normal-Duodenum", "EoE", "Normal-Esophagus", "Crohn's",
                  "Normal-Ileum"};
  h.parent = {0, 0, 0, 1, 1, 2, 2};
  return h;
}

namespace {

std::vector<std::string_view> split(std::string_view text, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(sep, start);
    parts.push_back(text.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

}  // namespace

ClassHierarchy ClassHierarchy::parse(std::string_view text) {
  ClassHierarchy h;
  for (auto group : split(text, ';')) {
    group = trim(group);
    if (group.empty()) continue;
    const auto colon = group.find(':');
    if (colon == std::string_view::npos) {
      throw std::invalid_argument("hierarchy group '" + std::string(group) +
                                  "' lacks 'Coarse:' prefix");
    }
    h.coarse_names.emplace_back(trim(group.substr(0, colon)));
    for (auto fine : split(group.substr(colon + 1), '|')) {
      fine = trim(fine);
      if (fine.empty()) continue;
      h.fine_names.emplace_back(fine);
      h.parent.push_back(h.coarse_names.size() - 1);
    }
  }
  h.validate();
  return h;
}

std::string ClassHierarchy::to_string() const {
  std::string out;
  for (std::size_t c = 0; c < coarse_names.size(); ++c) {
    if (c) out += ';';
    out += coarse_names[c] + ':';
    bool first = true;
    for (auto f : children(c)) {
      if (!first) out += '|';
      out += fine_names[f];
      first = false;
    }
  }
  return out;
}

std::vector<std::size_t> ClassHierarchy::children(std::size_t coarse) const {
  std::vector<std::size_t> out;
  for (std::size_t f = 0; f < parent.size(); ++f)
    if (parent[f] == coarse) out.push_back(f);
  return out;
}

std::optional<std::size_t> ClassHierarchy::coarse_index(std::string_view name) const {
  const auto it = std::find(coarse_names.begin(), coarse_names.end(), name);
  if (it == coarse_names.end()) return std::nullopt;
  return static_cast<std::size_t>(it - coarse_names.begin());
}

std::optional<std::size_t> ClassHierarchy::fine_index(std::string_view name) const {
  const auto it = std::find(fine_names.begin(), fine_names.end(), name);
  if (it == fine_names.end()) return std::nullopt;
  return static_cast<std::size_t>(it - fine_names.begin());
}

void ClassHierarchy::validate() const {
  if (coarse_names.empty()) throw std::invalid_argument("hierarchy: no coarse categories");
  if (fine_names.size() != parent.size()) {
    throw std::invalid_argument("hierarchy: every fine class needs exactly one parent");
  }
  for (std::size_t f = 0; f < parent.size(); ++f) {
    if (parent[f] >= coarse_names.size()) {
      throw std::invalid_argument("hierarchy: fine class '" + fine_names[f] +
                                  "' has an unknown parent");
    }
  }
  for (std::size_t c = 0; c < coarse_names.size(); ++c) {
    if (children(c).empty()) {
      throw std::invalid_argument("hierarchy: coarse category '" + coarse_names[c] +
                                  "' has no children");
    }
  }
  if (std::set<std::string>(fine_names.begin(), fine_names.end()).size() != fine_names.size() ||
      std::set<std::string>(coarse_names.begin(), coarse_names.end()).size() !=
          coarse_names.size()) {
    throw std::invalid_argument("hierarchy: class names must be unique");
  }
}

nlohmann::json ClassHierarchy::to_json() const {
  return {{"coarse", coarse_names}, {"fine", fine_names}, {"parent", parent}};
}

ClassHierarchy ClassHierarchy::from_json(const nlohmann::json& j) {
  ClassHierarchy h;
  h.coarse_names = j.at("coarse").get<std::vector<std::string>>();
  h.fine_names = j.at("fine").get<std::vector<std::string>>();
  h.parent = j.at("parent").get<std::vector<std::size_t>>();
  h.validate();
  return h;
}

}  // namespace hvgg
